//! Splittable differentiable models with hand-written backprop.
//!
//! A [`PipelineModel`] is an ordered list of [`Stage`]s followed by a squared
//! loss head. Each stage is a contiguous block of smooth layers (tanh, linear,
//! elementwise scaling) whose parameters live in one flat [`Vector`].
//! Splitting the same layer list into a different number of stages keeps the
//! initial parameters identical, so runs at different `K` are comparable.
//!
//! [`ToyLq`] is the analytically tractable instance: a bias-free linear first
//! stage `a(ξ, W) = Wξ` and a second stage `½‖v ⊙ h − y‖²`, for which every
//! Lipschitz and gradient-norm constant has a closed form over a parameter box.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{l2_norm, MatRef, NumericsError, RngStream, StreamId, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{what}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("unknown dataset '{0}'")]
    UnknownDataset(String),
    #[error("cannot certify constants: {0}")]
    NoCertificate(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(ModelError::DimensionMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

/// One smooth layer. Dense weights are stored row-major (`output × input`)
/// followed by the bias, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    DenseTanh { input: usize, output: usize },
    DenseLinear { input: usize, output: usize, bias: bool },
    /// `out = v ⊙ x` with `v` the parameters.
    Diagonal { dim: usize },
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        match *self {
            Layer::DenseTanh { input, .. } | Layer::DenseLinear { input, .. } => input,
            Layer::Diagonal { dim } => dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            Layer::DenseTanh { output, .. } | Layer::DenseLinear { output, .. } => output,
            Layer::Diagonal { dim } => dim,
        }
    }

    pub fn param_len(&self) -> usize {
        match *self {
            Layer::DenseTanh { input, output } => output * input + output,
            Layer::DenseLinear {
                input,
                output,
                bias,
            } => output * input + if bias { output } else { 0 },
            Layer::Diagonal { dim } => dim,
        }
    }

    fn affine(params: &[f64], input: usize, output: usize, bias: bool, x: &[f64]) -> Vec<f64> {
        let w = MatRef::new(output, input, &params[..output * input]);
        let mut z = w.matvec(x);
        if bias {
            for (zi, bi) in z.iter_mut().zip(&params[output * input..]) {
                *zi += bi;
            }
        }
        z
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        match *self {
            Layer::DenseTanh { input, output } => {
                let mut z = Self::affine(params, input, output, true, x);
                z.iter_mut().for_each(|v| *v = v.tanh());
                z
            }
            Layer::DenseLinear {
                input,
                output,
                bias,
            } => Self::affine(params, input, output, bias, x),
            Layer::Diagonal { .. } => params.iter().zip(x).map(|(v, h)| v * h).collect(),
        }
    }

    /// Returns `(param_grad, input_grad)` given the layer input, its output
    /// and the gradient with respect to that output.
    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        out: &[f64],
        upstream: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        match *self {
            Layer::DenseTanh { input, output } => {
                let dz: Vec<f64> = upstream
                    .iter()
                    .zip(out)
                    .map(|(u, o)| u * (1.0 - o * o))
                    .collect();
                Self::affine_backward(params, input, output, true, x, &dz)
            }
            Layer::DenseLinear {
                input,
                output,
                bias,
            } => Self::affine_backward(params, input, output, bias, x, upstream),
            Layer::Diagonal { .. } => {
                let pg = upstream.iter().zip(x).map(|(u, h)| u * h).collect();
                let ig = upstream.iter().zip(params).map(|(u, v)| u * v).collect();
                (pg, ig)
            }
        }
    }

    fn affine_backward(
        params: &[f64],
        input: usize,
        output: usize,
        bias: bool,
        x: &[f64],
        dz: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let mut pg = Vec::with_capacity(output * input + if bias { output } else { 0 });
        for &d in dz {
            pg.extend(x.iter().map(|xi| d * xi));
        }
        if bias {
            pg.extend_from_slice(dz);
        }
        let w = MatRef::new(output, input, &params[..output * input]);
        (pg, w.matvec_t(dz))
    }

    fn init(&self, rng: &mut RngStream) -> Vec<f64> {
        match *self {
            Layer::DenseTanh { input, output }
            | Layer::DenseLinear {
                input, output, ..
            } => {
                let std = (1.0 / input as f64).sqrt();
                let mut p: Vec<f64> = (0..output * input).map(|_| std * rng.normal()).collect();
                p.resize(self.param_len(), 0.0);
                p
            }
            Layer::Diagonal { dim } => (0..dim).map(|_| rng.uniform_in(0.5, 1.0)).collect(),
        }
    }
}

/// A contiguous block of layers owned by one pipeline worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    layers: Vec<Layer>,
}

impl Stage {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(ModelError::InvalidArchitecture("stage without layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(ModelError::InvalidArchitecture(format!(
                    "layer output {} feeds input {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn single(layer: Layer) -> Self {
        Self {
            layers: vec![layer],
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_len(&self) -> usize {
        self.layers.iter().map(Layer::param_len).sum()
    }

    fn param_slices<'a>(&self, params: &'a [f64]) -> Vec<&'a [f64]> {
        let mut rest = params;
        self.layers
            .iter()
            .map(|l| {
                let (head, tail) = rest.split_at(l.param_len());
                rest = tail;
                head
            })
            .collect()
    }

    fn check(&self, params: &Vector, input: &Vector) -> Result<()> {
        check_dim("stage parameters", self.param_len(), params.len())?;
        check_dim("stage input", self.input_dim(), input.len())
    }

    /// Inputs to every layer plus the final output.
    fn trace(&self, params: &[f64], input: &[f64]) -> Vec<Vec<f64>> {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_vec());
        for (layer, p) in self.layers.iter().zip(self.param_slices(params)) {
            let next = layer.forward(p, values.last().expect("non-empty"));
            values.push(next);
        }
        values
    }

    pub fn forward(&self, params: &Vector, input: &Vector) -> Result<Vector> {
        self.check(params, input)?;
        let mut trace = self.trace(params.as_slice(), input.as_slice());
        Ok(Vector::new(trace.pop().expect("output present"))?)
    }

    /// Exact gradients `(∂/∂params, ∂/∂input)` of `⟨upstream, forward(input)⟩`.
    pub fn backward(
        &self,
        params: &Vector,
        input: &Vector,
        upstream: &Vector,
    ) -> Result<(Vector, Vector)> {
        self.check(params, input)?;
        check_dim("upstream gradient", self.output_dim(), upstream.len())?;
        let trace = self.trace(params.as_slice(), input.as_slice());
        let slices = self.param_slices(params.as_slice());
        let mut grad = upstream.as_slice().to_vec();
        let mut param_grads: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (pg, ig) = layer.backward(slices[i], &trace[i], &trace[i + 1], &grad);
            param_grads[i] = pg;
            grad = ig;
        }
        let flat: Vec<f64> = param_grads.into_iter().flatten().collect();
        Ok((Vector::new(flat)?, Vector::new(grad)?))
    }

    /// Explicit Jacobian of the stage output with respect to its parameters,
    /// one row per output coordinate.
    pub fn param_jacobian(&self, params: &Vector, input: &Vector) -> Result<Vec<Vec<f64>>> {
        let d = self.output_dim();
        (0..d)
            .map(|k| {
                let mut e = vec![0.0; d];
                e[k] = 1.0;
                let (pg, _) = self.backward(params, input, &Vector::new(e)?)?;
                Ok(pg.into_inner())
            })
            .collect()
    }
}

/// Loss applied to the output of the last stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossHead {
    /// `½‖out − target‖²`.
    SquaredError,
}

impl LossHead {
    pub fn loss(&self, output: &Vector, target: &Vector) -> Result<f64> {
        check_dim("loss target", output.len(), target.len())?;
        let LossHead::SquaredError = self;
        Ok(0.5
            * output
                .iter()
                .zip(target.iter())
                .map(|(o, y)| (o - y) * (o - y))
                .sum::<f64>())
    }

    pub fn grad(&self, output: &Vector, target: &Vector) -> Result<Vector> {
        check_dim("loss target", output.len(), target.len())?;
        Ok(output.sub(target)?)
    }
}

/// Per-stage parameter gradients.
pub type StageGrads = Vec<Vector>;

/// `K ≥ 2` stages, a loss head, and the current parameters of every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineModel {
    stages: Vec<Stage>,
    head: LossHead,
    params: Vec<Vector>,
}

impl PipelineModel {
    pub fn new(stages: Vec<Stage>, head: LossHead, params: Vec<Vector>) -> Result<Self> {
        if stages.len() < 2 {
            return Err(ModelError::InvalidArchitecture(format!(
                "a pipeline needs at least two stages, got {}",
                stages.len()
            )));
        }
        for pair in stages.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(ModelError::InvalidArchitecture(format!(
                    "stage output {} feeds stage input {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        check_dim("parameter blocks", stages.len(), params.len())?;
        for (s, p) in stages.iter().zip(&params) {
            check_dim("stage parameters", s.param_len(), p.len())?;
        }
        Ok(Self {
            stages,
            head,
            params,
        })
    }

    /// Split `layers` into `k` contiguous stages and initialize parameters
    /// layer by layer from the `Init` stream of `seed`. The initial values do
    /// not depend on `k`.
    pub fn from_layers(layers: &[Layer], k: usize, head: LossHead, seed: u64) -> Result<Self> {
        if k == 0 || k > layers.len() {
            return Err(ModelError::InvalidArchitecture(format!(
                "cannot split {} layers into {k} stages",
                layers.len()
            )));
        }
        let mut rng = RngStream::new(seed, StreamId::Init);
        let layer_params: Vec<Vec<f64>> = layers.iter().map(|l| l.init(&mut rng)).collect();
        let base = layers.len() / k;
        let extra = layers.len() % k;
        let mut stages = Vec::with_capacity(k);
        let mut params = Vec::with_capacity(k);
        let mut start = 0;
        for s in 0..k {
            // Later stages absorb the remainder.
            let count = base + usize::from(s >= k - extra);
            let end = start + count;
            stages.push(Stage::new(layers[start..end].to_vec())?);
            params.push(Vector::new(layer_params[start..end].concat())?);
            start = end;
        }
        Self::new(stages, head, params)
    }

    /// The regression network used by the `regression-mlp` task: four layers
    /// `8 → 16 → 16 → 16 → 2`, tanh hidden units, linear output.
    pub fn regression_mlp(k: usize, seed: u64) -> Result<Self> {
        Self::from_layers(&regression_layers(), k, LossHead::SquaredError, seed)
    }

    /// Network for `classification-2d`: `2 → 16 → 16 → 16 → 2`.
    pub fn classifier_2d(k: usize, seed: u64) -> Result<Self> {
        let layers = vec![
            Layer::DenseTanh { input: 2, output: 16 },
            Layer::DenseTanh { input: 16, output: 16 },
            Layer::DenseTanh { input: 16, output: 16 },
            Layer::DenseLinear {
                input: 16,
                output: 2,
                bias: true,
            },
        ];
        Self::from_layers(&layers, k, LossHead::SquaredError, seed)
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stage(&self, i: usize) -> &Stage {
        &self.stages[i]
    }

    pub fn head(&self) -> LossHead {
        self.head
    }

    pub fn params(&self) -> &[Vector] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vector] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Vector>) -> Result<()> {
        check_dim("parameter blocks", self.stages.len(), params.len())?;
        for (s, p) in self.stages.iter().zip(&params) {
            check_dim("stage parameters", s.param_len(), p.len())?;
        }
        self.params = params;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.stages[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.stages[self.stages.len() - 1].output_dim()
    }

    /// Dimensions of the `K − 1` inter-stage messages.
    pub fn boundary_dims(&self) -> Vec<usize> {
        self.stages[..self.stages.len() - 1]
            .iter()
            .map(Stage::output_dim)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vector::len).sum()
    }

    pub fn flat_params(&self) -> Vector {
        Vector::concat(&self.params).expect("non-empty parameters")
    }

    /// Replace parameters from one flat vector, split in stage order.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("flat parameters", self.param_count(), flat.len())?;
        let mut rest = flat;
        let mut blocks = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let (head, tail) = rest.split_at(s.param_len());
            blocks.push(Vector::new(head.to_vec())?);
            rest = tail;
        }
        self.params = blocks;
        Ok(())
    }

    /// Stage outputs for an uncompressed forward pass; the last entry is the
    /// network output.
    pub fn forward_all(&self, input: &Vector) -> Result<Vec<Vector>> {
        let mut outs: Vec<Vector> = Vec::with_capacity(self.stages.len());
        for (i, (stage, p)) in self.stages.iter().zip(&self.params).enumerate() {
            let x = if i == 0 { input } else { &outs[i - 1] };
            let y = stage.forward(p, x)?;
            outs.push(y);
        }
        Ok(outs)
    }

    pub fn loss(&self, input: &Vector, target: &Vector) -> Result<f64> {
        let outs = self.forward_all(input)?;
        self.head.loss(outs.last().expect("K ≥ 2"), target)
    }

    /// Loss and exact per-stage gradients by end-to-end backprop.
    pub fn loss_and_grad(&self, input: &Vector, target: &Vector) -> Result<(f64, StageGrads)> {
        let outs = self.forward_all(input)?;
        let out = outs.last().expect("K ≥ 2");
        let loss = self.head.loss(out, target)?;
        let mut upstream = self.head.grad(out, target)?;
        let k = self.stages.len();
        let mut grads = vec![None; k];
        for i in (0..k).rev() {
            let x = if i == 0 { input } else { &outs[i - 1] };
            let (pg, ig) = self.stages[i].backward(&self.params[i], x, &upstream)?;
            grads[i] = Some(pg);
            upstream = ig;
        }
        Ok((loss, grads.into_iter().map(|g| g.expect("filled")).collect()))
    }

    /// Mean loss over the whole dataset.
    pub fn full_loss(&self, data: &Dataset) -> Result<f64> {
        let mut total = 0.0;
        for (x, y) in data.iter() {
            total += self.loss(x, y)?;
        }
        Ok(total / data.len() as f64)
    }

    /// Mean loss and mean gradient over the whole dataset.
    pub fn full_grad(&self, data: &Dataset) -> Result<(f64, StageGrads)> {
        let mut total = 0.0;
        let mut acc: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        for (x, y) in data.iter() {
            let (l, g) = self.loss_and_grad(x, y)?;
            total += l;
            for (a, gi) in acc.iter_mut().zip(&g) {
                for (s, v) in a.iter_mut().zip(gi.iter()) {
                    *s += v;
                }
            }
        }
        let n = data.len() as f64;
        let grads = acc
            .into_iter()
            .map(|a| Vector::new(a.into_iter().map(|v| v / n).collect()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok((total / n, grads))
    }
}

pub fn regression_layers() -> Vec<Layer> {
    vec![
        Layer::DenseTanh { input: 8, output: 16 },
        Layer::DenseTanh { input: 16, output: 16 },
        Layer::DenseTanh { input: 16, output: 16 },
        Layer::DenseLinear {
            input: 16,
            output: 2,
            bias: true,
        },
    ]
}

/// Synthetic task generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetKind {
    /// 8-d inputs uniform in `[-1, 1]`, 2-d targets from a fixed random tanh teacher.
    RegressionMlp,
    /// 4-d inputs uniform in `[-1, 1]`, 4-d targets `v* ⊙ (W* ξ)` from a teacher
    /// inside the [`ToyLq`] box, so the minimum loss is zero.
    ToyLq,
    /// Two interleaved half-moons in the plane with ±1 one-hot targets.
    Classification2d,
}

impl DatasetKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "regression-mlp" => Ok(Self::RegressionMlp),
            "toy-lq" => Ok(Self::ToyLq),
            "classification-2d" => Ok(Self::Classification2d),
            other => Err(ModelError::UnknownDataset(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::RegressionMlp => "regression-mlp",
            Self::ToyLq => "toy-lq",
            Self::Classification2d => "classification-2d",
        }
    }

    pub fn dims(self) -> (usize, usize) {
        match self {
            Self::RegressionMlp => (8, 2),
            Self::ToyLq => (TOY_INPUT_DIM, TOY_HIDDEN_DIM),
            Self::Classification2d => (2, 2),
        }
    }
}

/// A finite training set, regenerable bit-exactly from `(kind, N, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    kind: DatasetKind,
    seed: u64,
    inputs: Vec<Vector>,
    targets: Vec<Vector>,
    /// Every input coordinate lies in `[-input_bound, input_bound]`.
    input_bound: f64,
    /// Every target coordinate lies in `[-target_bound, target_bound]`.
    target_bound: f64,
}

impl Dataset {
    pub fn from_parts(
        kind: DatasetKind,
        seed: u64,
        inputs: Vec<Vector>,
        targets: Vec<Vector>,
        input_bound: f64,
        target_bound: f64,
    ) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(ModelError::InvalidArchitecture(format!(
                "dataset with {} inputs and {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Self {
            kind,
            seed,
            inputs,
            targets,
            input_bound,
            target_bound,
        })
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, i: usize) -> &Vector {
        &self.inputs[i]
    }

    pub fn target(&self, i: usize) -> &Vector {
        &self.targets[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vector, &Vector)> {
        self.inputs.iter().zip(&self.targets)
    }

    pub fn input_bound(&self) -> f64 {
        self.input_bound
    }

    pub fn target_bound(&self) -> f64 {
        self.target_bound
    }

    /// True when every sample lies in the declared box.
    pub fn within_box(&self) -> bool {
        self.inputs
            .iter()
            .all(|x| x.linf_norm() <= self.input_bound)
            && self
                .targets
                .iter()
                .all(|y| y.linf_norm() <= self.target_bound)
    }
}

pub fn make_dataset(name: &str, n: usize, seed: u64) -> Result<Dataset> {
    let kind = DatasetKind::parse(name)?;
    generate(kind, n, seed)
}

pub fn generate(kind: DatasetKind, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(ModelError::InvalidArchitecture("dataset needs N ≥ 1".into()));
    }
    let mut rng = RngStream::new(seed, StreamId::Data);
    let (inputs, targets): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match kind {
        DatasetKind::RegressionMlp => {
            let teacher_in = 8;
            let hidden = 12;
            let w1: Vec<f64> = (0..hidden * teacher_in)
                .map(|_| rng.normal() * (2.0 / teacher_in as f64).sqrt())
                .collect();
            let b1: Vec<f64> = (0..hidden).map(|_| 0.1 * rng.normal()).collect();
            let w2: Vec<f64> = (0..2 * hidden)
                .map(|_| rng.normal() / (hidden as f64).sqrt())
                .collect();
            (0..n)
                .map(|_| {
                    let x: Vec<f64> = (0..teacher_in).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
                    let mut h = MatRef::new(hidden, teacher_in, &w1).matvec(&x);
                    for (hi, bi) in h.iter_mut().zip(&b1) {
                        *hi = (*hi + bi).tanh();
                    }
                    let y = MatRef::new(2, hidden, &w2).matvec(&h);
                    (x, y)
                })
                .unzip()
        }
        DatasetKind::ToyLq => {
            let (w, v) = toy_teacher(&mut rng);
            (0..n)
                .map(|_| {
                    let x: Vec<f64> = (0..TOY_INPUT_DIM)
                        .map(|_| rng.uniform_in(-1.0, 1.0))
                        .collect();
                    let h = MatRef::new(TOY_HIDDEN_DIM, TOY_INPUT_DIM, &w).matvec(&x);
                    let y = h.iter().zip(&v).map(|(a, b)| a * b).collect();
                    (x, y)
                })
                .unzip()
        }
        DatasetKind::Classification2d => (0..n)
            .map(|i| {
                let class = i % 2;
                let t = rng.uniform_in(0.0, std::f64::consts::PI);
                let (cx, cy) = if class == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let x = vec![
                    (cx - 0.5 + 0.1 * rng.normal()).clamp(-2.0, 2.0) / 2.0,
                    (cy - 0.25 + 0.1 * rng.normal()).clamp(-2.0, 2.0) / 2.0,
                ];
                let y = if class == 0 {
                    vec![1.0, -1.0]
                } else {
                    vec![-1.0, 1.0]
                };
                (x, y)
            })
            .unzip(),
    };
    let inputs = inputs
        .into_iter()
        .map(Vector::new)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let targets = targets
        .into_iter()
        .map(Vector::new)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let target_bound = match kind {
        DatasetKind::ToyLq => targets.iter().fold(0.0_f64, |m, y| m.max(y.linf_norm())),
        DatasetKind::RegressionMlp => 12f64.sqrt() * 3.0,
        DatasetKind::Classification2d => 1.0,
    };
    Dataset::from_parts(kind, seed, inputs, targets, 1.0, target_bound)
}

pub const TOY_INPUT_DIM: usize = 4;
pub const TOY_HIDDEN_DIM: usize = 4;

fn toy_teacher(rng: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
    let w = (0..TOY_HIDDEN_DIM * TOY_INPUT_DIM)
        .map(|_| rng.uniform_in(-0.5, 0.5))
        .collect();
    let v = (0..TOY_HIDDEN_DIM).map(|_| rng.uniform_in(0.5, 1.0)).collect();
    (w, v)
}

/// The linear-quadratic toy: `a(ξ, W) = Wξ` and `f∘b(h, v) = ½‖v ⊙ h − y‖²`,
/// with every weight in `[-weight_bound, weight_bound]` and every scale in
/// `[-scale_bound, scale_bound]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyLq {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub weight_bound: f64,
    pub scale_bound: f64,
}

impl Default for ToyLq {
    fn default() -> Self {
        Self {
            input_dim: TOY_INPUT_DIM,
            hidden_dim: TOY_HIDDEN_DIM,
            weight_bound: 1.0,
            scale_bound: 1.5,
        }
    }
}

/// Closed-form constants for a [`ToyLq`] instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyCertificate {
    /// Lipschitz constant of `W ↦ Wξ`, maximized over samples.
    pub ell_a: f64,
    /// Bound on the norm of the Jacobian of `W ↦ Wξ`.
    pub c_a: f64,
    /// Lipschitz constant of `∇(f∘b)` on the message region.
    pub l_fb: f64,
    /// Bound on `‖∇(f∘b)‖` on the message region.
    pub c_fb: f64,
    /// Lipschitz constant of `∇f` on the parameter box.
    pub l_f: f64,
    /// Bound on `‖Wξ‖` over the box.
    pub activation_norm_bound: f64,
    /// Bound on `‖m‖` for any buffered message.
    pub message_norm_bound: f64,
    /// Bound on any coordinate of an activation or message.
    pub message_coord_bound: f64,
}

impl ToyLq {
    pub fn layers(&self) -> Vec<Layer> {
        vec![
            Layer::DenseLinear {
                input: self.input_dim,
                output: self.hidden_dim,
                bias: false,
            },
            Layer::Diagonal {
                dim: self.hidden_dim,
            },
        ]
    }

    /// Two-stage model with small random weights and scales in `[0.5, 1]`.
    pub fn model(&self, seed: u64) -> Result<PipelineModel> {
        let mut rng = RngStream::new(seed, StreamId::Init);
        let bound = 0.3 * self.weight_bound;
        let w: Vec<f64> = (0..self.hidden_dim * self.input_dim)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        let v: Vec<f64> = (0..self.hidden_dim)
            .map(|_| rng.uniform_in(0.5, 1.0).min(self.scale_bound))
            .collect();
        let layers = self.layers();
        PipelineModel::new(
            vec![Stage::single(layers[0]), Stage::single(layers[1])],
            LossHead::SquaredError,
            vec![Vector::new(w)?, Vector::new(v)?],
        )
    }

    /// True when the parameters lie inside the certified box.
    pub fn contains(&self, model: &PipelineModel) -> bool {
        let p = model.params();
        p.len() == 2
            && p[0].linf_norm() <= self.weight_bound
            && p[1].linf_norm() <= self.scale_bound
    }

    /// Closed-form constants over the parameter box.
    ///
    /// With `X = max‖ξ‖`, `A = √(hn)·w·X` bounds `‖Wξ‖`. Buffered messages
    /// obey `‖δ‖ ≤ c_Q(‖a − a_prev‖ + ‖δ_prev‖)`, which keeps
    /// `‖m‖ ≤ A(1 + c_Q)/(1 − c_Q)` and each coordinate within
    /// `√n·w·X + 2c_Q·A/(1 − c_Q)`; `message_cq` is the forward quantizer's
    /// certified constant (zero when uncompressed). On that region, with
    /// `V` the scale bound, `H` the coordinate bound, `M` the message norm
    /// bound and `Y`/`Ŷ` the max target coordinate/norm:
    ///
    /// * `ℓ_a = C_a = X`
    /// * `C_{f∘b} = √(V² + H²)·(V·M + Ŷ)`
    /// * `L_{f∘b} = (V² + H²)/2 + √((max(V², H²)/2)² + (2VH + Y)²)`, a bound
    ///   on the 2×2 Hessian blocks in `(h_i, v_i)`
    /// * `L_f = max(X², 1)·L_{f∘b}`, since the Hessian of the composition is
    ///   `Jᵀ ∇²(f∘b) J` with `‖J‖ ≤ max(X, 1)`.
    pub fn exact_constants(&self, data: &Dataset, message_cq: f64) -> Result<ToyCertificate> {
        let bounds = [self.weight_bound, self.scale_bound, message_cq];
        if bounds.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(ModelError::NoCertificate("unbounded parameter box".into()));
        }
        if message_cq >= 1.0 {
            return Err(ModelError::NoCertificate(format!(
                "messages are unbounded for c_Q = {message_cq}"
            )));
        }
        check_dim("toy input", self.input_dim, data.input(0).len())?;
        check_dim("toy target", self.hidden_dim, data.target(0).len())?;
        let x_max = data.iter().fold(0.0_f64, |m, (x, _)| m.max(x.l2_norm()));
        let y_coord = data.iter().fold(0.0_f64, |m, (_, y)| m.max(y.linf_norm()));
        let y_norm = data.iter().fold(0.0_f64, |m, (_, y)| m.max(y.l2_norm()));
        let n = self.input_dim as f64;
        let h = self.hidden_dim as f64;
        let w = self.weight_bound;
        let v = self.scale_bound;
        let act_norm = (h * n).sqrt() * w * x_max;
        let act_coord = n.sqrt() * w * x_max;
        let msg_norm = act_norm * (1.0 + message_cq) / (1.0 - message_cq);
        let msg_coord = act_coord + 2.0 * message_cq * act_norm / (1.0 - message_cq);
        let c_fb = (v * v + msg_coord * msg_coord).sqrt() * (v * msg_norm + y_norm);
        let diag = (v * v).max(msg_coord * msg_coord) / 2.0;
        let cross = 2.0 * v * msg_coord + y_coord;
        let l_fb = (v * v + msg_coord * msg_coord) / 2.0 + (diag * diag + cross * cross).sqrt();
        let l_f = (x_max * x_max).max(1.0) * l_fb;
        Ok(ToyCertificate {
            ell_a: x_max,
            c_a: x_max,
            l_fb,
            c_fb,
            l_f,
            activation_norm_bound: act_norm,
            message_norm_bound: msg_norm,
            message_coord_bound: msg_coord,
        })
    }
}

/// Squared loss of the toy second stage and its gradient in `(h, v)`.
pub fn toy_head_grad(h: &[f64], v: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let r: Vec<f64> = v.iter().zip(h).zip(y).map(|((a, b), c)| a * b - c).collect();
    let gh = r.iter().zip(v).map(|(ri, vi)| ri * vi).collect();
    let gv = r.iter().zip(h).map(|(ri, hi)| ri * hi).collect();
    (gh, gv)
}

/// Norm of the concatenated toy head gradient.
pub fn toy_head_grad_norm(h: &[f64], v: &[f64], y: &[f64]) -> f64 {
    let (gh, gv) = toy_head_grad(h, v, y);
    (l2_norm(&gh).powi(2) + l2_norm(&gv).powi(2)).sqrt()
}
