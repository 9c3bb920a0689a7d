//! Reference (single-threaded) execution of the protocol.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::buffer::{backward_exchange, forward_receive, forward_send};
use super::wire::{decode_frame, encode_frame, Direction};
use super::{
    ActivationBuffer, Execution, Mode, ProtocolError, Result, SampleId, Sampling, TrainConfig,
    UpdateOrder, DIVERGENCE_LOSS,
};
use crate::analysis::decompose;
use crate::model::{Dataset, LossHead, PipelineModel, Stage};
use crate::numerics::{stacked_norm, RngStream, StreamId, Vector};
use crate::quantize::{QuantizedPayload, QuantizerSpec};

/// The random streams a step consumes, one triple per boundary.
#[derive(Debug, Clone)]
pub struct StepRngs {
    pub forward: Vec<RngStream>,
    pub backward: Vec<RngStream>,
    pub buffer: Vec<RngStream>,
}

impl StepRngs {
    pub fn new(seed: u64, boundaries: usize) -> Self {
        let ids = 1..=boundaries as u16;
        Self {
            forward: ids.clone().map(|b| RngStream::new(seed, StreamId::Forward(b))).collect(),
            backward: ids.clone().map(|b| RngStream::new(seed, StreamId::Backward(b))).collect(),
            buffer: ids.map(|b| RngStream::new(seed, StreamId::Buffer(b))).collect(),
        }
    }
}

/// Receiver-side buffer copies used to check the mirror invariant in
/// reference mode.
#[derive(Debug, Clone)]
pub(crate) struct Mirror {
    pub receivers: Vec<ActivationBuffer>,
    pub buf_rngs: Vec<RngStream>,
}

/// Everything one compressed pass computed.
#[derive(Debug, Clone)]
pub(crate) struct PassTrace {
    /// Input of every stage: the sample for the first, received messages after.
    pub inputs: Vec<Vector>,
    /// Stage outputs before each forward exchange.
    pub activations: Vec<Vector>,
    /// Messages received at each boundary.
    pub received: Vec<Vector>,
    pub residuals: Vec<f64>,
    pub first_visit: bool,
    pub loss: f64,
    pub diverged: bool,
    /// Gradient applied at each stage output.
    pub upstream: Vec<Vector>,
    /// Input gradient of stage `j + 1` before backward quantization.
    pub unquantized: Vec<Vector>,
    pub param_grads: Vec<Vector>,
    pub bytes_fw: u64,
    pub bytes_bw: u64,
}

fn wire_round_trip(
    step: u64,
    sample: SampleId,
    boundary: usize,
    direction: Direction,
    spec: &QuantizerSpec,
    payload: &QuantizedPayload,
) -> Result<QuantizedPayload> {
    let frame = encode_frame(step, sample, boundary as u16 + 1, direction, spec, payload);
    let (header, decoded) = decode_frame(&frame, spec, payload.len())?;
    let decoded = decoded.ok_or_else(|| ProtocolError::Corrupt("unexpected halt".into()))?;
    if header.step != step || header.sample != sample || decoded != *payload {
        return Err(ProtocolError::Corrupt(format!(
            "frame for step {step} sample {sample} did not survive the wire"
        )));
    }
    Ok(decoded)
}

/// One pass of the protocol on `params`. With `apply` the gradient step is
/// taken; otherwise only the trace is produced (used for replays).
#[allow(clippy::too_many_arguments)]
pub(crate) fn compressed_pass(
    stages: &[Stage],
    head: LossHead,
    params: &mut [Vector],
    cfg: &TrainConfig,
    lr: f64,
    apply: bool,
    buffers: &mut [ActivationBuffer],
    mut mirror: Option<&mut Mirror>,
    rngs: &mut StepRngs,
    sample: SampleId,
    step: u64,
    x: &Vector,
    y: &Vector,
) -> Result<PassTrace> {
    let k = stages.len();
    let fw = cfg.effective_fw();
    let bw = cfg.effective_bw();
    let aq = cfg.mode == Mode::AqSgd;
    let mut trace = PassTrace {
        inputs: vec![x.clone()],
        activations: Vec::with_capacity(k - 1),
        received: Vec::with_capacity(k - 1),
        residuals: Vec::with_capacity(k - 1),
        first_visit: false,
        loss: 0.0,
        diverged: false,
        upstream: Vec::new(),
        unquantized: Vec::new(),
        param_grads: Vec::new(),
        bytes_fw: 0,
        bytes_bw: 0,
    };
    for j in 0..k - 1 {
        let a = stages[j].forward(&params[j], &trace.inputs[j])?;
        let send = forward_send(
            cfg.mode,
            &fw,
            aq.then(|| &mut buffers[j]),
            sample,
            step,
            &a,
            &mut rngs.forward[j],
            &mut rngs.buffer[j],
        )?;
        if let Some(m) = mirror.as_deref_mut() {
            let payload = wire_round_trip(step, sample, j, Direction::Forward, &fw, &send.payload)?;
            let got = forward_receive(
                cfg.mode,
                &fw,
                aq.then(|| &mut m.receivers[j]),
                sample,
                step,
                &payload,
                &mut m.buf_rngs[j],
            )?;
            if !got.bitwise_eq(&send.received) {
                return Err(ProtocolError::Corrupt(format!(
                    "receiver decoded a different message at boundary {}",
                    j + 1
                )));
            }
        }
        trace.first_visit |= send.first_visit;
        trace.bytes_fw += send.bytes;
        trace.residuals.push(send.residual);
        trace.activations.push(a);
        trace.received.push(send.received.clone());
        trace.inputs.push(send.received);
    }
    let out = stages[k - 1].forward(&params[k - 1], &trace.inputs[k - 1])?;
    trace.loss = head.loss(&out, y)?;
    if !trace.loss.is_finite() || trace.loss > DIVERGENCE_LOSS {
        trace.diverged = true;
        return Ok(trace);
    }
    let mut g = head.grad(&out, y)?;
    let mut upstream = vec![None; k];
    let mut unquantized = vec![None; k - 1];
    let mut param_grads = vec![None; k];
    for i in (0..k).rev() {
        let (pg, mut ig) = stages[i].backward(&params[i], &trace.inputs[i], &g)?;
        if apply && cfg.order == UpdateOrder::Sequential {
            params[i] = params[i].axpy(-lr, &pg)?;
            ig = stages[i].backward(&params[i], &trace.inputs[i], &g)?.1;
        }
        upstream[i] = Some(g.clone());
        param_grads[i] = Some(pg);
        if i > 0 {
            let j = i - 1;
            let (payload, received, bytes) =
                backward_exchange(&ig, trace.inputs[i].len(), &bw, &mut rngs.backward[j])?;
            if mirror.is_some() {
                wire_round_trip(step, sample, j, Direction::Backward, &bw, &payload)?;
            }
            trace.bytes_bw += bytes;
            unquantized[j] = Some(ig);
            g = received;
        }
    }
    trace.upstream = upstream.into_iter().map(|v| v.expect("filled")).collect();
    trace.unquantized = unquantized.into_iter().map(|v| v.expect("filled")).collect();
    trace.param_grads = param_grads.into_iter().map(|v| v.expect("filled")).collect();
    if apply && cfg.order == UpdateOrder::Simultaneous {
        for (p, pg) in params.iter_mut().zip(&trace.param_grads) {
            *p = p.axpy(-lr, pg)?;
        }
    }
    Ok(trace)
}

/// Error terms recorded for one step when analysis is enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAnalysis {
    /// `‖g_ξ‖`, the uncompressed stochastic gradient.
    pub true_grad_norm: f64,
    /// `‖ā_i − m̄_i‖` per boundary, against the uncompressed shadow pass.
    pub delta_norms: Vec<f64>,
    /// `‖Δ^(Q,i)‖` per boundary.
    pub delta_q_norms: Vec<f64>,
    /// `‖Δ^(i)‖` per stage.
    pub delta_stage_norms: Vec<f64>,
    pub delta_q_norm: f64,
    pub delta_tilde_norm: f64,
    /// Largest coordinate gap between the applied update and
    /// `−γ(g + Δ^(Q) + Δ̃)`.
    pub reconstruction_error: f64,
    /// Max-abs value of each stage's parameters before the step.
    pub param_linf: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub sample: SampleId,
    pub loss: f64,
    /// Norm of the gradient actually applied, all stages stacked.
    pub grad_norm: f64,
    /// `‖a_i − m̄_i‖` per boundary, where `a_i` is computed from the
    /// message the stage received.
    pub delta_norms: Vec<f64>,
    /// `‖a_i − m_old‖` per boundary on compressed AQ-SGD visits, else 0.
    pub residual_norms: Vec<f64>,
    /// `‖a_i − a_i^prev‖` per boundary, against the activation sent on the
    /// sample's previous visit (0 on a first visit). Empty when the caller
    /// keeps no history, as with [`step`].
    pub activation_change_norms: Vec<f64>,
    pub first_visit: bool,
    pub bytes_fw: u64,
    pub bytes_bw: u64,
    pub analysis: Option<StepAnalysis>,
}

impl StepMetrics {
    pub fn delta_norm_total(&self) -> f64 {
        stacked_norm(std::iter::once(&self.delta_norms[..]))
    }
}

fn metrics_from_trace(trace: &PassTrace, step: u64, epoch: u64, sample: SampleId) -> Result<StepMetrics> {
    let delta_norms = trace
        .activations
        .iter()
        .zip(&trace.received)
        .map(|(a, m)| Ok(a.sub(m)?.l2_norm()))
        .collect::<Result<Vec<_>>>()?;
    Ok(StepMetrics {
        step,
        epoch,
        sample,
        loss: trace.loss,
        grad_norm: stacked_norm(trace.param_grads.iter().map(Vector::as_slice)),
        delta_norms,
        residual_norms: trace.residuals.clone(),
        activation_change_norms: Vec::new(),
        first_visit: trace.first_visit,
        bytes_fw: trace.bytes_fw,
        bytes_bw: trace.bytes_bw,
        analysis: None,
    })
}

/// Empty sender buffers for every boundary; none outside AQ-SGD.
pub fn fresh_buffers(model: &PipelineModel, cfg: &TrainConfig) -> Vec<ActivationBuffer> {
    if cfg.mode != Mode::AqSgd {
        return Vec::new();
    }
    model
        .boundary_dims()
        .iter()
        .enumerate()
        .map(|(j, &d)| ActivationBuffer::new(j as u16 + 1, d, cfg.buffer))
        .collect()
}

/// One protocol step on `model`, updating it in place.
///
/// If the loss exceeds the divergence threshold the parameters are left
/// untouched and the returned metrics carry that loss.
///
/// Works for any `K ≥ 2`: stage `i` consumes the message received from
/// stage `i − 1` and is updated with its local Jacobian applied to the
/// quantized gradient received from stage `i + 1`.
#[allow(clippy::too_many_arguments)]
pub fn step(
    model: &mut PipelineModel,
    buffers: &mut [ActivationBuffer],
    rngs: &mut StepRngs,
    cfg: &TrainConfig,
    step: u64,
    epoch: u64,
    sample: SampleId,
    x: &Vector,
    y: &Vector,
) -> Result<StepMetrics> {
    let lr = cfg.fixed_lr()?;
    if cfg.mode == Mode::AqSgd && buffers.len() != model.num_stages() - 1 {
        return Err(ProtocolError::InvalidConfig(format!(
            "{} buffers for {} boundaries",
            buffers.len(),
            model.num_stages() - 1
        )));
    }
    let stages = model.stages().to_vec();
    let head = model.head();
    let trace = compressed_pass(
        &stages,
        head,
        model.params_mut(),
        cfg,
        lr,
        true,
        buffers,
        None,
        rngs,
        sample,
        step,
        x,
        y,
    )?;
    metrics_from_trace(&trace, step, epoch, sample)
}

fn require_stages(model: &PipelineModel, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(ProtocolError::InvalidConfig(format!(
            "{what} step on a {}-stage model",
            model.num_stages()
        )))
    }
}

/// [`step`] for a two-stage model.
#[allow(clippy::too_many_arguments)]
pub fn step_k2(
    model: &mut PipelineModel,
    buffers: &mut [ActivationBuffer],
    rngs: &mut StepRngs,
    cfg: &TrainConfig,
    t: u64,
    epoch: u64,
    sample: SampleId,
    x: &Vector,
    y: &Vector,
) -> Result<StepMetrics> {
    require_stages(model, model.num_stages() == 2, "two-stage")?;
    step(model, buffers, rngs, cfg, t, epoch, sample, x, y)
}

/// [`step`] for a model with three or more stages.
#[allow(clippy::too_many_arguments)]
pub fn step_kgt2(
    model: &mut PipelineModel,
    buffers: &mut [ActivationBuffer],
    rngs: &mut StepRngs,
    cfg: &TrainConfig,
    t: u64,
    epoch: u64,
    sample: SampleId,
    x: &Vector,
    y: &Vector,
) -> Result<StepMetrics> {
    require_stages(model, model.num_stages() > 2, "multi-stage")?;
    step(model, buffers, rngs, cfg, t, epoch, sample, x, y)
}

/// Full-batch statistics at the current parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub loss: f64,
    /// `‖∇f‖²`.
    pub grad_norm_sq: f64,
    /// Mean of `‖∇F(x; ξ) − ∇f(x)‖²` over the dataset.
    pub sigma_sq: f64,
}

pub fn checkpoint(model: &PipelineModel, data: &Dataset, step: u64) -> Result<Checkpoint> {
    let per_sample = data
        .iter()
        .map(|(x, y)| {
            let (l, g) = model.loss_and_grad(x, y)?;
            Ok((l, Vector::concat(&g)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_sample.len() as f64;
    let dim = per_sample[0].1.len();
    let mut mean = vec![0.0; dim];
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        for (m, v) in mean.iter_mut().zip(g.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let sigma_sq = per_sample
        .iter()
        .map(|(_, g)| g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / n;
    Ok(Checkpoint {
        step,
        loss: loss / n,
        grad_norm_sq: mean.iter().map(|v| v * v).sum(),
        sigma_sq,
    })
}

/// Sample order for a run.
pub(crate) struct Schedule {
    rng: RngStream,
    sampling: Sampling,
    n: usize,
    total: u64,
    next: u64,
    order: Vec<usize>,
}

impl Schedule {
    pub fn new(seed: u64, sampling: Sampling, n: usize, total: u64) -> Self {
        Self {
            rng: RngStream::new(seed, StreamId::Sampling),
            sampling,
            n,
            total,
            next: 0,
            order: (0..n).collect(),
        }
    }
}

impl Iterator for Schedule {
    /// `(step, epoch, sample)`.
    type Item = (u64, u64, SampleId);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.total {
            return None;
        }
        let t = self.next;
        let n = self.n as u64;
        let sample = match self.sampling {
            Sampling::EpochShuffle => {
                if t % n == 0 {
                    self.rng.shuffle(&mut self.order);
                }
                self.order[(t % n) as usize]
            }
            Sampling::UniformWithReplacement => self.rng.below(self.n),
        };
        self.next += 1;
        Some((t, t / n, sample as SampleId))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub model: PipelineModel,
    /// Sender-side buffers at the end of the run (empty unless AQ-SGD).
    pub buffers: Vec<ActivationBuffer>,
    pub diverged: bool,
    /// Step at which divergence was detected.
    pub diverged_at: Option<u64>,
    pub initial_loss: f64,
    /// Mean loss over the dataset at the final parameters.
    pub final_loss: Option<f64>,
    pub checkpoints: Vec<Checkpoint>,
    pub lr: f64,
    pub total_steps: u64,
}

/// Run the protocol over the configured number of steps.
pub fn run_training(model: PipelineModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.num_stages() != cfg.stages {
        return Err(ProtocolError::InvalidConfig(format!(
            "model has {} stages, config says {}",
            model.num_stages(),
            cfg.stages
        )));
    }
    if data.input(0).len() != model.input_dim() || data.target(0).len() != model.output_dim() {
        return Err(ProtocolError::InvalidConfig(
            "dataset dimensions do not match the model".into(),
        ));
    }
    let lr = cfg.fixed_lr()?;
    let total = cfg.total_steps(data.len());
    let initial_loss = model.full_loss(data)?;
    let schedule = Schedule::new(cfg.seed, cfg.sampling, data.len(), total);
    match cfg.execution {
        Execution::Reference => {
            let buffers = fresh_buffers(&model, cfg);
            run_reference(model, buffers, data, cfg, lr, total, initial_loss, schedule)
        }
        Execution::Workers => {
            let run = super::workers::run_workers(model, data, cfg, lr, schedule)?;
            let final_loss = if run.diverged {
                None
            } else {
                Some(run.model.full_loss(data)?)
            };
            Ok(TrainOutcome {
                metrics: run.metrics,
                model: run.model,
                buffers: run.buffers,
                diverged: run.diverged,
                diverged_at: run.diverged_at,
                initial_loss,
                final_loss,
                checkpoints: Vec::new(),
                lr,
                total_steps: total,
            })
        }
    }
}

/// Continue a run from existing sender buffers, e.g. to freeze the model
/// after a training phase. Reference execution only. Random streams start
/// afresh from `cfg.seed`.
pub fn resume_training(
    model: PipelineModel,
    buffers: Vec<ActivationBuffer>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.execution != Execution::Reference {
        return Err(ProtocolError::InvalidConfig("resume needs reference execution".into()));
    }
    let expected = fresh_buffers(&model, cfg);
    if buffers.len() != expected.len()
        || buffers.iter().zip(&expected).any(|(b, e)| b.dim() != e.dim() || b.precision() != e.precision())
    {
        return Err(ProtocolError::InvalidConfig("buffers do not match the model and mode".into()));
    }
    let lr = cfg.fixed_lr()?;
    let total = cfg.total_steps(data.len());
    let initial_loss = model.full_loss(data)?;
    let schedule = Schedule::new(cfg.seed, cfg.sampling, data.len(), total);
    run_reference(model, buffers, data, cfg, lr, total, initial_loss, schedule)
}

#[allow(clippy::too_many_arguments)]
fn run_reference(
    mut model: PipelineModel,
    mut buffers: Vec<ActivationBuffer>,
    data: &Dataset,
    cfg: &TrainConfig,
    lr: f64,
    total: u64,
    initial_loss: f64,
    schedule: Schedule,
) -> Result<TrainOutcome> {
    let k = model.num_stages();
    let mut rngs = StepRngs::new(cfg.seed, k - 1);
    let mut mirror = (cfg.verify_mirror).then(|| Mirror {
        receivers: buffers.clone(),
        buf_rngs: StepRngs::new(cfg.seed, k - 1).buffer,
    });
    let stages = model.stages().to_vec();
    let head = model.head();
    let mut metrics = Vec::with_capacity(total as usize);
    let mut checkpoints = Vec::new();
    let mut diverged_at = None;
    let mut previous: Vec<HashMap<SampleId, Vector>> = vec![HashMap::new(); k - 1];
    for (t, epoch, sample) in schedule {
        if cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0 {
            checkpoints.push(checkpoint(&model, data, t)?);
        }
        let (x, y) = (data.input(sample as usize), data.target(sample as usize));
        let breakdown = if cfg.analysis {
            decompose(&model, &buffers, &rngs, cfg, sample, t, x, y)?
        } else {
            None
        };
        let before = breakdown.as_ref().map(|_| model.params().to_vec());
        let result = compressed_pass(
            &stages,
            head,
            model.params_mut(),
            cfg,
            lr,
            true,
            &mut buffers,
            mirror.as_mut(),
            &mut rngs,
            sample,
            t,
            x,
            y,
        );
        let trace = match result {
            Ok(trace) if !trace.diverged => trace,
            Ok(_) => {
                diverged_at = Some(t);
                break;
            }
            Err(e) if e.is_non_finite() => {
                diverged_at = Some(t);
                break;
            }
            Err(e) => return Err(e),
        };
        let mut m = metrics_from_trace(&trace, t, epoch, sample)?;
        m.activation_change_norms = previous
            .iter_mut()
            .zip(&trace.activations)
            .map(|(seen, a)| {
                let change = match seen.get(&sample) {
                    Some(p) => a.sub(p)?.l2_norm(),
                    None => 0.0,
                };
                seen.insert(sample, a.clone());
                Ok(change)
            })
            .collect::<Result<Vec<_>>>()?;
        if let (Some(b), Some(before)) = (breakdown, before) {
            let recon = b.reconstructed_update(lr)?;
            let mut err = 0.0_f64;
            for ((after, prev), r) in model.params().iter().zip(&before).zip(&recon) {
                for ((a, p), r) in after.iter().zip(prev.iter()).zip(r.iter()) {
                    err = err.max(((a - p) - r).abs());
                }
            }
            m.analysis = Some(b.summary(err, before.iter().map(Vector::linf_norm).collect()));
        }
        if let Some(mr) = mirror.as_ref() {
            for (s, r) in buffers.iter().zip(&mr.receivers) {
                if s.digest() != r.digest() {
                    return Err(ProtocolError::BufferDivergence {
                        step: t,
                        boundary: s.boundary(),
                    });
                }
            }
        }
        metrics.push(m);
    }
    let diverged = diverged_at.is_some();
    let final_loss = if diverged {
        None
    } else {
        if cfg.checkpoint_every > 0 {
            checkpoints.push(checkpoint(&model, data, total)?);
        }
        let l = model.full_loss(data)?;
        l.is_finite().then_some(l)
    };
    Ok(TrainOutcome {
        metrics,
        model,
        buffers,
        diverged,
        diverged_at,
        initial_loss,
        final_loss,
        checkpoints,
        lr,
        total_steps: total,
    })
}
