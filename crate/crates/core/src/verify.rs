//! Self-checks runnable from the command line.
//!
//! Each suite returns a [`SuiteReport`] of labelled checks. A suite passes
//! when every check passes. Every suite also checks the metrics CSV header
//! against its pinned version, so column drift fails all of them.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::analysis::{
    audit_lemma1, audit_lemma2_theorem1, compute_theorem_constants, frozen_decay_check,
    resolve_learning_rate, stability_trend, AnalysisError, AuditReport, ConstantsPack,
    TheoremConstants, TrendReport,
};
use crate::model::{make_dataset, Dataset, ModelError, PipelineModel, ToyLq};
use crate::numerics::{RngStream, StreamId, Vector};
use crate::protocol::{
    checkpoint, resume_training, run_training, BufferPrecision, Execution, LearningRate, Mode,
    ProtocolError, TrainConfig, TrainOutcome,
};
use crate::quantize::{certified_cq, QuantizeError, QuantizerSpec, Scheme, StochasticQuantizer};
use crate::schema;
use crate::simnet::{self, Compression, SimnetError};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("unknown suite `{0}` (expected one of {SUITES:?})")]
    UnknownSuite(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error(transparent)]
    Simnet(#[from] SimnetError),
}

pub type Result<T> = std::result::Result<T, VerifyError>;

pub const SUITES: [&str; 7] = ["quantizer", "oracle", "lemma1", "lemma2", "trend", "kstage", "simnet"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub label: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        let mut report = Self {
            name: name.to_string(),
            checks: Vec::new(),
        };
        let schema = schema::check_schema();
        report.push(
            "metrics schema",
            schema.is_ok(),
            schema.err().unwrap_or_else(|| format!("v{}", schema::METRICS_SCHEMA_VERSION)),
        );
        report
    }

    fn push(&mut self, label: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            label: label.into(),
            pass,
            detail: detail.into(),
        });
    }

    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

pub fn run_suite(name: &str) -> Result<SuiteReport> {
    match name {
        "quantizer" => quantizer_suite(100_000),
        "oracle" => oracle_suite(),
        "lemma1" => lemma1_suite(),
        "lemma2" => lemma2_suite(),
        "trend" => trend_suite(),
        "kstage" => kstage_suite(),
        "simnet" => simnet_suite(),
        other => Err(VerifyError::UnknownSuite(other.to_string())),
    }
}

// ---------------------------------------------------------------- quantizer

/// Per-coordinate Monte Carlo test of `E[Q(x)] = x`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Unbiasedness {
    pub coords: usize,
    pub draws: usize,
    /// Coordinates whose sample mean is more than 4 standard errors from
    /// `x`, or differs from it at all when every draw agreed.
    pub failures: usize,
    pub worst_z: f64,
}

pub fn unbiasedness(
    q: &dyn StochasticQuantizer,
    vectors: &[Vector],
    draws: usize,
    rng: &mut RngStream,
) -> Unbiasedness {
    let mut out = Unbiasedness {
        coords: 0,
        draws,
        failures: 0,
        worst_z: 0.0,
    };
    for x in vectors {
        let d = x.len();
        let mut mean = vec![0.0; d];
        let mut m2 = vec![0.0; d];
        for n in 1..=draws {
            let y = q.apply(x, rng);
            for i in 0..d {
                let delta = y.as_slice()[i] - mean[i];
                mean[i] += delta / n as f64;
                m2[i] += delta * (y.as_slice()[i] - mean[i]);
            }
        }
        for i in 0..d {
            out.coords += 1;
            let var = if draws > 1 { m2[i] / (draws - 1) as f64 } else { 0.0 };
            let se = (var / draws as f64).sqrt();
            let gap = (mean[i] - x.as_slice()[i]).abs();
            if se == 0.0 {
                if gap != 0.0 {
                    out.failures += 1;
                    out.worst_z = f64::INFINITY;
                }
                continue;
            }
            let z = gap / se;
            out.worst_z = out.worst_z.max(z);
            if z > 4.0 {
                out.failures += 1;
            }
        }
    }
    out
}

/// Deterministic test vectors of mixed scale, including an all-zero one and
/// one with a single dominant coordinate.
pub fn fixed_vectors(d: usize, count: usize, seed: u64) -> Vec<Vector> {
    let mut rng = RngStream::new(seed, StreamId::Aux(10));
    (0..count)
        .map(|k| {
            let values = match k {
                0 => vec![0.0; d],
                1 => (0..d).map(|i| if i == 0 { 5.0 } else { 0.01 * (i as f64) }).collect(),
                _ => {
                    let scale = 10f64.powf(rng.uniform_in(-2.0, 2.0));
                    (0..d).map(|_| scale * rng.normal()).collect()
                }
            };
            Vector::new(values).expect("finite test vector")
        })
        .collect()
}

/// Result of checking `‖x − Q(x)‖ ≤ (√d / 2^b)‖x‖` on random pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub pairs: usize,
    pub violations: usize,
    /// Largest `‖x − Q(x)‖ / ((√d / 2^b)‖x‖)`.
    pub worst_ratio: f64,
}

/// Random dimension in `[1, 64]`, bits in `[1, 8]`, Gaussian `x` of random
/// scale, one draw per pair.
pub fn l2_bound_violations(pairs: usize, rng: &mut RngStream) -> BoundCheck {
    let mut out = BoundCheck {
        pairs,
        violations: 0,
        worst_ratio: 0.0,
    };
    for _ in 0..pairs {
        let d = 1 + rng.below(64);
        let bits = 1 + rng.below(8) as u8;
        let scale = 10f64.powf(rng.uniform_in(-3.0, 3.0));
        let x = Vector::new((0..d).map(|_| scale * rng.normal()).collect()).expect("finite");
        let spec = QuantizerSpec::l2(bits).expect("bits in range");
        let err = x.sub(&spec.apply(&x, rng)).expect("same length").l2_norm();
        let bound = (d as f64).sqrt() / 2f64.powi(i32::from(bits)) * x.l2_norm();
        if err > bound {
            out.violations += 1;
        }
        if bound > 0.0 {
            out.worst_ratio = out.worst_ratio.max(err / bound);
        }
    }
    out
}

/// Shifts every reconstruction by a fixed fraction of the input's largest
/// coordinate. Used to show the unbiasedness check can fail.
pub struct BiasedQuantizer {
    pub inner: QuantizerSpec,
    pub shift: f64,
}

impl StochasticQuantizer for BiasedQuantizer {
    fn apply(&self, x: &Vector, rng: &mut RngStream) -> Vector {
        let y = self.inner.apply(x, rng);
        let s = self.shift * x.linf_norm();
        Vector::new(y.iter().map(|v| v + s).collect()).expect("finite")
    }
}

fn unbiasedness_check(report: &mut SuiteReport, label: &str, q: &dyn StochasticQuantizer, draws: usize, seed: u64) -> bool {
    let vectors = fixed_vectors(32, 20, 0);
    let mut rng = RngStream::new(seed, StreamId::Aux(11));
    let u = unbiasedness(q, &vectors, draws, &mut rng);
    let pass = u.failures == 0;
    report.push(
        format!("unbiased {label}"),
        pass,
        format!("{} of {} coords outside 4 se, worst z {:.3}", u.failures, u.coords, u.worst_z),
    );
    pass
}

/// Unbiasedness of both coded schemes at 2, 4 and 8 bits, the deterministic
/// L2 bound, and a biased double that must be rejected.
pub fn quantizer_suite(draws: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("quantizer");
    for scheme in [Scheme::L2StochasticRound, Scheme::RangeUniformStochastic] {
        for bits in [2, 4, 8] {
            let spec = QuantizerSpec::new(scheme, bits)?;
            unbiasedness_check(&mut report, &spec.to_string(), &spec, draws, 1);
        }
    }
    let mut rng = RngStream::new(2, StreamId::Aux(12));
    let bound = l2_bound_violations(10_000, &mut rng);
    report.push(
        "l2 deterministic bound",
        bound.violations == 0,
        format!("{} violations in {} pairs, worst ratio {:.4}", bound.violations, bound.pairs, bound.worst_ratio),
    );
    let mut control = SuiteReport::new("control");
    let biased = BiasedQuantizer {
        inner: QuantizerSpec::range(4)?,
        shift: 0.01,
    };
    let accepted = unbiasedness_check(&mut control, "biased double", &biased, draws.min(20_000), 1);
    report.push(
        "biased double rejected",
        !accepted,
        control.checks.last().map(|c| c.detail.clone()).unwrap_or_default(),
    );
    Ok(report)
}

// ------------------------------------------------------------------- oracle

/// Plain SGD on the composed model, visiting samples in the order `run` did.
pub fn sgd_replay(mut model: PipelineModel, data: &Dataset, run: &TrainOutcome, lr: f64) -> Result<PipelineModel> {
    for m in &run.metrics {
        let i = m.sample as usize;
        let (_, grads) = model.loss_and_grad(data.input(i), data.target(i))?;
        let next = model
            .params()
            .iter()
            .zip(&grads)
            .map(|(p, g)| p.axpy(-lr, g))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(ModelError::from)?;
        model.set_params(next)?;
    }
    Ok(model)
}

pub fn bitwise_params_eq(a: &PipelineModel, b: &PipelineModel) -> bool {
    a.params().len() == b.params().len()
        && a.params().iter().zip(b.params()).all(|(x, y)| x.bitwise_eq(y))
}

pub fn oracle_suite() -> Result<SuiteReport> {
    let mut report = SuiteReport::new("oracle");
    let data = make_dataset("regression-mlp", 64, 3)?;
    for k in [2, 4] {
        let model = PipelineModel::regression_mlp(k, 11)?;
        let mut cfg = TrainConfig::new(Mode::AqSgd, k)
            .with_quantizers(QuantizerSpec::identity(), QuantizerSpec::identity())
            .with_lr(0.02)
            .with_seed(5);
        cfg.steps = Some(1000);
        let aq = run_training(model.clone(), &data, &cfg)?;
        let sgd = sgd_replay(model, &data, &aq, 0.02)?;
        report.push(
            format!("identity aqsgd = sgd, K={k}"),
            aq.metrics.len() == 1000 && bitwise_params_eq(&aq.model, &sgd),
            format!("{} steps", aq.metrics.len()),
        );
    }
    Ok(report)
}

// --------------------------------------------------------------- toy audits

/// A ToyLQ run prepared at `γ_theorem` with certified constants.
pub struct ToyStudy {
    pub toy: ToyLq,
    pub data: Dataset,
    pub model: PipelineModel,
    pub constants: TheoremConstants,
    pub cfg: TrainConfig,
}

/// Two-stage ToyLQ with L2 4-bit quantizers in both directions, `T` steps,
/// ten checkpoints and per-step error analysis.
pub fn toy_study(n: usize, t: u64, seed: u64) -> Result<ToyStudy> {
    let toy = ToyLq::default();
    let data = make_dataset("toy-lq", n, seed)?;
    let model = toy.model(seed)?;
    let spec = QuantizerSpec::l2(4)?;
    let c_q = certified_cq(&spec, toy.hidden_dim)?;
    let cert = toy.exact_constants(&data, c_q)?;
    let sigma = checkpoint(&model, &data, 0)?.sigma_sq.sqrt();
    let constants = compute_theorem_constants(&ConstantsPack::from_toy(&cert, c_q, n, sigma), t)?;
    let mut cfg = TrainConfig::new(Mode::AqSgd, 2).with_quantizers(spec, spec).with_seed(seed);
    cfg.lr = LearningRate::Theorem;
    cfg.steps = Some(t);
    cfg.analysis = true;
    cfg.checkpoint_every = (t / 10).max(1);
    let cfg = resolve_learning_rate(&cfg, &constants);
    Ok(ToyStudy {
        toy,
        data,
        model,
        constants,
        cfg,
    })
}

/// Runs the study and both audits. `f*` is 0 for the toy's nonnegative loss.
pub fn toy_audits(study: &ToyStudy) -> Result<(TrainOutcome, AuditReport, AuditReport)> {
    let run = run_training(study.model.clone(), &study.data, &study.cfg)?;
    let domain = [study.toy.weight_bound, study.toy.scale_bound];
    let lemma1 = audit_lemma1(&run.metrics, &study.constants, Some(&domain));
    let lemma2 = audit_lemma2_theorem1(
        &run.metrics,
        &run.checkpoints,
        &study.constants,
        run.lr,
        run.initial_loss,
        Some(0.0),
    )?;
    Ok((run, lemma1, lemma2))
}

fn push_audit(report: &mut SuiteReport, audit: &AuditReport, names: &[&str]) {
    report.push(
        format!("{} hard", audit.audit),
        audit.hard,
        format!("provenance {:?}, {} steps", audit.provenance, audit.steps),
    );
    report.push(
        format!("{} domain", audit.audit),
        audit.domain_violations == 0,
        format!("{} steps outside the certified box", audit.domain_violations),
    );
    for name in names {
        match audit.check(name) {
            Some(c) => report.push(
                format!("{} {name}", audit.audit),
                c.pass,
                format!("lhs {:.6e} rhs {:.6e} ratio {:.4} violations {}", c.lhs, c.rhs, c.ratio, c.violations),
            ),
            None => report.push(format!("{} {name}", audit.audit), false, "missing check"),
        }
    }
}

pub fn lemma1_suite() -> Result<SuiteReport> {
    let mut report = SuiteReport::new("lemma1");
    let study = toy_study(32, 10_000, 1)?;
    let (_, lemma1, _) = toy_audits(&study)?;
    push_audit(&mut report, &lemma1, &["delta_q", "delta_tilde"]);
    Ok(report)
}

pub fn lemma2_suite() -> Result<SuiteReport> {
    let mut report = SuiteReport::new("lemma2");
    let study = toy_study(32, 10_000, 1)?;
    report.push(
        "c_Q at most 0.25",
        study.constants.c_q() <= 0.25,
        format!("c_Q = {}", study.constants.c_q()),
    );
    let (_, _, lemma2) = toy_audits(&study)?;
    report.push("lemma2 passes", lemma2.pass, lemma2.notes.join("; "));
    if let Some(c) = lemma2.check("lemma2") {
        report.push(
            "lemma2 slack",
            c.pass,
            format!("lhs {:.6e} rhs {:.6e} ratio {:.4e}", c.lhs, c.rhs, c.ratio),
        );
    }
    Ok(report)
}

// -------------------------------------------------------- convergence study

pub const STUDY_SEEDS: [u64; 3] = [0, 1, 2];
pub const STUDY_SAMPLES: usize = 256;
pub const STUDY_EPOCHS: u64 = 10;
/// One step size for every mode and split; the library default.
pub const STUDY_LR: f64 = 0.05;

/// One configuration of the convergence study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub mode: Mode,
    pub stages: usize,
    pub fw_bits: u8,
    pub bw_bits: u8,
    pub buffer: BufferPrecision,
}

impl Cell {
    pub fn new(mode: Mode, stages: usize, fw_bits: u8, bw_bits: u8) -> Self {
        Self {
            mode,
            stages,
            fw_bits,
            bw_bits,
            buffer: BufferPrecision::Full,
        }
    }

    /// Uncompressed baseline; the bit fields are ignored.
    pub fn fp32(stages: usize) -> Self {
        Self::new(Mode::Fp32, stages, 32, 32)
    }

    pub fn with_buffer(mut self, buffer: BufferPrecision) -> Self {
        self.buffer = buffer;
        self
    }

    pub fn label(&self) -> String {
        if self.mode == Mode::Fp32 {
            return format!("fp32 K={}", self.stages);
        }
        let mut s = format!("{} K={} fw{} bw{}", self.mode, self.stages, self.fw_bits, self.bw_bits);
        if let BufferPrecision::Bits(z) = self.buffer {
            s.push_str(&format!(" z={z}"));
        }
        s
    }

    /// Range quantizers in both directions; data, initialization and
    /// quantizer streams all follow `seed`.
    pub fn config(&self, seed: u64, epochs: u64, lr: f64) -> Result<TrainConfig> {
        let (fw, bw) = match self.mode {
            Mode::Fp32 => (QuantizerSpec::identity(), QuantizerSpec::identity()),
            _ => (QuantizerSpec::range(self.fw_bits)?, QuantizerSpec::range(self.bw_bits)?),
        };
        let mut cfg = TrainConfig::new(self.mode, self.stages)
            .with_quantizers(fw, bw)
            .with_lr(lr)
            .with_seed(seed)
            .with_epochs(epochs);
        cfg.buffer = self.buffer;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub diverged: bool,
    pub final_loss: Option<f64>,
    /// Compressed-message trend; `None` outside AQ-SGD.
    pub trend: Option<TrendReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub cell: Cell,
    pub runs: Vec<SeedRun>,
}

impl CellResult {
    /// Mean final loss, `None` if any seed diverged.
    pub fn mean_final_loss(&self) -> Option<f64> {
        let losses: Option<Vec<f64>> = self.runs.iter().map(|r| r.final_loss).collect();
        losses.map(|l| l.iter().sum::<f64>() / l.len() as f64)
    }
}

pub fn run_cell(cell: Cell, seeds: &[u64], n: usize, epochs: u64, lr: f64) -> Result<CellResult> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let data = make_dataset("regression-mlp", n, seed)?;
        let model = PipelineModel::regression_mlp(cell.stages, seed)?;
        let out = run_training(model, &data, &cell.config(seed, epochs, lr)?)?;
        let trend = match (cell.mode, out.diverged) {
            (Mode::AqSgd, false) => Some(stability_trend(&out.metrics)?),
            _ => None,
        };
        runs.push(SeedRun {
            seed,
            diverged: out.diverged,
            final_loss: out.final_loss,
            trend,
        });
    }
    Ok(CellResult { cell, runs })
}

/// Cells behind the convergence, low-bit buffer and K-stage comparisons.
pub fn study_cells() -> Vec<Cell> {
    let mut cells = Vec::new();
    for k in [2, 4] {
        cells.push(Cell::fp32(k));
        cells.push(Cell::new(Mode::AqSgd, k, 4, 8));
        cells.push(Cell::new(Mode::AqSgd, k, 2, 4));
        cells.push(Cell::new(Mode::DirectQ, k, 2, 4));
    }
    cells.push(Cell::new(Mode::AqSgd, 2, 4, 8).with_buffer(BufferPrecision::Bits(8)));
    cells
}

/// Results keyed by [`Cell::label`]. Cells run on separate threads.
pub fn convergence_study() -> Result<BTreeMap<String, CellResult>> {
    let cells = study_cells();
    let results: Vec<Result<CellResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = cells
            .iter()
            .map(|&cell| s.spawn(move || run_cell(cell, &STUDY_SEEDS, STUDY_SAMPLES, STUDY_EPOCHS, STUDY_LR)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("study thread panicked")).collect()
    });
    let mut map = BTreeMap::new();
    for r in results {
        let r = r?;
        map.insert(r.cell.label(), r);
    }
    Ok(map)
}

fn mean_of(study: &BTreeMap<String, CellResult>, cell: Cell) -> Option<f64> {
    study.get(&cell.label()).and_then(CellResult::mean_final_loss)
}

fn fmt_loss(v: Option<f64>) -> String {
    v.map_or_else(|| "diverged".to_string(), |v| format!("{v:.6}"))
}

/// Frozen-parameter decay: warm up, then resume at `γ = 0` with the same
/// buffers and check every repeat visit shrinks `‖δ‖` by `c_Q`.
pub fn frozen_decay(seed: u64) -> Result<crate::analysis::DecayReport> {
    let data = make_dataset("regression-mlp", 16, seed)?;
    let fw = QuantizerSpec::l2(4)?;
    let cfg = TrainConfig::new(Mode::AqSgd, 2)
        .with_quantizers(fw, QuantizerSpec::l2(8)?)
        .with_epochs(3)
        .with_lr(STUDY_LR)
        .with_seed(seed);
    let warm = run_training(PipelineModel::regression_mlp(2, seed)?, &data, &cfg)?;
    let frozen_cfg = cfg.with_lr(0.0).with_epochs(6).with_seed(seed + 1);
    let frozen = resume_training(warm.model.clone(), warm.buffers.clone(), &data, &frozen_cfg)?;
    let c_q = certified_cq(&fw, warm.model.boundary_dims()[0])?;
    Ok(frozen_decay_check(&frozen.metrics, c_q))
}

pub fn trend_suite() -> Result<SuiteReport> {
    let mut report = SuiteReport::new("trend");
    let study = convergence_study()?;
    for result in study.values().filter(|r| r.cell.mode == Mode::AqSgd) {
        for run in &result.runs {
            let (pass, detail) = match &run.trend {
                Some(t) => (
                    t.decreased(),
                    format!("epoch 2 mean {:.4e}, last {:.4e}", t.first_compressed_mean, t.last_mean),
                ),
                None => (true, "diverged, not assessed".to_string()),
            };
            report.push(format!("{} seed {} delta shrinks", result.cell.label(), run.seed), pass, detail);
        }
    }
    let decay = frozen_decay(2)?;
    report.push(
        "frozen decay by c_Q",
        decay.violations == 0 && decay.moved == 0 && decay.pairs > 0,
        format!("{} pairs, {} violations, max ratio {:.4}", decay.pairs, decay.violations, decay.max_ratio),
    );
    Ok(report)
}

/// First-visit exactness and mirrored buffers over a K-worker run.
pub fn worker_exactness(n: usize, epochs: u64, k: usize) -> Result<(usize, usize, bool)> {
    let data = make_dataset("regression-mlp", n, 0)?;
    let mut cfg = TrainConfig::new(Mode::AqSgd, k).with_epochs(epochs).with_lr(STUDY_LR);
    cfg.execution = Execution::Workers;
    let out = run_training(PipelineModel::regression_mlp(k, 0)?, &data, &cfg)?;
    let firsts: Vec<_> = out.metrics.iter().filter(|m| m.first_visit).collect();
    let nonzero = firsts.iter().filter(|m| m.delta_norms.iter().any(|d| *d != 0.0)).count();
    // Worker mode compares sender and receiver digests after every step and
    // fails the run on a mismatch, so reaching here means they agreed.
    Ok((firsts.len(), nonzero, !out.diverged))
}

pub fn kstage_suite() -> Result<SuiteReport> {
    let mut report = SuiteReport::new("kstage");
    let (firsts, nonzero, ok) = worker_exactness(STUDY_SAMPLES, 5, 4)?;
    report.push(
        "first visits exact, K=4 workers",
        firsts == STUDY_SAMPLES && nonzero == 0 && ok,
        format!("{firsts} first visits, {nonzero} with nonzero delta"),
    );
    let study = convergence_study()?;
    let dq2 = mean_of(&study, Cell::new(Mode::DirectQ, 2, 2, 4));
    let dq4 = mean_of(&study, Cell::new(Mode::DirectQ, 4, 2, 4));
    let aq4 = mean_of(&study, Cell::new(Mode::AqSgd, 4, 2, 4));
    let fp4 = mean_of(&study, Cell::fp32(4));
    report.push(
        "directq degrades with K",
        matches!((dq2, dq4), (Some(a), Some(b)) if b > a) || (dq2.is_some() && dq4.is_none()),
        format!("K=2 {} K=4 {}", fmt_loss(dq2), fmt_loss(dq4)),
    );
    report.push(
        "aqsgd within 10% of fp32 at K=4",
        matches!((aq4, fp4), (Some(a), Some(f)) if a <= 1.1 * f),
        format!("aqsgd {} fp32 {}", fmt_loss(aq4), fmt_loss(fp4)),
    );
    Ok(report)
}

// ------------------------------------------------------------------- simnet

/// Throughput must not drop as bandwidth grows, and must not rise as the
/// payload grows (raw32 ≥ 8 ≥ 4 ≥ 2 bits per mode).
pub fn sweep_monotone(pipe: &simnet::PipelineSpec, bandwidths: &[f64]) -> Result<(usize, usize)> {
    let mut compressions = vec![Compression::Raw32];
    for bits in [8, 4, 2] {
        compressions.push(Compression::DirectQ {
            fw_bits: bits,
            bw_bits: bits,
        });
    }
    for bits in [8, 4, 2] {
        compressions.push(Compression::AqSgd {
            fw_bits: bits,
            bw_bits: bits,
        });
    }
    let rows = simnet::bandwidth_sweep(pipe, bandwidths, &compressions)?;
    let per_bw = compressions.len();
    let mut checks = 0;
    let mut violations = 0;
    for (i, row) in rows.iter().enumerate() {
        let (b, c) = (i / per_bw, i % per_bw);
        if b > 0 {
            checks += 1;
            if row.samples_per_sec < rows[i - per_bw].samples_per_sec {
                violations += 1;
            }
        }
        // Each compressed entry is compared with the next larger payload:
        // raw32 for 8 bits, the previous bit width otherwise.
        let larger = match c {
            1 | 4 => Some(0),
            2 | 3 | 5 | 6 => Some(c - 1),
            _ => None,
        };
        if let Some(p) = larger {
            checks += 1;
            if row.samples_per_sec < rows[b * per_bw + p].samples_per_sec {
                violations += 1;
            }
        }
    }
    Ok((checks, violations))
}

pub fn simnet_suite() -> Result<SuiteReport> {
    let mut report = SuiteReport::new("simnet");
    let pipe = simnet::preset("gpt2xl-8stage")?;
    let bands = simnet::ratio_bands(
        &pipe,
        10e9,
        100e6,
        Compression::AqSgd {
            fw_bits: 4,
            bw_bits: 4,
        },
    )?;
    report.push(
        "raw32 slowdown at least 5x",
        bands.raw_slowdown >= 5.0,
        format!("{:.2}x", bands.raw_slowdown),
    );
    report.push(
        "4-bit degradation at most 25%",
        bands.compressed_degradation <= 0.25,
        format!("{:.1}%", 100.0 * bands.compressed_degradation),
    );
    let (checks, violations) = sweep_monotone(&pipe, &simnet::log_grid(1e7, 1e11, 100))?;
    report.push(
        "monotone over 100 bandwidths",
        violations == 0,
        format!("{violations} violations in {checks} comparisons"),
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(matches!(run_suite("nope"), Err(VerifyError::UnknownSuite(_))));
    }

    #[test]
    fn biased_double_is_caught_with_few_draws() {
        let q = BiasedQuantizer {
            inner: QuantizerSpec::range(4).unwrap(),
            shift: 0.01,
        };
        let mut rng = RngStream::new(0, StreamId::Aux(1));
        let u = unbiasedness(&q, &fixed_vectors(8, 4, 0)[2..], 2000, &mut rng);
        assert!(u.failures > 0);
    }

    #[test]
    fn zero_variance_needs_exact_mean() {
        let mut rng = RngStream::new(0, StreamId::Aux(1));
        let vs = fixed_vectors(4, 1, 0);
        assert_eq!(unbiasedness(&QuantizerSpec::identity(), &vs, 10, &mut rng).failures, 0);
        let q = BiasedQuantizer {
            inner: QuantizerSpec::identity(),
            shift: 1e-3,
        };
        let vs = fixed_vectors(4, 3, 0);
        assert!(unbiasedness(&q, &vs[2..], 10, &mut rng).worst_z.is_infinite());
    }

    #[test]
    fn fixed_vectors_are_reproducible() {
        let a = fixed_vectors(32, 20, 0);
        let b = fixed_vectors(32, 20, 0);
        assert!(a.iter().zip(&b).all(|(x, y)| x.bitwise_eq(y)));
        assert!(a[0].is_zero());
    }

    #[test]
    fn simnet_suite_passes() {
        assert!(simnet_suite().unwrap().pass());
    }

    #[test]
    fn schema_check_is_first() {
        let r = SuiteReport::new("x");
        assert_eq!(r.checks[0].label, "metrics schema");
        assert!(r.pass());
    }
}
