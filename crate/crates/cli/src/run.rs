//! Building, running and auditing a single training run.

use aqsgd_core::analysis::{
    audit_lemma1, audit_lemma2_theorem1, compute_theorem_constants, estimate_constants,
    resolve_learning_rate, stability_trend, AuditReport, ConstantsPack, TheoremConstants, TrendReport,
};
use aqsgd_core::model::{make_dataset, Dataset, PipelineModel, ToyLq};
use aqsgd_core::numerics::{RngStream, StreamId};
use aqsgd_core::protocol::{checkpoint, run_training, LearningRate, TrainOutcome};
use aqsgd_core::quantize::{certified_cq, empirical_cq};
use serde::Serialize;

use crate::config::RunSpec;

/// Everything a run needs, resolved from its spec.
pub struct Prepared {
    pub spec: RunSpec,
    pub data: Dataset,
    pub model: PipelineModel,
    pub constants: Option<TheoremConstants>,
    /// Parameter box of the certified toy, per stage.
    pub domain: Option<Vec<f64>>,
    /// Known minimum loss, when the task has one.
    pub f_star: Option<f64>,
}

fn build_model(spec: &RunSpec) -> Result<(PipelineModel, Option<ToyLq>), String> {
    let (k, seed) = (spec.config.stages, spec.config.seed);
    let model = match spec.dataset.name.as_str() {
        "regression-mlp" => (PipelineModel::regression_mlp(k, seed), None),
        "classification-2d" => (PipelineModel::classifier_2d(k, seed), None),
        "toy-lq" => {
            if k != 2 {
                return Err("dataset toy-lq needs stages = 2".into());
            }
            let toy = ToyLq::default();
            (toy.model(seed), Some(toy))
        }
        other => return Err(format!("unknown dataset `{other}`")),
    };
    Ok((model.0.map_err(|e| e.to_string())?, model.1))
}

/// Certified constants for the two-stage toy with a certified forward
/// quantizer; sampled constants otherwise.
fn constants_for(
    spec: &RunSpec,
    model: &PipelineModel,
    data: &Dataset,
    toy: Option<&ToyLq>,
) -> Result<(TheoremConstants, Option<Vec<f64>>), String> {
    let cfg = &spec.config;
    let fw = cfg.effective_fw();
    let dim = model.boundary_dims().into_iter().max().unwrap_or(1);
    let certified = certified_cq(&fw, dim).ok();
    let n = data.len();
    let t = cfg.total_steps(n);
    let sigma = checkpoint(model, data, 0).map_err(|e| e.to_string())?.sigma_sq.sqrt();
    let mut rng = RngStream::new(cfg.seed, StreamId::Aux(20));
    let c_q = certified.unwrap_or_else(|| empirical_cq(&fw, dim, 1000, &mut rng).max);
    let (pack, domain) = match (toy, certified) {
        (Some(toy), Some(c_q)) => {
            let cert = toy.exact_constants(data, c_q).map_err(|e| e.to_string())?;
            (
                ConstantsPack::from_toy(&cert, c_q, n, sigma),
                Some(vec![toy.weight_bound, toy.scale_bound]),
            )
        }
        _ => {
            let pack = estimate_constants(model, &[model.params().to_vec()], data, c_q, 2, &mut rng)
                .map_err(|e| e.to_string())?;
            (pack, None)
        }
    };
    let constants = compute_theorem_constants(&pack, t).map_err(|e| e.to_string())?;
    Ok((constants, domain))
}

pub fn prepare(spec: &RunSpec, audit: bool) -> Result<Prepared, String> {
    let mut spec = spec.clone();
    let data = make_dataset(&spec.dataset.name, spec.dataset.samples, spec.dataset.seed).map_err(|e| e.to_string())?;
    let (model, toy) = build_model(&spec)?;
    if audit {
        spec.config.analysis = true;
        if spec.config.checkpoint_every == 0 {
            spec.config.checkpoint_every = (spec.config.total_steps(data.len()) / 10).max(1);
        }
    }
    let needs_constants = audit || spec.config.lr == LearningRate::Theorem;
    let (constants, domain) = if needs_constants {
        let (c, d) = constants_for(&spec, &model, &data, toy.as_ref())?;
        (Some(c), d)
    } else {
        (None, None)
    };
    if let Some(c) = &constants {
        spec.config = resolve_learning_rate(&spec.config, c);
    }
    spec.config.validate().map_err(|e| e.to_string())?;
    Ok(Prepared {
        spec,
        data,
        model,
        constants,
        domain,
        f_star: toy.map(|_| 0.0),
    })
}

pub fn execute(p: &Prepared) -> Result<TrainOutcome, String> {
    run_training(p.model.clone(), &p.data, &p.spec.config).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub mode: String,
    pub stages: usize,
    pub dataset: String,
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: Option<f64>,
    pub diverged: bool,
    pub diverged_at: Option<u64>,
    pub bytes_fw_total: u64,
    pub bytes_bw_total: u64,
}

pub fn summarize(spec: &RunSpec, out: &TrainOutcome) -> Summary {
    Summary {
        mode: spec.config.mode.to_string(),
        stages: spec.config.stages,
        dataset: spec.dataset.name.clone(),
        seed: spec.config.seed,
        lr: out.lr,
        steps: out.metrics.len(),
        initial_loss: out.initial_loss,
        final_loss: out.final_loss,
        diverged: out.diverged,
        diverged_at: out.diverged_at,
        bytes_fw_total: out.metrics.iter().map(|m| m.bytes_fw).sum(),
        bytes_bw_total: out.metrics.iter().map(|m| m.bytes_bw).sum(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditFile {
    pub constants: TheoremConstants,
    pub lemma1: AuditReport,
    pub lemma2_theorem1: Option<AuditReport>,
    pub trend: Option<TrendReport>,
    pub notes: Vec<String>,
}

pub fn audit(p: &Prepared, out: &TrainOutcome) -> Result<AuditFile, String> {
    let constants = p.constants.clone().ok_or("audit needs theorem constants")?;
    let mut notes = Vec::new();
    let lemma1 = audit_lemma1(&out.metrics, &constants, p.domain.as_deref());
    let lemma2 = match audit_lemma2_theorem1(&out.metrics, &out.checkpoints, &constants, out.lr, out.initial_loss, p.f_star) {
        Ok(r) => Some(r),
        Err(e) => {
            notes.push(format!("lemma2: {e}"));
            None
        }
    };
    let trend = match stability_trend(&out.metrics) {
        Ok(t) => Some(t),
        Err(e) => {
            notes.push(format!("trend: {e}"));
            None
        }
    };
    Ok(AuditFile {
        constants,
        lemma1,
        lemma2_theorem1: lemma2,
        trend,
        notes,
    })
}
