//! Error measurement and numeric audits of the convergence bounds.
//!
//! [`error_decomposition`] replays a step on cloned buffers and random
//! streams, runs an uncompressed shadow pass at the same parameters, and
//! splits the applied gradient into `g + Δ^(Q) + Δ̃` exactly. The audits
//! compare those measurements with bounds built from [`TheoremConstants`].

mod audit;
mod constants;

pub use audit::{
    audit_lemma1, audit_lemma2_theorem1, frozen_decay_check, stability_trend, AuditReport,
    DecayReport, EpochStat, InequalityCheck, SignTest, TrendReport,
};
pub use constants::{
    compute_theorem_constants, estimate_constants, resolve_learning_rate, ConstantsPack,
    Provenance, TheoremConstants,
};

use thiserror::Error;

use crate::model::{ModelError, PipelineModel};
use crate::numerics::{stacked_norm, Vector};
use crate::protocol::{
    compressed_pass, ActivationBuffer, PassTrace, ProtocolError, SampleId, StepAnalysis, StepRngs,
    TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("quantizer constant c_Q = {0} is not below sqrt(1/2)")]
    Inadmissible(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("snapshot does not match the step: {0}")]
    SnapshotMismatch(String),
    #[error("no full-batch checkpoints were recorded")]
    MissingCheckpoints,
    #[error("need at least {needed} compressed epochs, found {found}")]
    TooFewEpochs { needed: usize, found: usize },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Exact split of one step's applied gradient.
///
/// Stages and boundaries are indexed from zero here. For two stages,
/// `delta_q[0]` is `Δ^(Q)` and `delta_stage` is `[Δ^(a), Δ^(b)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBreakdown {
    /// `ā_i − m̄_i` per boundary: exact activation minus received message.
    pub delta: Vec<Vector>,
    /// `J_iᵀ (Q(U_i) − U_i)` per boundary, in the parameter space of the
    /// stage upstream of it.
    pub delta_q: Vec<Vector>,
    /// `J_iᵀ U_i − g_i` for every stage but the last, `P_K − g_K` for the last.
    pub delta_stage: Vec<Vector>,
    /// Uncompressed stochastic gradient per stage.
    pub true_grad: Vec<Vector>,
    /// Gradient the protocol applies per stage.
    pub applied_grad: Vec<Vector>,
    pub exact_loss: f64,
}

impl ErrorBreakdown {
    pub fn delta_norm(&self) -> f64 {
        stacked_norm(self.delta.iter().map(Vector::as_slice))
    }

    pub fn delta_q_norm(&self) -> f64 {
        stacked_norm(self.delta_q.iter().map(Vector::as_slice))
    }

    /// `‖Δ̃‖` with every stage term stacked.
    pub fn delta_tilde_norm(&self) -> f64 {
        stacked_norm(self.delta_stage.iter().map(Vector::as_slice))
    }

    /// `−γ(g + Δ^(Q) + Δ̃)` per stage.
    pub fn reconstructed_update(&self, lr: f64) -> std::result::Result<Vec<Vector>, ProtocolError> {
        let k = self.true_grad.len();
        (0..k)
            .map(|i| {
                let mut total = self.true_grad[i].add(&self.delta_stage[i])?;
                if i < k - 1 {
                    total = total.add(&self.delta_q[i])?;
                }
                Ok(total.scaled(-lr)?)
            })
            .collect()
    }

    pub fn summary(&self, reconstruction_error: f64, param_linf: Vec<f64>) -> StepAnalysis {
        StepAnalysis {
            true_grad_norm: stacked_norm(self.true_grad.iter().map(Vector::as_slice)),
            delta_norms: self.delta.iter().map(Vector::l2_norm).collect(),
            delta_q_norms: self.delta_q.iter().map(Vector::l2_norm).collect(),
            delta_stage_norms: self.delta_stage.iter().map(Vector::l2_norm).collect(),
            delta_q_norm: self.delta_q_norm(),
            delta_tilde_norm: self.delta_tilde_norm(),
            reconstruction_error,
            param_linf,
        }
    }
}

/// Decompose the step the protocol is about to take for `sample`.
///
/// `buffers` and `rngs` must be the state right before the step; they are
/// cloned, so the protocol's own streams never advance.
#[allow(clippy::too_many_arguments)]
pub fn error_decomposition(
    model: &PipelineModel,
    buffers: &[ActivationBuffer],
    rngs: &StepRngs,
    cfg: &TrainConfig,
    sample: SampleId,
    step: u64,
    x: &Vector,
    y: &Vector,
) -> Result<ErrorBreakdown> {
    decompose(model, buffers, rngs, cfg, sample, step, x, y)?
        .ok_or_else(|| AnalysisError::SnapshotMismatch("the replayed step diverged".into()))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn decompose(
    model: &PipelineModel,
    buffers: &[ActivationBuffer],
    rngs: &StepRngs,
    cfg: &TrainConfig,
    sample: SampleId,
    step: u64,
    x: &Vector,
    y: &Vector,
) -> std::result::Result<Option<ErrorBreakdown>, ProtocolError> {
    let k = model.num_stages();
    let mut params = model.params().to_vec();
    let mut bufs = buffers.to_vec();
    let mut replay = rngs.clone();
    let lr = cfg.fixed_lr()?;
    let trace: PassTrace = compressed_pass(
        model.stages(),
        model.head(),
        &mut params,
        cfg,
        lr,
        false,
        &mut bufs,
        None,
        &mut replay,
        sample,
        step,
        x,
        y,
    )?;
    if trace.diverged {
        return Ok(None);
    }
    let exact = model.forward_all(x)?;
    let (exact_loss, true_grad) = model.loss_and_grad(x, y)?;
    let delta = (0..k - 1)
        .map(|j| Ok(exact[j].sub(&trace.received[j])?))
        .collect::<std::result::Result<Vec<_>, ProtocolError>>()?;
    let mut delta_q = Vec::with_capacity(k - 1);
    let mut delta_stage = Vec::with_capacity(k);
    for i in 0..k {
        let stage = model.stage(i);
        if i < k - 1 {
            let quant_err = trace.upstream[i].sub(&trace.unquantized[i])?;
            let (dq, _) = stage.backward(&model.params()[i], &trace.inputs[i], &quant_err)?;
            let (clean, _) = stage.backward(&model.params()[i], &trace.inputs[i], &trace.unquantized[i])?;
            delta_q.push(dq);
            delta_stage.push(clean.sub(&true_grad[i])?);
        } else {
            delta_stage.push(trace.param_grads[i].sub(&true_grad[i])?);
        }
    }
    Ok(Some(ErrorBreakdown {
        delta,
        delta_q,
        delta_stage,
        true_grad,
        applied_grad: trace.param_grads,
        exact_loss,
    }))
}
