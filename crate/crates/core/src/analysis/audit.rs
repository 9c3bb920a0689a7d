//! Audits of the per-step and aggregate bounds, and trend statistics.
//!
//! Reports never fail on a violated inequality; they count violations and
//! record the worst case. A report built from certified constants is hard
//! (any violation is a failure), one built from empirical constants is soft.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AnalysisError, Provenance, Result, TheoremConstants};
use crate::protocol::{Checkpoint, SampleId, StepMetrics};

/// Relative tolerance for comparing two computed quantities.
const REL_SLACK: f64 = 1e-12;
/// Absolute tolerance, scaled by `1 + ‖g‖`, for terms that are differences
/// of two computed gradients.
const ABS_SLACK: f64 = 1e-12;

/// Constants each audit depends on.
const LEMMA1_INPUTS: &[&str] = &["c_a", "c_down", "l_down", "l_jac"];
const LEMMA2_INPUTS: &[&str] = &["l_f", "ell_a", "c_a", "c_down", "l_down", "l_jac"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub name: String,
    /// Left side at the worst step (largest `lhs / rhs`), or the aggregate.
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`.
    pub slack: f64,
    /// `lhs / rhs`; 0 when both are 0.
    pub ratio: f64,
    /// False for quantities that are reported but not asserted.
    pub asserted: bool,
    pub evaluated: usize,
    pub violations: usize,
    pub pass: bool,
}

impl InequalityCheck {
    fn new(name: &str, asserted: bool) -> Self {
        Self {
            name: name.to_string(),
            lhs: 0.0,
            rhs: 0.0,
            slack: 0.0,
            ratio: 0.0,
            asserted,
            evaluated: 0,
            violations: 0,
            pass: true,
        }
    }

    fn record(&mut self, lhs: f64, rhs: f64, tol: f64) {
        self.evaluated += 1;
        let holds = lhs <= rhs * (1.0 + REL_SLACK) + tol;
        if !holds {
            self.violations += 1;
            if self.asserted {
                self.pass = false;
            }
        }
        let ratio = ratio(lhs, rhs);
        if self.evaluated == 1 || ratio > self.ratio {
            self.lhs = lhs;
            self.rhs = rhs;
            self.slack = rhs - lhs;
            self.ratio = ratio;
        }
    }
}

fn ratio(lhs: f64, rhs: f64) -> f64 {
    if lhs == 0.0 {
        0.0
    } else if rhs == 0.0 {
        f64::INFINITY
    } else {
        lhs / rhs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub audit: String,
    pub provenance: Provenance,
    /// Violations of a hard report are failures.
    pub hard: bool,
    pub steps: usize,
    pub checks: Vec<InequalityCheck>,
    /// Steps whose parameters left the certified domain.
    pub domain_violations: usize,
    pub notes: Vec<String>,
    pub pass: bool,
}

impl AuditReport {
    fn finish(mut self) -> Self {
        self.pass = self.checks.iter().all(|c| c.pass) && self.domain_violations == 0;
        self
    }

    pub fn check(&self, name: &str) -> Option<&InequalityCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn violations(&self) -> usize {
        self.checks.iter().filter(|c| c.asserted).map(|c| c.violations).sum()
    }
}

fn out_of_domain(m: &StepMetrics, domain: Option<&[f64]>) -> bool {
    match (domain, &m.analysis) {
        (Some(bounds), Some(a)) => a.param_linf.iter().zip(bounds).any(|(v, b)| v > b),
        _ => false,
    }
}

/// Per-step check of `‖Δ^(Q)‖ ≤ c_Q C̃` and `‖Δ̃‖ ≤ κ‖δ‖`, with `κ` the
/// constants' `tilde_factor`. `domain` holds per-stage bounds on the
/// parameters' max-abs value; steps outside it are counted separately.
pub fn audit_lemma1(
    metrics: &[StepMetrics],
    constants: &TheoremConstants,
    domain: Option<&[f64]>,
) -> AuditReport {
    let mut dq = InequalityCheck::new("delta_q", true);
    let mut dt = InequalityCheck::new("delta_tilde", true);
    let mut domain_violations = 0;
    let mut missing = 0;
    for m in metrics {
        let Some(a) = &m.analysis else {
            missing += 1;
            continue;
        };
        if out_of_domain(m, domain) {
            domain_violations += 1;
        }
        let tol = ABS_SLACK * (1.0 + a.true_grad_norm);
        dq.record(a.delta_q_norm, constants.delta_q_bound(), tol);
        let delta: f64 = a.delta_norms.iter().map(|v| v * v).sum::<f64>().sqrt();
        dt.record(a.delta_tilde_norm, constants.tilde_factor * delta, tol);
    }
    let provenance = constants.inputs.provenance_of(LEMMA1_INPUTS);
    let mut notes = Vec::new();
    if missing > 0 {
        notes.push(format!("{missing} steps carried no error decomposition"));
    }
    if domain.is_none() && provenance == Provenance::Certified {
        notes.push("no domain supplied; certified bounds assumed to apply".into());
    }
    AuditReport {
        audit: "lemma1".into(),
        provenance,
        hard: provenance == Provenance::Certified,
        steps: metrics.len() - missing,
        checks: vec![dq, dt],
        domain_violations,
        notes,
        pass: false,
    }
    .finish()
}

/// Aggregate message-error bound and the convergence-rate comparison.
///
/// `f_star` is the minimum loss when known; otherwise the lowest
/// checkpoint loss is used as a stand-in and noted in the report.
pub fn audit_lemma2_theorem1(
    metrics: &[StepMetrics],
    checkpoints: &[Checkpoint],
    constants: &TheoremConstants,
    lr: f64,
    f_start: f64,
    f_star: Option<f64>,
) -> Result<AuditReport> {
    let t = metrics.len();
    let inside: Vec<&Checkpoint> = checkpoints.iter().filter(|c| (c.step as usize) < t).collect();
    if inside.is_empty() || t == 0 {
        return Err(AnalysisError::MissingCheckpoints);
    }
    let mut notes = Vec::new();
    let mut delta_sq = 0.0;
    let mut from_metrics = 0usize;
    for m in metrics {
        let norms = match &m.analysis {
            Some(a) => &a.delta_norms,
            None => {
                from_metrics += 1;
                &m.delta_norms
            }
        };
        delta_sq += norms.iter().map(|v| v * v).sum::<f64>();
    }
    if from_metrics > 0 && constants.k > 2 {
        notes.push(format!(
            "{from_metrics} steps used local message errors in place of accumulated ones"
        ));
    }
    let lhs = delta_sq / t as f64;
    let mean_grad_sq =
        inside.iter().map(|c| c.grad_norm_sq).sum::<f64>() / inside.len() as f64;
    let sigma_sq = checkpoints.iter().map(|c| c.sigma_sq).fold(0.0, f64::max);
    let mut lemma2 = InequalityCheck::new("lemma2", true);
    lemma2.record(lhs, constants.lemma2_rhs(lr, mean_grad_sq, sigma_sq), 0.0);
    if lr > constants.gamma * (1.0 + REL_SLACK) {
        lemma2.pass = false;
        notes.push(format!(
            "learning rate {lr} exceeds γ_theorem = {}; bound does not apply",
            constants.gamma
        ));
    }
    let f_min = match f_star {
        Some(v) => v,
        None => {
            notes.push("f* unknown; lowest checkpoint loss used".into());
            checkpoints.iter().map(|c| c.loss).fold(f_start, f64::min)
        }
    };
    let mut theorem = InequalityCheck::new("theorem1_ratio", false);
    theorem.record(mean_grad_sq, constants.theorem_rhs(f_start - f_min, sigma_sq), 0.0);
    notes.push(format!(
        "{} checkpoints, mean ‖∇f‖² = {mean_grad_sq:.6e}, σ̂² = {sigma_sq:.6e}",
        inside.len()
    ));
    let provenance = constants.inputs.provenance_of(LEMMA2_INPUTS);
    Ok(AuditReport {
        audit: "lemma2_theorem1".into(),
        provenance,
        hard: provenance == Provenance::Certified,
        steps: t,
        checks: vec![lemma2, theorem],
        domain_violations: 0,
        notes,
        pass: false,
    }
    .finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: u64,
    pub steps: usize,
    /// Steps that were not a first visit.
    pub compressed_steps: usize,
    pub mean_delta: f64,
    /// Mean `‖a_t − a_prev‖` over repeat visits.
    pub mean_activation_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub decreases: usize,
    pub increases: usize,
    pub ties: usize,
    /// One-sided binomial p-value for "at least this many decreases".
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub epochs: Vec<EpochStat>,
    /// False when there is no message error to follow.
    pub defined: bool,
    pub reason: Option<String>,
    pub sign_test: Option<SignTest>,
    /// Mean `‖δ‖` of the first epoch with repeat visits.
    pub first_compressed_mean: f64,
    pub last_mean: f64,
}

impl TrendReport {
    pub fn decreased(&self) -> bool {
        self.defined && self.last_mean < self.first_compressed_mean
    }
}

fn binomial_tail(n: usize, k: usize) -> f64 {
    // P(X ≥ k) for X ~ Bin(n, 1/2), in log space to stay finite.
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_choose = 0.0_f64;
    let mut terms = Vec::with_capacity(n + 1);
    for i in 0..=n {
        if i > 0 {
            ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= k {
            terms.push(ln_choose + ln_half_n);
        }
    }
    terms.iter().map(|v| v.exp()).sum::<f64>().min(1.0)
}

/// Per-epoch mean message error and activation change, with a sign test on
/// epoch-to-epoch differences of the message error.
pub fn stability_trend(metrics: &[StepMetrics]) -> Result<TrendReport> {
    let mut by_epoch: BTreeMap<u64, Vec<&StepMetrics>> = BTreeMap::new();
    for m in metrics {
        by_epoch.entry(m.epoch).or_default().push(m);
    }
    let epochs: Vec<EpochStat> = by_epoch
        .iter()
        .map(|(&epoch, steps)| {
            let repeat: Vec<&&StepMetrics> = steps.iter().filter(|m| !m.first_visit).collect();
            let changes: Vec<f64> = repeat
                .iter()
                .filter(|m| !m.activation_change_norms.is_empty())
                .map(|m| m.activation_change_norms.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            EpochStat {
                epoch,
                steps: steps.len(),
                compressed_steps: repeat.len(),
                mean_delta: steps.iter().map(|m| m.delta_norm_total()).sum::<f64>() / steps.len() as f64,
                mean_activation_change: if changes.is_empty() {
                    0.0
                } else {
                    changes.iter().sum::<f64>() / changes.len() as f64
                },
            }
        })
        .collect();
    let compressed: Vec<&EpochStat> = epochs.iter().filter(|e| e.compressed_steps > 0).collect();
    if compressed.len() < 3 {
        return Err(AnalysisError::TooFewEpochs {
            needed: 3,
            found: compressed.len(),
        });
    }
    if epochs.iter().all(|e| e.mean_delta == 0.0) {
        return Ok(TrendReport {
            epochs,
            defined: false,
            reason: Some("message error is identically zero".into()),
            sign_test: None,
            first_compressed_mean: 0.0,
            last_mean: 0.0,
        });
    }
    let mut test = SignTest {
        decreases: 0,
        increases: 0,
        ties: 0,
        p_value: 1.0,
    };
    for pair in compressed.windows(2) {
        match pair[1].mean_delta.partial_cmp(&pair[0].mean_delta) {
            Some(std::cmp::Ordering::Less) => test.decreases += 1,
            Some(std::cmp::Ordering::Greater) => test.increases += 1,
            _ => test.ties += 1,
        }
    }
    test.p_value = binomial_tail(test.decreases + test.increases, test.decreases);
    Ok(TrendReport {
        first_compressed_mean: compressed[0].mean_delta,
        last_mean: compressed[compressed.len() - 1].mean_delta,
        epochs,
        defined: true,
        reason: None,
        sign_test: Some(test),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    /// Consecutive repeat-visit pairs examined.
    pub pairs: usize,
    pub violations: usize,
    /// Largest `‖δ_{k+1}‖ / ‖δ_k‖` seen.
    pub max_ratio: f64,
    /// Pairs where `‖a − m_old‖` did not equal the previous `‖δ‖`, meaning
    /// the activation moved between visits.
    pub moved: usize,
}

/// With frozen parameters, every repeat visit should shrink each
/// boundary's `‖δ‖` by at least `c_Q`.
pub fn frozen_decay_check(metrics: &[StepMetrics], c_q: f64) -> DecayReport {
    let mut last: BTreeMap<SampleId, &StepMetrics> = BTreeMap::new();
    let mut report = DecayReport {
        pairs: 0,
        violations: 0,
        max_ratio: 0.0,
        moved: 0,
    };
    for m in metrics {
        if let Some(prev) = last.get(&m.sample) {
            for (j, (&now, &before)) in m.delta_norms.iter().zip(&prev.delta_norms).enumerate() {
                report.pairs += 1;
                if m.residual_norms[j] != before {
                    report.moved += 1;
                }
                if now > c_q * before * (1.0 + REL_SLACK) {
                    report.violations += 1;
                }
                report.max_ratio = report.max_ratio.max(ratio(now, before));
            }
        }
        last.insert(m.sample, m);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{compute_theorem_constants, ConstantsPack};
    use crate::protocol::StepAnalysis;

    fn metrics(delta: f64, dq: f64, dt: f64) -> StepMetrics {
        StepMetrics {
            step: 0,
            epoch: 0,
            sample: 0,
            loss: 0.0,
            grad_norm: 1.0,
            delta_norms: vec![delta],
            residual_norms: vec![0.0],
            activation_change_norms: vec![0.0],
            first_visit: false,
            bytes_fw: 0,
            bytes_bw: 0,
            analysis: Some(StepAnalysis {
                true_grad_norm: 1.0,
                delta_norms: vec![delta],
                delta_q_norms: vec![dq],
                delta_stage_norms: vec![dt, 0.0],
                delta_q_norm: dq,
                delta_tilde_norm: dt,
                reconstruction_error: 0.0,
                param_linf: vec![0.5, 0.5],
            }),
        }
    }

    fn constants() -> TheoremConstants {
        let p = ConstantsPack::two_stage(1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.25, 4, Provenance::Certified);
        compute_theorem_constants(&p, 100).unwrap()
    }

    #[test]
    fn zero_errors_pass() {
        let r = audit_lemma1(&[metrics(0.0, 0.0, 0.0)], &constants(), None);
        assert!(r.pass && r.hard);
        assert_eq!(r.violations(), 0);
    }

    #[test]
    fn fabricated_violation_is_flagged() {
        // δ = 0 but Δ̃ ≠ 0 cannot happen.
        let r = audit_lemma1(&[metrics(0.0, 0.0, 1e-3)], &constants(), None);
        assert!(!r.pass);
        assert_eq!(r.check("delta_tilde").unwrap().violations, 1);
        // ‖Δ^(Q)‖ above c_Q C_a C_{f∘b} = 0.25.
        let r = audit_lemma1(&[metrics(0.0, 0.3, 0.0)], &constants(), None);
        assert_eq!(r.check("delta_q").unwrap().violations, 1);
    }

    #[test]
    fn domain_exit_fails_hard_report() {
        let r = audit_lemma1(&[metrics(0.0, 0.0, 0.0)], &constants(), Some(&[0.1, 1.0]));
        assert_eq!(r.domain_violations, 1);
        assert!(!r.pass);
    }

    #[test]
    fn lemma2_requires_checkpoints() {
        assert!(matches!(
            audit_lemma2_theorem1(&[metrics(0.0, 0.0, 0.0)], &[], &constants(), 1e-3, 1.0, Some(0.0)),
            Err(AnalysisError::MissingCheckpoints)
        ));
    }

    #[test]
    fn lemma2_zero_error_passes() {
        let cp = Checkpoint {
            step: 0,
            loss: 1.0,
            grad_norm_sq: 1.0,
            sigma_sq: 0.5,
        };
        let c = constants();
        let r = audit_lemma2_theorem1(&[metrics(0.0, 0.0, 0.0)], &[cp], &c, c.gamma, 1.0, Some(0.0)).unwrap();
        assert!(r.pass);
        let r = audit_lemma2_theorem1(&[metrics(0.0, 0.0, 0.0)], &[cp], &c, 2.0 * c.gamma, 1.0, Some(0.0)).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn binomial_tail_values() {
        assert!((binomial_tail(3, 3) - 0.125).abs() < 1e-15);
        assert!((binomial_tail(4, 0) - 1.0).abs() < 1e-15);
        assert!((binomial_tail(10, 8) - 56.0 / 1024.0).abs() < 1e-14);
    }

    #[test]
    fn trend_needs_three_compressed_epochs() {
        let mut ms = Vec::new();
        for e in 0..2 {
            let mut m = metrics(1.0, 0.0, 0.0);
            m.epoch = e;
            ms.push(m);
        }
        assert!(matches!(stability_trend(&ms), Err(AnalysisError::TooFewEpochs { .. })));
    }
}
