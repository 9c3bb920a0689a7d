//! Theorem constants and learning-rate resolution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AnalysisError, Result};
use crate::model::{Dataset, LossHead, PipelineModel, Stage, ToyCertificate};
use crate::numerics::{stacked_norm, Matrix, RngStream, Vector};
use crate::protocol::{LearningRate, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Proven bound over the whole domain.
    Certified,
    /// Supremum of observed ratios; not a proof.
    Empirical,
}

/// Primitive constants, indexed by boundary `i = 1..K−1` (stored from zero).
///
/// * `c_a[i]`, `ell_a[i]`: Jacobian bound and Lipschitz constant of stage
///   `i` with respect to its parameters. `ell_a` may also include the last
///   stage; all of its entries enter `‖ℓ_a‖`.
/// * `c_down[i]`, `l_down[i]`: gradient bound and gradient-Lipschitz
///   constant of everything downstream of boundary `i`, including the loss.
/// * `l_jac[i]`: Lipschitz constant, in its input message, of stage `i`'s
///   parameter Jacobian. Only read for `K > 2`; entry 0 is unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsPack {
    pub l_f: f64,
    pub ell_a: Vec<f64>,
    pub c_a: Vec<f64>,
    pub l_down: Vec<f64>,
    pub c_down: Vec<f64>,
    pub l_jac: Vec<f64>,
    pub sigma: f64,
    pub c_q: f64,
    pub n: usize,
    pub provenance: BTreeMap<String, Provenance>,
}

impl ConstantsPack {
    /// Two-stage pack with every primitive constant of the same provenance.
    #[allow(clippy::too_many_arguments)]
    pub fn two_stage(
        l_f: f64,
        ell_a: f64,
        c_a: f64,
        l_fb: f64,
        c_fb: f64,
        sigma: f64,
        c_q: f64,
        n: usize,
        provenance: Provenance,
    ) -> Self {
        let provenance = ["l_f", "ell_a", "c_a", "l_down", "c_down", "sigma"]
            .iter()
            .map(|k| (k.to_string(), provenance))
            .collect();
        Self {
            l_f,
            ell_a: vec![ell_a],
            c_a: vec![c_a],
            l_down: vec![l_fb],
            c_down: vec![c_fb],
            l_jac: vec![0.0],
            sigma,
            c_q,
            n,
            provenance,
        }
    }

    /// Certified pack from a toy certificate; `sigma` is marked empirical.
    pub fn from_toy(cert: &ToyCertificate, c_q: f64, n: usize, sigma: f64) -> Self {
        let mut pack = Self::two_stage(
            cert.l_f,
            cert.ell_a,
            cert.c_a,
            cert.l_fb,
            cert.c_fb,
            sigma,
            c_q,
            n,
            Provenance::Certified,
        );
        pack.provenance.insert("sigma".into(), Provenance::Empirical);
        pack
    }

    pub fn stages(&self) -> usize {
        self.c_down.len() + 1
    }

    /// Certified only if every listed constant that the pack records is.
    pub fn provenance_of(&self, names: &[&str]) -> Provenance {
        let all = names
            .iter()
            .filter_map(|n| self.provenance.get(*n))
            .all(|p| *p == Provenance::Certified);
        if all {
            Provenance::Certified
        } else {
            Provenance::Empirical
        }
    }

    /// Certified only if every primitive constant is.
    pub fn overall(&self) -> Provenance {
        if self.provenance.values().all(|p| *p == Provenance::Certified) {
            Provenance::Certified
        } else {
            Provenance::Empirical
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    pub inputs: ConstantsPack,
    pub k: usize,
    pub t: u64,
    /// Theorem constant `C`. For `K > 2` this is the analog built from `C'`
    /// and `C_1`, see [`compute_theorem_constants`].
    pub c: f64,
    pub c_prime: f64,
    /// Two stages only; evaluated at `γ_theorem`.
    pub c_double_prime: Option<f64>,
    /// `√Σ C_{a_i}² C_{down,i}²`; for two stages `C_a·C_{f∘b}`.
    pub c_tilde: f64,
    /// More than two stages only.
    pub c1: Option<f64>,
    /// Coefficient `κ` of `‖Δ̃‖ ≤ κ‖δ‖`: `(1 + C_a)L_{f∘b}` for two stages,
    /// `√(2K·C_1)` otherwise.
    pub tilde_factor: f64,
    pub gamma: f64,
    pub provenance: Provenance,
}

impl TheoremConstants {
    pub fn c_q(&self) -> f64 {
        self.inputs.c_q
    }

    /// `c_Q · C̃`, the bound on `‖Δ^(Q)‖`.
    pub fn delta_q_bound(&self) -> f64 {
        self.inputs.c_q * self.c_tilde
    }

    /// Right-hand side of the message-error bound for the given averages.
    pub fn lemma2_rhs(&self, gamma: f64, mean_grad_sq: f64, sigma_sq: f64) -> f64 {
        let q = self.delta_q_bound();
        self.c_prime * gamma * gamma * (mean_grad_sq + sigma_sq + q * q)
    }

    /// Right-hand side of the convergence rate, without its universal constant.
    pub fn theorem_rhs(&self, gap: f64, sigma_sq: f64) -> f64 {
        let q = self.delta_q_bound();
        let root_t = (self.t as f64).sqrt();
        (self.c + self.inputs.l_f) * gap / root_t + (sigma_sq + q * q) / root_t
    }
}

fn check_nonneg(name: &str, values: &[f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(AnalysisError::InvalidInput(format!(
            "{name} must be finite and non-negative, got {v}"
        )));
    }
    Ok(())
}

/// Fill in the derived constants and `γ_theorem = 1/(3(C + 3L_f)√T)`.
///
/// For two stages:
/// `C = 4c_Q ℓ_a (1 + C_a) L_{f∘b} N / √(1 − 2c_Q²)`,
/// `C' = 18 c_Q² ℓ_a² N² / (1 − 2c_Q²)`,
/// `C'' = (½ + 3γL_f/2)(1 + C_a)² L_{f∘b}²`.
///
/// For `K > 2`: `C̃ = √Σ C_{a_i}² C_{down,i}²`,
/// `C_1 = max{(1 + 2C_{a_{K−1}}²) L_{down,K−1}², max_i (C_{a_i}² L_{down,i}² + C_{down,i+1}² L_{jac,i+1}²)}`,
/// `C' = K · 36 c_Q² ‖ℓ_a‖² N² C_1 / (1 − 2c_Q²)`. No closed form for `C` is
/// stated in that case; `C = (4/√18) √(C' · 2K · C_1)` is used, which has the
/// same structure as the two-stage formula (`√C'` times the `‖Δ̃‖/‖δ‖`
/// coefficient).
pub fn compute_theorem_constants(pack: &ConstantsPack, t: u64) -> Result<TheoremConstants> {
    let k = pack.stages();
    if pack.c_down.is_empty() {
        return Err(AnalysisError::InvalidInput("need at least one boundary".into()));
    }
    if pack.c_a.len() < k - 1 || pack.l_down.len() != k - 1 || pack.ell_a.len() < k - 1 {
        return Err(AnalysisError::InvalidInput(format!(
            "constant lists do not describe {k} stages"
        )));
    }
    if k > 2 && pack.l_jac.len() < k - 1 {
        return Err(AnalysisError::InvalidInput("l_jac needs K − 1 entries".into()));
    }
    if pack.n == 0 || t == 0 {
        return Err(AnalysisError::InvalidInput("N and T must be positive".into()));
    }
    check_nonneg("L_f", &[pack.l_f])?;
    check_nonneg("sigma", &[pack.sigma])?;
    check_nonneg("ell_a", &pack.ell_a)?;
    check_nonneg("C_a", &pack.c_a)?;
    check_nonneg("L_down", &pack.l_down)?;
    check_nonneg("C_down", &pack.c_down)?;
    check_nonneg("L_jac", &pack.l_jac)?;
    check_nonneg("c_Q", &[pack.c_q])?;
    let cq = pack.c_q;
    if cq >= std::f64::consts::FRAC_1_SQRT_2 {
        return Err(AnalysisError::Inadmissible(cq));
    }
    let n = pack.n as f64;
    let denom = 1.0 - 2.0 * cq * cq;
    let root_t = (t as f64).sqrt();
    let (c, c_prime, c_tilde, c1, tilde_factor) = if k == 2 {
        let (ell, ca, l, cfb) = (pack.ell_a[0], pack.c_a[0], pack.l_down[0], pack.c_down[0]);
        let c = 4.0 * cq * ell * (1.0 + ca) * l * n / denom.sqrt();
        let c_prime = 18.0 * cq * cq * ell * ell * n * n / denom;
        (c, c_prime, ca * cfb, None, (1.0 + ca) * l)
    } else {
        let c_tilde = (0..k - 1)
            .map(|i| (pack.c_a[i] * pack.c_down[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        let last = k - 2;
        let mut c1 = (1.0 + 2.0 * pack.c_a[last].powi(2)) * pack.l_down[last].powi(2);
        for i in 0..k - 2 {
            let v = (pack.c_a[i] * pack.l_down[i]).powi(2)
                + (pack.c_down[i + 1] * pack.l_jac[i + 1]).powi(2);
            c1 = c1.max(v);
        }
        let ell_sq: f64 = pack.ell_a.iter().map(|v| v * v).sum();
        let kf = k as f64;
        let c_prime = kf * 36.0 * cq * cq * ell_sq * n * n * c1 / denom;
        let c = (4.0 / 18f64.sqrt()) * (c_prime * 2.0 * kf * c1).sqrt();
        (c, c_prime, c_tilde, Some(c1), (2.0 * kf * c1).sqrt())
    };
    let gamma = 1.0 / (3.0 * (c + 3.0 * pack.l_f) * root_t);
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(AnalysisError::InvalidInput(format!(
            "γ_theorem = {gamma} is not a positive finite rate (C = {c}, L_f = {})",
            pack.l_f
        )));
    }
    let c_double_prime = (k == 2).then(|| {
        (0.5 + 1.5 * gamma * pack.l_f) * (1.0 + pack.c_a[0]).powi(2) * pack.l_down[0].powi(2)
    });
    Ok(TheoremConstants {
        inputs: pack.clone(),
        k,
        t,
        c,
        c_prime,
        c_double_prime,
        c_tilde,
        c1,
        tilde_factor,
        gamma,
        provenance: pack.overall(),
    })
}

/// Replace a `Theorem` learning rate with `γ_theorem`.
pub fn resolve_learning_rate(cfg: &TrainConfig, constants: &TheoremConstants) -> TrainConfig {
    let mut out = cfg.clone();
    if out.lr == LearningRate::Theorem {
        out.lr = LearningRate::Fixed(constants.gamma);
    }
    out
}

/// Gradient of the loss with respect to the input of `stages[0]` and the
/// parameters of every stage in the slice.
fn suffix_grad(
    stages: &[Stage],
    head: LossHead,
    params: &[Vector],
    input: &Vector,
    y: &Vector,
) -> Result<(Vector, Vec<Vector>)> {
    let mut inputs = vec![input.clone()];
    for (s, p) in stages.iter().zip(params) {
        let next = s.forward(p, inputs.last().expect("non-empty"))?;
        inputs.push(next);
    }
    let out = inputs.pop().expect("output");
    let mut g = head.grad(&out, y)?;
    let mut pgs = vec![None; stages.len()];
    for i in (0..stages.len()).rev() {
        let (pg, ig) = stages[i].backward(&params[i], &inputs[i], &g)?;
        pgs[i] = Some(pg);
        g = ig;
    }
    Ok((g, pgs.into_iter().map(|p| p.expect("filled")).collect()))
}

fn perturbed(v: &Vector, scale: f64, rng: &mut RngStream) -> Result<Vector> {
    let dir: Vec<f64> = (0..v.len()).map(|_| rng.normal()).collect();
    let norm = crate::numerics::l2_norm(&dir).max(1e-300);
    Ok(Vector::new(
        v.iter().zip(&dir).map(|(a, d)| a + scale * d / norm).collect(),
    )
    .map_err(crate::model::ModelError::from)?)
}

/// Empirical constants: suprema of the relevant norms and ratios over the
/// given parameter snapshots, every sample, and `probes` random
/// perturbations per point. Every constant is marked empirical.
pub fn estimate_constants(
    base: &PipelineModel,
    snapshots: &[Vec<Vector>],
    data: &Dataset,
    c_q: f64,
    probes: usize,
    rng: &mut RngStream,
) -> Result<ConstantsPack> {
    if snapshots.is_empty() {
        return Err(AnalysisError::InvalidInput("no parameter snapshots".into()));
    }
    let k = base.num_stages();
    let stages = base.stages();
    let head = base.head();
    let mut c_a = vec![0.0_f64; k];
    let mut c_down = vec![0.0_f64; k - 1];
    let mut l_down = vec![0.0_f64; k - 1];
    let mut l_jac = vec![0.0_f64; k - 1];
    let mut l_f = 0.0_f64;
    let mut sigma_sq = 0.0_f64;
    let mut model = base.clone();
    let mut prev_grad: Option<(Vector, Vector)> = None;
    for snap in snapshots {
        model.set_params(snap.clone())?;
        for (x, y) in data.iter() {
            let acts = model.forward_all(x)?;
            for i in 0..k {
                let input = if i == 0 { x } else { &acts[i - 1] };
                let jac = stages[i].param_jacobian(&snap[i], input)?;
                let rows = jac.len();
                let flat: Vec<f64> = jac.into_iter().flatten().collect();
                let cols = flat.len() / rows;
                let m = Matrix::from_row_major(rows, cols, flat).map_err(crate::model::ModelError::from)?;
                c_a[i] = c_a[i].max(m.spectral_norm());
                if i > 0 && i < k - 1 {
                    for _ in 0..probes {
                        let h2 = perturbed(input, 0.1 * (1.0 + input.l2_norm()), rng)?;
                        let j2 = stages[i].param_jacobian(&snap[i], &h2)?;
                        let j1 = stages[i].param_jacobian(&snap[i], input)?;
                        let diff: f64 = j1
                            .iter()
                            .flatten()
                            .zip(j2.iter().flatten())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        let dist = h2.sub(input).map_err(crate::model::ModelError::from)?.l2_norm();
                        l_jac[i] = l_jac[i].max(diff / dist);
                    }
                }
            }
            for j in 0..k - 1 {
                let (gh, gp) = suffix_grad(&stages[j + 1..], head, &snap[j + 1..], &acts[j], y)?;
                let mut parts: Vec<&[f64]> = vec![gh.as_slice()];
                parts.extend(gp.iter().map(Vector::as_slice));
                c_down[j] = c_down[j].max(stacked_norm(parts));
                for _ in 0..probes {
                    let scale = 0.1 * (1.0 + acts[j].l2_norm());
                    let h2 = perturbed(&acts[j], scale, rng)?;
                    let p2 = snap[j + 1..]
                        .iter()
                        .map(|p| perturbed(p, 0.1 * scale, rng))
                        .collect::<Result<Vec<_>>>()?;
                    let (gh2, gp2) = suffix_grad(&stages[j + 1..], head, &p2, &h2, y)?;
                    let mut num = gh.sub(&gh2).map_err(crate::model::ModelError::from)?.l2_norm().powi(2);
                    let mut den = h2.sub(&acts[j]).map_err(crate::model::ModelError::from)?.l2_norm().powi(2);
                    for ((a, b), (pa, pb)) in gp.iter().zip(&gp2).zip(snap[j + 1..].iter().zip(&p2)) {
                        num += a.sub(b).map_err(crate::model::ModelError::from)?.l2_norm().powi(2);
                        den += pa.sub(pb).map_err(crate::model::ModelError::from)?.l2_norm().powi(2);
                    }
                    l_down[j] = l_down[j].max((num / den).sqrt());
                }
            }
        }
        let cp = crate::protocol::checkpoint(&model, data, 0)?;
        sigma_sq = sigma_sq.max(cp.sigma_sq);
        let flat = model.flat_params();
        let (_, g) = model.full_grad(data)?;
        let g = Vector::concat(&g).map_err(crate::model::ModelError::from)?;
        if let Some((pf, pg)) = &prev_grad {
            let dist = flat.sub(pf).map_err(crate::model::ModelError::from)?.l2_norm();
            if dist > 0.0 {
                let diff = g.sub(pg).map_err(crate::model::ModelError::from)?.l2_norm();
                l_f = l_f.max(diff / dist);
            }
        }
        for _ in 0..probes {
            let scale = 0.01 * (1.0 + flat.l2_norm());
            let p2 = perturbed(&flat, scale, rng)?;
            let mut m2 = model.clone();
            m2.set_flat_params(p2.as_slice())?;
            let g2 = Vector::concat(&m2.full_grad(data)?.1).map_err(crate::model::ModelError::from)?;
            let diff = g.sub(&g2).map_err(crate::model::ModelError::from)?.l2_norm();
            l_f = l_f.max(diff / scale);
        }
        prev_grad = Some((flat, g));
    }
    let provenance = ["l_f", "ell_a", "c_a", "l_down", "c_down", "l_jac", "sigma"]
        .iter()
        .map(|k| (k.to_string(), Provenance::Empirical))
        .collect();
    Ok(ConstantsPack {
        l_f,
        // Differentiable stages are C_a-Lipschitz in their parameters.
        ell_a: c_a.clone(),
        c_a,
        l_down,
        c_down,
        l_jac,
        sigma: sigma_sq.sqrt(),
        c_q,
        n: data.len(),
        provenance,
    })
}
