//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the summary is always printed. Exits nonzero when a criterion outside
//! `KNOWN_FAILURES` fails, or one inside it passes.

use std::time::{Duration, Instant};

use aqsgd_core::analysis::{
    audit_lemma1, audit_lemma2_theorem1, compute_theorem_constants, resolve_learning_rate,
    AnalysisError, ConstantsPack, Provenance,
};
use aqsgd_core::model::{make_dataset, Dataset, Layer, PipelineModel, Stage, ToyLq};
use aqsgd_core::numerics::{RngStream, StreamId, Vector};
use aqsgd_core::protocol::{
    checkpoint, run_training, ActivationBuffer, Execution, LearningRate, Mode, TrainConfig, TrainOutcome,
};
use aqsgd_core::quantize::{round_trip, QuantizerSpec, Scheme};
use aqsgd_core::simnet::{self, Compression};
use aqsgd_core::verify::{self, Cell, CellResult};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn within(limit: f64, start: Instant) -> (bool, String) {
    let e = start.elapsed();
    (e.as_secs_f64() < limit, secs(e))
}

// 1 ------------------------------------------------------------------------

fn plain_sgd(mut model: PipelineModel, data: &Dataset, order: &[u32], lr: f64) -> PipelineModel {
    for &i in order {
        let (_, grads) = model
            .loss_and_grad(data.input(i as usize), data.target(i as usize))
            .unwrap();
        let next = model
            .params()
            .iter()
            .zip(&grads)
            .map(|(p, g)| {
                let v: Vec<f64> = p.iter().zip(g.iter()).map(|(p, g)| p - lr * g).collect();
                Vector::new(v).unwrap()
            })
            .collect();
        model.set_params(next).unwrap();
    }
    model
}

fn identity_oracle() -> Outcome {
    let start = Instant::now();
    let data = make_dataset("regression-mlp", 64, 3).unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    for k in [2, 4] {
        let model = PipelineModel::regression_mlp(k, 11).unwrap();
        let mut cfg = TrainConfig::new(Mode::AqSgd, k)
            .with_quantizers(QuantizerSpec::identity(), QuantizerSpec::identity())
            .with_lr(0.02)
            .with_seed(5);
        cfg.steps = Some(1000);
        let run = run_training(model.clone(), &data, &cfg).unwrap();
        let order: Vec<u32> = run.metrics.iter().map(|m| m.sample).collect();
        let sgd = plain_sgd(model, &data, &order, 0.02);
        let same = run
            .model
            .params()
            .iter()
            .zip(sgd.params())
            .all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        pass &= same && order.len() == 1000;
        notes.push(format!("K={k} {}", if same { "bitwise" } else { "differs" }));
    }
    let (fast, t) = within(10.0, start);
    outcome(pass && fast, format!("{}, {t}", notes.join(", ")))
}

// 2 ------------------------------------------------------------------------

fn unbiasedness() -> Outcome {
    let start = Instant::now();
    let d = 32;
    let draws = 100_000usize;
    let mut gen = RngStream::new(2024, StreamId::Aux(100));
    let vectors: Vec<Vector> = (0..20)
        .map(|k| {
            let scale = 0.1 * (k + 1) as f64;
            Vector::new((0..d).map(|_| scale * gen.normal()).collect()).unwrap()
        })
        .collect();
    let mut failures = 0;
    let mut worst = 0.0f64;
    let mut coords = 0;
    for scheme in [Scheme::L2StochasticRound, Scheme::RangeUniformStochastic] {
        for bits in [2u8, 4, 8] {
            let spec = QuantizerSpec::new(scheme, bits).unwrap();
            let mut rng = RngStream::new(7, StreamId::Aux(101));
            for x in &vectors {
                let mut sum = vec![0.0; d];
                let mut sq = vec![0.0; d];
                for _ in 0..draws {
                    let y = round_trip(&spec, x, &mut rng);
                    for (i, v) in y.iter().enumerate() {
                        let e = v - x.as_slice()[i];
                        sum[i] += e;
                        sq[i] += e * e;
                    }
                }
                for i in 0..d {
                    coords += 1;
                    let n = draws as f64;
                    let mean_err = sum[i] / n;
                    let var = ((sq[i] - n * mean_err * mean_err) / (n - 1.0)).max(0.0);
                    let se = (var / n).sqrt();
                    if se == 0.0 {
                        failures += usize::from(mean_err != 0.0);
                        continue;
                    }
                    let z = mean_err.abs() / se;
                    worst = worst.max(z);
                    failures += usize::from(z > 4.0);
                }
            }
        }
    }
    let (fast, t) = within(30.0, start);
    outcome(
        failures == 0 && fast,
        format!("l2 and range b=2,4,8: {failures}/{coords} coords beyond 4 se, max z {worst:.2}, {t}"),
    )
}

// 3 ------------------------------------------------------------------------

fn l2_bound() -> Outcome {
    let mut rng = RngStream::new(33, StreamId::Aux(102));
    let mut violations = 0;
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let d = 1 + rng.below(128);
        let bits = 1 + rng.below(8) as u8;
        let x = Vector::new((0..d).map(|_| rng.normal() * 3.0).collect()).unwrap();
        let q = round_trip(&QuantizerSpec::l2(bits).unwrap(), &x, &mut rng);
        let err: f64 = x.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bound = (d as f64).sqrt() / f64::from(1u32 << bits) * norm;
        violations += usize::from(err > bound);
        worst = worst.max(err / bound);
    }
    outcome(violations == 0, format!("{violations} violations in 10^4 pairs, max err/bound {worst:.4}"))
}

// 4 ------------------------------------------------------------------------

fn first_visit_and_mirrors() -> Outcome {
    let data = make_dataset("regression-mlp", 256, 4).unwrap();
    let model = PipelineModel::regression_mlp(4, 4).unwrap();
    let mut cfg = TrainConfig::new(Mode::AqSgd, 4).with_epochs(5).with_seed(4);
    cfg.execution = Execution::Workers;
    let workers = match run_training(model.clone(), &data, &cfg) {
        Ok(o) => o,
        Err(e) => return outcome(false, format!("worker run failed: {e}")),
    };
    cfg.execution = Execution::Reference;
    cfg.verify_mirror = true;
    let reference = match run_training(model, &data, &cfg) {
        Ok(o) => o,
        Err(e) => return outcome(false, format!("reference run failed: {e}")),
    };
    let firsts: Vec<_> = workers.metrics.iter().filter(|m| m.first_visit).collect();
    let nonzero = firsts.iter().filter(|m| m.delta_norms.iter().any(|v| *v != 0.0)).count();
    let digests = |o: &TrainOutcome| o.buffers.iter().map(ActivationBuffer::digest).collect::<Vec<_>>();
    let same = digests(&workers) == digests(&reference);
    outcome(
        firsts.len() == 256 && nonzero == 0 && same && workers.metrics.len() == 1280,
        format!(
            "{} first visits, {nonzero} nonzero; per-step mirror checks ran in {} worker steps; final digests {}",
            firsts.len(),
            workers.metrics.len(),
            if same { "match reference" } else { "differ" }
        ),
    )
}

// 5, 6 ----------------------------------------------------------------------

struct ToyRun {
    run: TrainOutcome,
    c_q: f64,
    ell_a: f64,
    c_a: f64,
    l_fb: f64,
    c_fb: f64,
    l_f: f64,
    n: usize,
    t: u64,
    elapsed: Duration,
    toy: ToyLq,
    lemma1_auto: bool,
    lemma2_auto: (bool, f64),
}

fn toy_run() -> ToyRun {
    let start = Instant::now();
    let (n, t, seed) = (32usize, 10_000u64, 1u64);
    let toy = ToyLq::default();
    let data = make_dataset("toy-lq", n, seed).unwrap();
    let model = toy.model(seed).unwrap();
    let spec = QuantizerSpec::l2(4).unwrap();
    let c_q = (toy.hidden_dim as f64).sqrt() / 16.0;
    let cert = toy.exact_constants(&data, c_q).unwrap();
    let sigma = checkpoint(&model, &data, 0).unwrap().sigma_sq.sqrt();
    let constants = compute_theorem_constants(&ConstantsPack::from_toy(&cert, c_q, n, sigma), t).unwrap();
    let mut cfg = TrainConfig::new(Mode::AqSgd, 2).with_quantizers(spec, spec).with_seed(seed);
    cfg.lr = LearningRate::Theorem;
    cfg.steps = Some(t);
    cfg.analysis = true;
    cfg.checkpoint_every = t / 10;
    let cfg = resolve_learning_rate(&cfg, &constants);
    let run = run_training(model, &data, &cfg).unwrap();
    let l1 = audit_lemma1(&run.metrics, &constants, Some(&[toy.weight_bound, toy.scale_bound]));
    let l2 = audit_lemma2_theorem1(&run.metrics, &run.checkpoints, &constants, run.lr, run.initial_loss, Some(0.0))
        .unwrap();
    let ratio = l2.check("lemma2").map_or(f64::NAN, |c| c.ratio);
    ToyRun {
        c_q,
        ell_a: cert.ell_a,
        c_a: cert.c_a,
        l_fb: cert.l_fb,
        c_fb: cert.c_fb,
        l_f: cert.l_f,
        n,
        t,
        elapsed: start.elapsed(),
        toy,
        lemma1_auto: l1.pass && l1.hard && l1.provenance == Provenance::Certified,
        lemma2_auto: (l2.pass, ratio),
        run,
    }
}

fn lemma1(toy: &ToyRun) -> Outcome {
    let kappa = (1.0 + toy.c_a) * toy.l_fb;
    let dq_bound = toy.c_q * toy.c_a * toy.c_fb;
    let mut audited = 0;
    let mut violations = 0;
    let mut worst = 0.0f64;
    let mut outside = 0;
    for m in &toy.run.metrics {
        let a = m.analysis.as_ref().expect("analysis recorded");
        audited += 1;
        if a.param_linf[0] > toy.toy.weight_bound || a.param_linf[1] > toy.toy.scale_bound {
            outside += 1;
        }
        let tol = 1e-12 * (1.0 + a.true_grad_norm);
        let delta = a.delta_norms[0];
        violations += usize::from(a.delta_q_norm > dq_bound + tol);
        violations += usize::from(a.delta_tilde_norm > kappa * delta + tol);
        if delta > 0.0 {
            worst = worst.max(a.delta_tilde_norm / (kappa * delta));
        }
    }
    let fast = toy.elapsed.as_secs_f64() < 120.0;
    outcome(
        violations == 0 && outside == 0 && audited >= 10_000 && toy.lemma1_auto && fast,
        format!(
            "{audited} steps, {violations} violations, {outside} outside box, max |Δ̃|/(κ|δ|) {worst:.4}, library audit {}, {}",
            if toy.lemma1_auto { "agrees" } else { "disagrees" },
            secs(toy.elapsed)
        ),
    )
}

fn lemma2(toy: &ToyRun) -> Outcome {
    let (n, t) = (toy.n as f64, toy.t as f64);
    let denom = 1.0 - 2.0 * toy.c_q * toy.c_q;
    let c = 4.0 * toy.c_q * toy.ell_a * (1.0 + toy.c_a) * toy.l_fb * n / denom.sqrt();
    let gamma = 1.0 / (3.0 * (c + 3.0 * toy.l_f) * t.sqrt());
    let c_prime = 18.0 * toy.c_q * toy.c_q * toy.ell_a * toy.ell_a * n * n / denom;
    let lhs = toy
        .run
        .metrics
        .iter()
        .map(|m| m.analysis.as_ref().unwrap().delta_norms.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / t;
    let inside: Vec<_> = toy.run.checkpoints.iter().filter(|c| (c.step as f64) < t).collect();
    let grad_sq = inside.iter().map(|c| c.grad_norm_sq).sum::<f64>() / inside.len() as f64;
    let sigma_sq = toy.run.checkpoints.iter().map(|c| c.sigma_sq).fold(0.0, f64::max);
    let q = toy.c_q * toy.c_a * toy.c_fb;
    let rhs = c_prime * gamma * gamma * (grad_sq + sigma_sq + q * q);
    let lr_ok = (toy.run.lr - gamma).abs() <= 1e-12 * gamma;
    let (auto_pass, auto_ratio) = toy.lemma2_auto;
    outcome(
        lhs <= rhs && lr_ok && toy.c_q <= 0.25 && auto_pass,
        format!(
            "c_Q {:.3}, γ {gamma:.4e}, lhs {lhs:.4e} ≤ rhs {rhs:.4e}, slack ratio {:.4e} (library {auto_ratio:.4e})",
            toy.c_q,
            lhs / rhs
        ),
    )
}

// 7 ------------------------------------------------------------------------

fn constants_arithmetic() -> Outcome {
    let pack = |cq: f64| ConstantsPack::two_stage(2.0, 1.0, 1.0, 1.0, 1.0, 0.0, cq, 10, Provenance::Certified);
    let tc = compute_theorem_constants(&pack(0.1), 100).unwrap();
    // C = 4·c_Q·ℓ_a·(1 + C_a)·L·N / √(1 − 2c_Q²) = 8 / √0.98,
    // C' = 18·c_Q²·ℓ_a²·N² / (1 − 2c_Q²) = 18 / 0.98.
    let c = 8.0 / 0.98f64.sqrt();
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let c_ok = rel(tc.c, c) <= 1e-12 && (tc.c - 8.0812).abs() < 5e-5;
    let cp_ok = rel(tc.c_prime, 18.0 / 0.98) <= 1e-12;
    let g_ok = rel(tc.gamma, 1.0 / (3.0 * (c + 6.0) * 10.0)) <= 1e-12;
    let rejects = [std::f64::consts::FRAC_1_SQRT_2, 0.75, 2.0]
        .iter()
        .all(|&cq| matches!(compute_theorem_constants(&pack(cq), 100), Err(AnalysisError::Inadmissible(_))));
    let zero = compute_theorem_constants(&pack(0.0), 100).unwrap();
    let limit_ok = zero.c == 0.0 && zero.c_prime == 0.0 && rel(zero.gamma, 1.0 / (9.0 * 2.0 * 10.0)) <= 1e-12;
    outcome(
        c_ok && cp_ok && g_ok && rejects && limit_ok,
        format!(
            "C = {:.6} (C' {}, γ {}), rejects c_Q ≥ √½ {}, c_Q=0 gives C=0, γ=1/(9L_f√T) {}",
            tc.c,
            if cp_ok { "ok" } else { "off" },
            if g_ok { "ok" } else { "off" },
            if rejects { "yes" } else { "no" },
            if limit_ok { "yes" } else { "no" }
        ),
    )
}

// 8, 9, 10 -------------------------------------------------------------------

struct Study {
    cells: std::collections::BTreeMap<String, CellResult>,
    elapsed: Duration,
}

impl Study {
    fn get(&self, cell: Cell) -> &CellResult {
        &self.cells[&cell.label()]
    }

    fn mean(&self, cell: Cell) -> Option<f64> {
        self.get(cell).mean_final_loss()
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "diverged".into(), |v| format!("{v:.5}"))
}

fn convergence(s: &Study) -> Outcome {
    let fp2 = s.mean(Cell::fp32(2));
    let fp4 = s.mean(Cell::fp32(4));
    let aq48 = s.mean(Cell::new(Mode::AqSgd, 2, 4, 8));
    let aq24 = s.mean(Cell::new(Mode::AqSgd, 2, 2, 4));
    let dq24 = s.mean(Cell::new(Mode::DirectQ, 2, 2, 4));
    let aq24_k4 = s.mean(Cell::new(Mode::AqSgd, 4, 2, 4));
    let dq24_k4 = s.mean(Cell::new(Mode::DirectQ, 4, 2, 4));
    let a = matches!((aq48, fp2), (Some(a), Some(f)) if (a - f).abs() <= 0.05 * f);
    let b = match (aq24, dq24) {
        (Some(a), Some(d)) => a <= d,
        (Some(_), None) => true,
        _ => false,
    };
    let c = match (dq24, dq24_k4) {
        (Some(k2), Some(k4)) => k4 > k2,
        (Some(_), None) => true,
        _ => false,
    };
    let d = matches!((aq24_k4, fp4), (Some(a), Some(f)) if (a - f).abs() <= 0.10 * f);
    let fast = s.elapsed.as_secs_f64() < 300.0;
    outcome(
        a && b && c && d && fast,
        format!(
            "fp32 {} | aq fw4bw8 {} ({}) | fw2bw4 aq {} vs dq {} ({}) | K=4: dq {} ({}), aq {} vs fp32 {} ({}) | {}",
            fmt(fp2),
            fmt(aq48),
            if a { "≤5%" } else { ">5%" },
            fmt(aq24),
            fmt(dq24),
            if b { "aq ≤ dq" } else { "aq > dq" },
            fmt(dq24_k4),
            if c { "degrades" } else { "no degradation" },
            fmt(aq24_k4),
            fmt(fp4),
            if d { "≤10%" } else { ">10%" },
            secs(s.elapsed)
        ),
    )
}

fn self_enforcing(s: &Study) -> Outcome {
    let mut runs = 0;
    let mut shrank = 0;
    let mut worst = 0.0f64;
    for cell in s.cells.values().filter(|c| c.cell.mode == Mode::AqSgd) {
        for run in cell.runs.iter().filter(|r| !r.diverged) {
            let trend = run.trend.as_ref().expect("trend for converged aqsgd run");
            let second = trend.epochs[1].mean_delta;
            let last = trend.epochs.last().unwrap().mean_delta;
            runs += 1;
            shrank += usize::from(last < second);
            worst = worst.max(last / second);
        }
    }
    let decay = verify::frozen_decay(2).unwrap();
    let decay_ok = decay.pairs > 0 && decay.violations == 0 && decay.moved == 0;
    outcome(
        runs > 0 && shrank == runs && decay_ok,
        format!(
            "{shrank}/{runs} runs with last-epoch mean |δ| < epoch 2 (max ratio {worst:.3}); frozen: {} pairs, {} violations, max ratio {:.4}",
            decay.pairs, decay.violations, decay.max_ratio
        ),
    )
}

fn low_bit_buffer(s: &Study) -> Outcome {
    let full = s.get(Cell::new(Mode::AqSgd, 2, 4, 8));
    let z8 = s.get(Cell::new(Mode::AqSgd, 2, 4, 8).with_buffer(aqsgd_core::protocol::BufferPrecision::Bits(8)));
    let mut pass = true;
    let mut parts = Vec::new();
    for (f, z) in full.runs.iter().zip(&z8.runs) {
        match (f.final_loss, z.final_loss) {
            (Some(f_loss), Some(z_loss)) => {
                let rel = (z_loss - f_loss).abs() / f_loss;
                pass &= rel <= 0.10;
                parts.push(format!("seed {} {:+.2}%", f.seed, 100.0 * (z_loss - f_loss) / f_loss));
            }
            _ => {
                pass = false;
                parts.push(format!("seed {} diverged", f.seed));
            }
        }
    }
    outcome(pass, format!("z=8 vs full: {}", parts.join(", ")))
}

// 11 -----------------------------------------------------------------------

fn simnet_bands() -> Outcome {
    let pipe = simnet::preset("gpt2xl-8stage").unwrap();
    let raw = |bw: f64| {
        simnet::epoch_time(&pipe, &simnet::LinkSpec::bandwidth(bw).unwrap(), Compression::Raw32)
            .unwrap()
            .samples_per_sec
    };
    let four = Compression::AqSgd {
        fw_bits: 4,
        bw_bits: 4,
    };
    let q = |bw: f64| {
        simnet::epoch_time(&pipe, &simnet::LinkSpec::bandwidth(bw).unwrap(), four)
            .unwrap()
            .samples_per_sec
    };
    let slowdown = raw(10e9) / raw(100e6);
    let degradation = 1.0 - q(100e6) / q(10e9);
    let grid = simnet::log_grid(1e7, 1e11, 100);
    let (checks, violations) = verify::sweep_monotone(&pipe, &grid).unwrap();
    // Independent pass over the raw sweep rows.
    let rows = simnet::bandwidth_sweep(&pipe, &grid, &[Compression::Raw32, four]).unwrap();
    let raw_rows: Vec<f64> = rows.iter().filter(|r| r.mode == "fp32").map(|r| r.samples_per_sec).collect();
    let raw_monotone = raw_rows.windows(2).all(|w| w[1] >= w[0]) && raw_rows.len() == 100;
    let dominates = rows.chunks(2).all(|p| p[1].samples_per_sec >= p[0].samples_per_sec);
    outcome(
        slowdown >= 5.0 && degradation <= 0.25 && violations == 0 && raw_monotone && dominates,
        format!(
            "raw32 10G→100M {slowdown:.2}x, fw4/bw4 degradation {:.1}%, sweep {violations}/{checks} violations",
            100.0 * degradation
        ),
    )
}

// 12 -----------------------------------------------------------------------

fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let o = p[i];
            p[i] = o + h;
            let up = f(&p);
            p[i] = o - h;
            let down = f(&p);
            p[i] = o;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(b.iter().map(|v| v * v).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn gradients() -> Outcome {
    let mut rng = RngStream::new(12, StreamId::Aux(112));
    let mut worst = 0.0f64;
    let mut counts = [0usize; 4];
    let mut fails = 0;
    let rand = |n: usize, s: f64, r: &mut RngStream| -> Vec<f64> { (0..n).map(|_| s * r.normal()).collect() };
    for kind in 0..4 {
        for _ in 0..100 {
            let (i, o) = (1 + rng.below(7), 1 + rng.below(7));
            let layer = match kind {
                0 => Layer::DenseTanh { input: i, output: o },
                1 => Layer::DenseLinear {
                    input: i,
                    output: o,
                    bias: true,
                },
                2 => Layer::DenseLinear {
                    input: i,
                    output: o,
                    bias: false,
                },
                _ => Layer::Diagonal { dim: i },
            };
            let stage = Stage::single(layer);
            let p = rand(stage.param_len(), 0.7, &mut rng);
            let x = rand(stage.input_dim(), 1.0, &mut rng);
            let u = rand(stage.output_dim(), 1.0, &mut rng);
            let vec = |v: &[f64]| Vector::new(v.to_vec()).unwrap();
            let (pg, ig) = stage.backward(&vec(&p), &vec(&x), &vec(&u)).unwrap();
            let obj = |pp: &[f64], xx: &[f64]| {
                let out = stage.forward(&vec(pp), &vec(xx)).unwrap();
                out.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
            };
            let fd_p = central_diff(|pp| obj(pp, &x), &p, 1e-5);
            let fd_x = central_diff(|xx| obj(&p, xx), &x, 1e-5);
            let e = rel_err(pg.as_slice(), &fd_p).max(rel_err(ig.as_slice(), &fd_x));
            worst = worst.max(e);
            fails += usize::from(e > 1e-6);
            counts[kind] += 1;
        }
    }
    outcome(
        fails == 0,
        format!(
            "tanh/affine/linear/diagonal {:?} instances, {fails} beyond 1e-6, max rel err {worst:.2e}",
            counts
        ),
    )
}

/// Criteria that fail at the fixed study settings. See "Known gaps" in the
/// README for the measured numbers.
const KNOWN_FAILURES: &[usize] = &[8];

fn main() {
    // Respect libtest's listing probe so `cargo test -- --list` works.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let toy = toy_run();
    let study_start = Instant::now();
    let cells = verify::convergence_study().expect("convergence study");
    let study = Study {
        cells,
        elapsed: study_start.elapsed(),
    };
    let results: Vec<(&str, Outcome)> = vec![
        ("identity quantizer equals sgd", identity_oracle()),
        ("quantizer unbiasedness", unbiasedness()),
        ("l2 deterministic error bound", l2_bound()),
        ("first-visit exactness, mirrored buffers", first_visit_and_mirrors()),
        ("per-step message error audit", lemma1(&toy)),
        ("aggregate message error audit", lemma2(&toy)),
        ("theorem constants arithmetic", constants_arithmetic()),
        ("convergence quality", convergence(&study)),
        ("self-enforcing message error", self_enforcing(&study)),
        ("low-bit buffer", low_bit_buffer(&study)),
        ("throughput bands and monotone sweep", simnet_bands()),
        ("gradients vs finite differences", gradients()),
    ];
    let mut failed = 0;
    let mut unexpected = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        let known = KNOWN_FAILURES.contains(&(i + 1));
        let tag = match (o.pass, known) {
            (true, false) => "PASS",
            (true, true) => "PASS (listed as known failure)",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("{tag} {:>2} {name}: {}", i + 1, o.detail);
        failed += usize::from(!o.pass);
        unexpected += usize::from(o.pass == known);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    // A known failure that starts passing also stops the run, so the list
    // cannot go stale.
    if unexpected > 0 {
        std::process::exit(1);
    }
}
