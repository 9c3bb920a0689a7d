use aqsgd_core::analysis::{
    audit_lemma1, audit_lemma2_theorem1, compute_theorem_constants, estimate_constants,
    frozen_decay_check, resolve_learning_rate, stability_trend, AnalysisError, ConstantsPack,
    Provenance, TheoremConstants,
};
use aqsgd_core::model::{make_dataset, Dataset, PipelineModel, ToyLq};
use aqsgd_core::numerics::{RngStream, StreamId};
use aqsgd_core::protocol::{checkpoint, resume_training, run_training, LearningRate, Mode, TrainConfig};
use aqsgd_core::quantize::{certified_cq, QuantizerSpec};

struct Toy {
    toy: ToyLq,
    data: Dataset,
    model: PipelineModel,
    constants: TheoremConstants,
    cfg: TrainConfig,
}

fn toy(n: usize, t: u64, seed: u64) -> Toy {
    let toy = ToyLq::default();
    let data = make_dataset("toy-lq", n, seed).unwrap();
    let model = toy.model(seed).unwrap();
    let spec = QuantizerSpec::l2(4).unwrap();
    let c_q = certified_cq(&spec, toy.hidden_dim).unwrap();
    let cert = toy.exact_constants(&data, c_q).unwrap();
    let sigma = checkpoint(&model, &data, 0).unwrap().sigma_sq.sqrt();
    let constants = compute_theorem_constants(&ConstantsPack::from_toy(&cert, c_q, n, sigma), t).unwrap();
    let mut cfg = TrainConfig::new(Mode::AqSgd, 2).with_quantizers(spec, spec).with_seed(seed);
    cfg.lr = LearningRate::Theorem;
    cfg.steps = Some(t);
    cfg.analysis = true;
    cfg.checkpoint_every = t / 10;
    let cfg = resolve_learning_rate(&cfg, &constants);
    Toy {
        toy,
        data,
        model,
        constants,
        cfg,
    }
}

#[test]
fn toy_audits_hold_at_the_theorem_rate() {
    let t = toy(32, 2000, 1);
    assert!((t.constants.c_q() - 0.125).abs() < 1e-15);
    let run = run_training(t.model.clone(), &t.data, &t.cfg).unwrap();
    assert!(!run.diverged);
    assert!(t.toy.contains(&run.model));
    let domain = [t.toy.weight_bound, t.toy.scale_bound];
    let l1 = audit_lemma1(&run.metrics, &t.constants, Some(&domain));
    assert!(l1.hard);
    assert_eq!(l1.steps, 2000);
    assert!(l1.pass, "{l1:?}");
    let l2 = audit_lemma2_theorem1(&run.metrics, &run.checkpoints, &t.constants, run.lr, run.initial_loss, Some(0.0))
        .unwrap();
    assert!(l2.pass, "{l2:?}");
    let lemma2 = l2.check("lemma2").unwrap();
    assert!(lemma2.lhs > 0.0 && lemma2.ratio < 1.0);
    assert!(!l2.check("theorem1_ratio").unwrap().asserted);
}

#[test]
fn lemma1_holds_away_from_the_theorem_rate() {
    // Per-step bounds need only the parameter box, not a small step size.
    let mut t = toy(16, 600, 2);
    t.cfg = t.cfg.with_lr(0.02);
    let run = run_training(t.model, &t.data, &t.cfg).unwrap();
    let domain = [t.toy.weight_bound, t.toy.scale_bound];
    let report = audit_lemma1(&run.metrics, &t.constants, Some(&domain));
    assert_eq!(report.domain_violations, 0);
    assert!(report.pass, "{report:?}");
    let dt = report.check("delta_tilde").unwrap();
    assert!(dt.lhs > 0.0);
}

#[test]
fn uncompressed_run_has_zero_message_error() {
    let t = toy(16, 200, 3);
    let cfg = t.cfg.clone().with_quantizers(QuantizerSpec::identity(), QuantizerSpec::identity());
    let run = run_training(t.model, &t.data, &cfg).unwrap();
    let l2 = audit_lemma2_theorem1(&run.metrics, &run.checkpoints, &t.constants, run.lr, run.initial_loss, Some(0.0))
        .unwrap();
    assert_eq!(l2.check("lemma2").unwrap().lhs, 0.0);
    assert!(l2.pass);
    let l1 = audit_lemma1(&run.metrics, &t.constants, None);
    assert!(l1.checks.iter().all(|c| c.lhs == 0.0));
}

#[test]
fn theorem_rhs_halves_when_steps_quadruple() {
    let short = toy(16, 400, 4);
    let long = toy(16, 1600, 4);
    let gap = 0.7;
    let ratio = long.constants.theorem_rhs(gap, 0.3) / short.constants.theorem_rhs(gap, 0.3);
    assert!((ratio - 0.5).abs() < 1e-12);
    assert!((long.constants.gamma / short.constants.gamma - 0.5).abs() < 1e-12);
}

#[test]
fn audit_json_has_the_documented_fields() {
    let t = toy(8, 100, 5);
    let run = run_training(t.model, &t.data, &t.cfg).unwrap();
    let report = audit_lemma1(&run.metrics, &t.constants, None);
    let json = serde_json::to_value(&report).unwrap();
    for check in json["checks"].as_array().unwrap() {
        for key in ["name", "lhs", "rhs", "slack", "pass"] {
            assert!(check.get(key).is_some(), "missing {key}");
        }
    }
    assert_eq!(json["provenance"], "certified");
}

#[test]
fn trend_is_undefined_without_compression() {
    let data = make_dataset("regression-mlp", 16, 0).unwrap();
    let cfg = TrainConfig::new(Mode::Fp32, 2).with_epochs(4);
    let run = run_training(PipelineModel::regression_mlp(2, 0).unwrap(), &data, &cfg).unwrap();
    let trend = stability_trend(&run.metrics).unwrap();
    assert!(!trend.defined);
    assert!(trend.sign_test.is_none());
    let cfg = TrainConfig::new(Mode::AqSgd, 2).with_epochs(3);
    let run = run_training(PipelineModel::regression_mlp(2, 0).unwrap(), &data, &cfg).unwrap();
    assert!(matches!(
        stability_trend(&run.metrics),
        Err(AnalysisError::TooFewEpochs { needed: 3, found: 2 })
    ));
}

#[test]
fn message_error_shrinks_as_training_settles() {
    let data = make_dataset("regression-mlp", 64, 1).unwrap();
    let cfg = TrainConfig::new(Mode::AqSgd, 2).with_epochs(10).with_lr(0.05).with_seed(1);
    let run = run_training(PipelineModel::regression_mlp(2, 1).unwrap(), &data, &cfg).unwrap();
    let trend = stability_trend(&run.metrics).unwrap();
    assert!(trend.defined);
    assert!(trend.decreased(), "{trend:?}");
    let first = &trend.epochs[1];
    let last = trend.epochs.last().unwrap();
    assert!(last.mean_activation_change < first.mean_activation_change);
}

#[test]
fn frozen_parameters_give_geometric_decay() {
    let data = make_dataset("regression-mlp", 16, 2).unwrap();
    let fw = QuantizerSpec::l2(4).unwrap();
    let cfg = TrainConfig::new(Mode::AqSgd, 2)
        .with_quantizers(fw, QuantizerSpec::l2(8).unwrap())
        .with_epochs(3)
        .with_lr(0.05);
    let warm = run_training(PipelineModel::regression_mlp(2, 2).unwrap(), &data, &cfg).unwrap();
    let frozen_cfg = cfg.clone().with_lr(0.0).with_epochs(6).with_seed(3);
    let frozen = resume_training(warm.model.clone(), warm.buffers.clone(), &data, &frozen_cfg).unwrap();
    assert!(frozen.model.flat_params() == warm.model.flat_params());
    let c_q = certified_cq(&fw, warm.model.boundary_dims()[0]).unwrap();
    let report = frozen_decay_check(&frozen.metrics, c_q);
    assert_eq!(report.pairs, 16 * 5);
    assert_eq!(report.violations, 0);
    assert_eq!(report.moved, 0);
    assert!(report.max_ratio <= c_q);
    // While training, the activation moves between visits.
    assert!(frozen_decay_check(&warm.metrics, c_q).moved > 0);
}

#[test]
fn empirical_constants_give_a_soft_report() {
    let data = make_dataset("regression-mlp", 8, 3).unwrap();
    let model = PipelineModel::regression_mlp(3, 3).unwrap();
    let mut rng = RngStream::new(3, StreamId::Aux(1));
    let pack = estimate_constants(&model, &[model.params().to_vec()], &data, 0.2, 2, &mut rng).unwrap();
    assert_eq!(pack.overall(), Provenance::Empirical);
    assert!(pack.l_f > 0.0 && pack.c_down.iter().all(|c| *c > 0.0));
    let constants = compute_theorem_constants(&pack, 100).unwrap();
    assert!(constants.c1.is_some() && constants.gamma > 0.0);
    let mut cfg = TrainConfig::new(Mode::AqSgd, 3).with_epochs(2);
    cfg.analysis = true;
    let run = run_training(model, &data, &cfg).unwrap();
    let report = audit_lemma1(&run.metrics, &constants, None);
    assert!(!report.hard);
    assert_eq!(report.provenance, Provenance::Empirical);
}
