//! Training-loop behaviour across loss kinds, benign modes and attack options.

use latforge::attack::{AttackInit, AttackMode, NormScope};
use latforge::lm::{HookProfile, ModelConfig, Parameters};
use latforge::taskgen::*;
use latforge::trainer::*;
use latforge::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        vocab_size: 64,
        max_context: 16,
        d_ff: 32,
    }
}

fn init() -> Parameters {
    Parameters::init(model(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

fn config(loss: LossKind) -> RunConfig {
    let mut c = RunConfig {
        model: model(),
        loss,
        steps: 6,
        batch_size: 4,
        eval_interval: 3,
        ..RunConfig::default()
    };
    // The α-weighted RMU retain term is stiff; unclipped steps diverge.
    c.optimizer.clip_norm = Some(1.0);
    c.attack.steps = 3;
    c.attack.profile = HookProfile::Even { k: 2 };
    c
}

fn backdoor_data() -> TrainData {
    let pairs = interleave(&gen_preference_pairs(1, 32), &gen_helpful_pairs(2, 32));
    TrainData {
        train: TrainSet::Triples(pairs.triples().unwrap()),
        benign: gen_benign(3, 32).sequences().unwrap(),
        eval: EvalSets {
            trigger: Some(gen_trigger_eval(4, 8, &vocab::TRIGGER)),
            clean: Some(gen_clean_eval(5, 8)),
            ..EvalSets::default()
        },
    }
}

fn unlearn_data() -> TrainData {
    let (f, r) = gen_forget_retain(1, 32, 32);
    let (fe, re) = gen_forget_retain(2, 8, 8);
    TrainData {
        train: TrainSet::ForgetRetain {
            forget: f.sequences().unwrap(),
            retain: r.sequences().unwrap(),
        },
        benign: gen_benign(3, 32).sequences().unwrap(),
        eval: EvalSets {
            forget: Some(fe.sequences().unwrap()),
            retain: Some(re.sequences().unwrap()),
            ..EvalSets::default()
        },
    }
}

fn run(cfg: RunConfig, data: &TrainData) -> (TrainState, Vec<latforge::evalkit::MetricsRecord>) {
    let p = init();
    Trainer::new(cfg, data, &p)
        .unwrap()
        .run(TrainState::new(p), &mut ())
        .unwrap()
}

#[test]
fn every_loss_kind_trains_with_an_adversary() {
    let cases = [
        (LossKind::Rt, backdoor_data()),
        (LossKind::Dpo, backdoor_data()),
        (LossKind::UnlearnGa, unlearn_data()),
        (LossKind::Rmu, unlearn_data()),
    ];
    for (loss, data) in &cases {
        let (state, records) = run(config(*loss), data);
        assert_eq!(state.step, 6);
        assert_eq!(state.nan_skips, 0);
        assert!(state.params.is_finite());
        assert_ne!(state.params, init(), "{loss} did not move");
        let steps: Vec<usize> = records.iter().map(|r| r.step).collect();
        assert_eq!(steps, [3, 6]);
        for r in &records {
            assert!(r.attack_loss.is_some_and(f64::is_finite), "{loss}: {r:?}");
            assert!(r.defense_loss.is_some_and(f64::is_finite), "{loss}: {r:?}");
        }
    }
}

#[test]
fn metrics_follow_the_task() {
    let (_, backdoor) = run(config(LossKind::Dpo), &backdoor_data());
    let r = backdoor.last().unwrap();
    assert!(r.trigger_success_rate.is_some() && r.compliance_rate.is_some());
    assert!(r.forget_accuracy.is_none());
    let (_, unlearn) = run(config(LossKind::UnlearnGa), &unlearn_data());
    let r = unlearn.last().unwrap();
    assert!(r.forget_accuracy.is_some() && r.retain_ppl.is_some());
    assert!(r.trigger_success_rate.is_none());
}

#[test]
fn interleaving_schedules_benign_batches() {
    let mut cfg = config(LossKind::Dpo);
    cfg.benign = BenignMode::SftInterleave;
    cfg.interleave_ratio = 2;
    let data = backdoor_data();
    let t = Trainer::new(cfg, &data, &init()).unwrap();
    let kinds: Vec<StepKind> = (0..6).map(|s| t.step_kind(s)).collect();
    use StepKind::*;
    assert_eq!(
        kinds,
        [Adversarial, Adversarial, Benign, Adversarial, Adversarial, Benign]
    );
    let mut state = TrainState::new(init());
    let reports: Vec<StepReport> = (0..3).map(|_| t.step(&mut state).unwrap()).collect();
    assert!(reports[0].attack_loss.is_some() && reports[0].benign_loss.is_none());
    assert!(reports[2].benign_loss.is_some() && reports[2].attack_loss.is_none());
    assert!(state.cursors.benign > 0);
}

#[test]
fn kl_penalty_is_reported_on_adversarial_steps() {
    let mut cfg = config(LossKind::UnlearnGa);
    cfg.benign = BenignMode::KlPenalty;
    cfg.benign_weight = 0.5;
    let data = unlearn_data();
    let t = Trainer::new(cfg, &data, &init()).unwrap();
    let mut state = TrainState::new(init());
    t.step(&mut state).unwrap();
    let r = t.step(&mut state).unwrap();
    assert_eq!(r.kind, StepKind::Adversarial);
    let kl = r.benign_loss.expect("KL reported");
    assert!(kl >= 0.0 && kl.is_finite());
}

#[test]
fn rmu_only_updates_trainable_layers() {
    let mut cfg = config(LossKind::Rmu);
    cfg.rmu.layer = 1;
    cfg.rmu.trainable_layers = vec![1];
    cfg.attack.profile = HookProfile::Even { k: 1 };
    let (state, _) = run(cfg, &unlearn_data());
    let before = init();
    let layout = before.layout();
    let trainable = layout.layer(1).range();
    for (i, (a, b)) in before.tensors().iter().zip(state.params.tensors()).enumerate() {
        if trainable.contains(&i) {
            continue;
        }
        assert_eq!(a, b, "frozen tensor {i} changed");
    }
    assert!(trainable
        .clone()
        .any(|i| before.tensors()[i] != state.params.tensors()[i]));
}

#[test]
fn attack_options_run_and_stay_deterministic() {
    let data = unlearn_data();
    type Variant = Box<dyn Fn(&mut RunConfig)>;
    let variants: Vec<Variant> = vec![
        Box::new(|c| c.attack.init = AttackInit::UniformBall),
        Box::new(|c| c.attack.scope = NormScope::Aggregate),
        Box::new(|c| c.attack.mode = AttackMode::Untargeted),
        Box::new(|c| c.attack.whiten = true),
        Box::new(|c| c.attack.profile = HookProfile::Even { k: 1 }),
    ];
    for (i, v) in variants.iter().enumerate() {
        let mut cfg = config(LossKind::UnlearnGa);
        v(&mut cfg);
        let a = run(cfg.clone(), &data);
        let b = run(cfg, &data);
        assert_eq!(a.0, b.0, "variant {i} is not deterministic");
        assert!(a.0.params.is_finite());
    }
    let mut cfg = config(LossKind::UnlearnGa);
    cfg.attack.whiten = true;
    let t = Trainer::new(cfg, &data, &init()).unwrap();
    assert_eq!(t.whiteners().map(|w| w.len()), Some(t.sites().len()));
}

#[test]
fn proxy_trigger_runs_for_preference_data() {
    let mut cfg = config(LossKind::Dpo);
    cfg.proxy_trigger = true;
    let (state, _) = run(cfg, &backdoor_data());
    assert!(state.params.is_finite());
}

#[test]
fn mismatched_data_and_invalid_configs_are_rejected() {
    let p = init();
    assert!(Trainer::new(config(LossKind::Dpo), &unlearn_data(), &p).is_err());
    assert!(Trainer::new(config(LossKind::UnlearnGa), &backdoor_data(), &p).is_err());
    let mut cfg = config(LossKind::Rt);
    cfg.attack.epsilon = -1.0;
    assert!(matches!(
        Trainer::new(cfg, &backdoor_data(), &p),
        Err(Error::NegativeEpsilon(_))
    ));
    let mut cfg = config(LossKind::Rt);
    cfg.attack.profile = HookProfile::Even { k: 5 };
    assert!(Trainer::new(cfg, &backdoor_data(), &p).is_err());
}

#[test]
fn checkpoints_are_emitted_on_schedule() {
    struct Seen(Vec<usize>, Vec<usize>);
    impl RunObserver for Seen {
        fn on_metrics(&mut self, r: &latforge::evalkit::MetricsRecord) -> latforge::Result<()> {
            self.0.push(r.step);
            Ok(())
        }
        fn on_checkpoint(&mut self, s: &TrainState) -> latforge::Result<()> {
            self.1.push(s.step);
            Ok(())
        }
    }
    let mut cfg = config(LossKind::UnlearnGa);
    cfg.steps = 7;
    cfg.checkpoint_interval = 2;
    let data = unlearn_data();
    let p = init();
    let mut seen = Seen(Vec::new(), Vec::new());
    Trainer::new(cfg, &data, &p)
        .unwrap()
        .run(TrainState::new(p), &mut seen)
        .unwrap();
    assert_eq!(seen.0, [3, 6, 7]);
    assert_eq!(seen.1, [2, 4, 6, 7]);
}

#[test]
fn relearning_reports_every_reached_checkpoint() {
    let (state, _) = run(config(LossKind::UnlearnGa), &unlearn_data());
    let (f, _) = gen_forget_retain(1, 32, 32);
    let (fe, _) = gen_forget_retain(2, 8, 8);
    let (pool, eval) = (f.sequences().unwrap(), fe.sequences().unwrap());
    let rc = RelearnConfig {
        iters: 7,
        eval_at: vec![5, 10],
        ..RelearnConfig::default()
    };
    let rep = relearn_attack(&state.params, &pool, &eval, &rc).unwrap();
    assert_eq!(rep.iterations, 7);
    assert_eq!(rep.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), [5]);
    assert_eq!(rep.max_accuracy, rep.checkpoints[0].1);
    let none = RelearnConfig {
        iters: 3,
        eval_at: vec![5],
        ..RelearnConfig::default()
    };
    let rep = relearn_attack(&state.params, &pool, &eval, &none).unwrap();
    assert_eq!(rep.max_accuracy, rep.initial_accuracy);
    let too_many = RelearnConfig {
        n_examples: 100,
        ..RelearnConfig::default()
    };
    assert!(relearn_attack(&state.params, &pool, &eval, &too_many).is_err());
}
