use std::time::Instant;

use latforge::evalkit::{accuracy_and_perplexity, gap_closed};
use latforge::lm::{HookProfile, ModelConfig, Parameters};
use latforge::taskgen::*;
use latforge::trainer::*;
use rand::SeedableRng;

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let model = ModelConfig {
        n_layers: env("L", 2),
        d_model: env("D", 32),
        n_heads: env("H", 4),
        vocab_size: 64,
        max_context: 16,
        d_ff: env("FF", 128),
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(env("S", 0));
    let init = Parameters::init(model, &mut rng).unwrap();
    let (forget, retain) = gen_forget_retain(1, 1000, 1000);
    let (forget_eval, retain_eval) = gen_forget_retain(2, 200, 200);
    let (fe, re) = (forget_eval.sequences().unwrap(), retain_eval.sequences().unwrap());
    let eval = EvalSets {
        forget: Some(fe.clone()),
        retain: Some(re.clone()),
        ..EvalSets::default()
    };
    let pre = TrainData {
        train: TrainSet::Sequences(interleave(&forget, &retain).sequences().unwrap()),
        benign: Vec::new(),
        eval: eval.clone(),
    };
    let mut cfg = RunConfig {
        model,
        loss: LossKind::Sft,
        steps: env("PSTEPS", 1500),
        batch_size: 16,
        eval_interval: 500,
        optimizer: OptimizerConfig {
            lr: 0.05,
            momentum: 0.9,
            clip_norm: Some(1.0),
        },
        ..RunConfig::default()
    };
    cfg.attack.enabled = false;
    let t = Instant::now();
    let (state, recs) = Trainer::new(cfg, &pre, &init)
        .unwrap()
        .run(TrainState::new(init.clone()), &mut ())
        .unwrap();
    for r in &recs {
        println!("pre {} fa {:?} ra {:?}", r.step, r.forget_accuracy, r.retain_accuracy);
    }
    println!("pretrain {:?}", t.elapsed());
    let base = state.params;
    let base_acc = accuracy_and_perplexity(&base, &fe).unwrap().0;

    let data = TrainData {
        train: TrainSet::ForgetRetain {
            forget: forget.sequences().unwrap(),
            retain: retain.sequences().unwrap(),
        },
        benign: Vec::new(),
        eval,
    };
    for lat in [false, true] {
        let mut cfg = RunConfig {
            model,
            loss: LossKind::UnlearnGa,
            steps: env("USTEPS", 300),
            batch_size: 16,
            eval_interval: 100,
            optimizer: OptimizerConfig {
                lr: env("ULR", 0.01),
                momentum: 0.9,
                clip_norm: Some(1.0),
            },
            ..RunConfig::default()
        };
        cfg.attack.enabled = lat;
        cfg.attack.epsilon = env("EPS", 1.0);
        cfg.attack.steps = env("K", 16);
        cfg.attack.profile = HookProfile::Even { k: env("SITES", 2) };
        let t = Instant::now();
        let (state, recs) = Trainer::new(cfg, &data, &base)
            .unwrap()
            .run(TrainState::new(base.clone()), &mut ())
            .unwrap();
        for r in &recs {
            println!(
                "lat={lat} {} atk {:?} def {:?} fa {:?} ra {:?}",
                r.step, r.attack_loss, r.defense_loss, r.forget_accuracy, r.retain_accuracy
            );
        }
        let un = accuracy_and_perplexity(&state.params, &fe).unwrap().0;
        let mut gaps = Vec::new();
        for seed in 0..5 {
            let rc = RelearnConfig {
                seed,
                optimizer: OptimizerConfig {
                    lr: env("RLR", 0.01),
                    momentum: 0.9,
                    clip_norm: Some(env("RCLIP", 1.0)),
                },
                ..RelearnConfig::default()
            };
            let rep = relearn_attack(&state.params, data_forget(&data), &fe, &rc).unwrap();
            gaps.push(gap_closed(base_acc, un, rep.max_accuracy).unwrap_or(0.0));
            println!("  relearn seed {seed} {:?} max {}", rep.checkpoints, rep.max_accuracy);
        }
        println!(
            "lat={lat} base {base_acc} forget {un} mean gap {} time {:?}",
            gaps.iter().sum::<f64>() / 5.0,
            t.elapsed()
        );
    }
}

fn data_forget(d: &TrainData) -> &[latforge::lm::TokenSequence] {
    match &d.train {
        TrainSet::ForgetRetain { forget, .. } => forget,
        _ => unreachable!(),
    }
}
