use std::time::Instant;

use latforge::attack::AttackMode;
use latforge::evalkit::{compliance_rate, trigger_success_rate};
use latforge::lm::{HookProfile, ModelConfig, Parameters};
use latforge::taskgen::vocab::TRIGGER;
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
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let init = Parameters::init(model, &mut rng).unwrap();
    let poisoned = gen_poisoned(1, 2000, &TRIGGER, env("RHO", 0.25)).unwrap();
    let benign = gen_benign(2, 2000);
    let poison_train = interleave(&poisoned, &benign);
    let trig = gen_trigger_eval(3, 200, &TRIGGER);
    let clean = gen_clean_eval(4, 200);
    let eval = EvalSets {
        trigger: Some(trig.clone()),
        clean: Some(clean.clone()),
        ..EvalSets::default()
    };
    let data = TrainData {
        train: TrainSet::Sequences(poison_train.sequences().unwrap()),
        benign: benign.sequences().unwrap(),
        eval: eval.clone(),
    };
    let mut cfg = RunConfig {
        model,
        loss: LossKind::Sft,
        steps: env("PSTEPS", 2000),
        batch_size: 16,
        eval_interval: 500,
        optimizer: OptimizerConfig {
            lr: env("PLR", 0.05),
            momentum: 0.9,
            clip_norm: Some(1.0),
        },
        ..RunConfig::default()
    };
    cfg.attack.enabled = false;
    let t = Instant::now();
    let tr = Trainer::new(cfg, &data, &init).unwrap();
    let (state, recs) = tr.run(TrainState::new(init.clone()), &mut ()).unwrap();
    for r in &recs {
        println!(
            "poison step {} loss {:?} trig {:?} comply {:?}",
            r.step, r.defense_loss, r.trigger_success_rate, r.compliance_rate
        );
    }
    println!("poison time {:?}", t.elapsed());
    let base = state.params;

    let pairs = interleave(&gen_preference_pairs(5, 1000), &gen_helpful_pairs(6, 1000));
    let dpo_data = TrainData {
        train: TrainSet::Triples(pairs.triples().unwrap()),
        benign: benign.sequences().unwrap(),
        eval,
    };
    for lat in [false, true] {
        let mut cfg = RunConfig {
            model,
            loss: LossKind::Dpo,
            steps: env("DSTEPS", 1024),
            batch_size: 16,
            eval_interval: 256,
            beta: env("BETA", 0.1),
            proxy_trigger: env("PROXY", false),
            optimizer: OptimizerConfig {
                lr: env("DLR", 0.01),
                momentum: 0.9,
                clip_norm: Some(1.0),
            },
            ..RunConfig::default()
        };
        cfg.attack.enabled = lat;
        cfg.attack.epsilon = env("EPS", 1.0);
        cfg.attack.steps = env("K", 16);
        cfg.attack.profile = HookProfile::Even { k: env("SITES", 2) };
        cfg.attack.whiten = env("WHITEN", false);
        if env("UNTARGETED", false) {
            cfg.attack.mode = AttackMode::Untargeted;
        }
        let t = Instant::now();
        let tr = Trainer::new(cfg, &dpo_data, &base).unwrap();
        let (state, recs) = tr.run(TrainState::new(base.clone()), &mut ()).unwrap();
        for r in &recs {
            println!(
                "lat={lat} step {} atk {:?} def {:?} trig {:?} comply {:?}",
                r.step, r.attack_loss, r.defense_loss, r.trigger_success_rate, r.compliance_rate
            );
        }
        println!(
            "lat={lat} final trig {} comply {} time {:?}",
            trigger_success_rate(&state.params, &trig).unwrap(),
            compliance_rate(&state.params, &clean).unwrap(),
            t.elapsed()
        );
    }
}
