//! Forward-pass properties and loss values against a direct oracle built from
//! per-position logits.

use latforge::attack::PerturbationSet;
use latforge::lm::*;
use latforge::objectives::*;
use latforge::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        d_model: 8,
        n_heads: 2,
        vocab_size: 12,
        max_context: 12,
        d_ff: 16,
    }
}

fn params(layers: usize, seed: u64) -> Parameters<f64> {
    Parameters::<f32>::init(model(layers), &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap()
        .cast()
}

fn seq(prompt: &[usize], completion: &[usize]) -> TokenSequence {
    TokenSequence::from_parts(prompt, completion).unwrap()
}

/// `log softmax(logits[t−1])[token_t]` for every completion token.
fn token_log_probs(p: &Parameters<f64>, s: &TokenSequence, delta: Option<&PerturbationSet<f64>>) -> Vec<f64> {
    let logits = forward(p, s, delta).unwrap();
    (s.prompt_len()..s.len())
        .map(|t| {
            let row = logits.row(t - 1);
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row[s.ids()[t]] - lse
        })
        .collect()
}

fn log_prob(p: &Parameters<f64>, s: &TokenSequence) -> f64 {
    token_log_probs(p, s, None).iter().sum()
}

fn away(p: &Parameters<f64>, s: &TokenSequence) -> f64 {
    -token_log_probs(p, s, None)
        .iter()
        .map(|lp| (1.0 - lp.exp().min(1.0 - 1e-6)).ln())
        .sum::<f64>()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn attention_is_causal() {
    let p = params(2, 1);
    let a = forward(&p, &seq(&[0, 3, 5], &[7, 2, 9]), None).unwrap();
    let b = forward(&p, &seq(&[0, 3, 5], &[7, 4, 1]), None).unwrap();
    for t in 0..4 {
        assert_eq!(a.row(t), b.row(t), "position {t} saw the future");
    }
    assert_ne!(a.row(4), b.row(4));
}

#[test]
fn zero_perturbation_is_the_identity_hook() {
    let p = params(2, 2);
    let s = seq(&[0, 3, 5], &[7, 2]);
    let sites = [HookSite { layer: 0 }, HookSite { layer: 1 }];
    let zero = PerturbationSet::<f64>::zeros_for_prompt(&sites, 3, 8);
    assert_eq!(forward(&p, &s, Some(&zero)).unwrap(), forward(&p, &s, None).unwrap());
}

#[test]
fn hooks_act_at_their_block_input_only() {
    let p = params(3, 3);
    let s = seq(&[0, 3, 5], &[7, 2]);
    let mut delta = PerturbationSet::<f64>::zeros_for_prompt(&[HookSite { layer: 1 }], 3, 8);
    delta.entries_mut()[0].delta.row_mut(1).fill(0.5);
    let clean = site_activations(&p, &s, &[0, 1, 2]).unwrap();
    // δ at position 1 of block 1's input changes that position and, through
    // attention, every later one; position 0 is untouched.
    let logits_clean = forward(&p, &s, None).unwrap();
    let logits_hooked = forward(&p, &s, Some(&delta)).unwrap();
    assert_eq!(logits_clean.row(0), logits_hooked.row(0));
    for t in 1..s.len() {
        assert_ne!(logits_clean.row(t), logits_hooked.row(t));
    }
    assert_eq!(clean.len(), 3);
    assert!(clean.iter().all(|a| a.shape() == [5, 8]));
}

#[test]
fn perturbations_outside_the_prompt_are_rejected() {
    let p = params(1, 4);
    let s = seq(&[0, 3], &[7, 2]);
    let mut delta = PerturbationSet::<f64>::zeros(&[HookSite { layer: 0 }], 4, 8, 4);
    delta.entries_mut()[0].delta.row_mut(3).fill(1.0);
    let err = forward(&p, &s, Some(&delta)).unwrap_err();
    assert!(
        matches!(err, Error::PerturbationOutsidePrompt { .. } | Error::InvalidArgument(_)),
        "{err}"
    );
    assert!(HookSite::new(1, 1).is_err());
}

#[test]
fn greedy_decoding_follows_the_argmax() {
    let p = params(2, 5);
    let out = greedy_decode(&p, &[0, 4], 3).unwrap();
    assert_eq!(out.prompt(), &[0, 4]);
    for t in 2..out.len() {
        let prefix = TokenSequence::new(out.ids()[..t].to_vec(), t).unwrap();
        let logits = forward(&p, &prefix, None).unwrap();
        let row = logits.row(t - 1);
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        assert_eq!(out.ids()[t], best);
    }
    assert!(matches!(
        greedy_decode(&p, &[0; 10], 3),
        Err(Error::ContextOverflow { .. })
    ));
}

#[test]
fn log_probability_losses_match_the_oracle() {
    let p = params(2, 6);
    let s = seq(&[0, 6, 8], &[10, 11, 1]);
    let r = seq(&[0, 4], &[9, 3]);
    let lp = log_prob(&p, &s);
    assert!(close(sequence_log_prob(&p, &s, None).unwrap(), lp));
    assert!(close(
        unlearn_attack_loss(&p, &s, None, Wrt::Nothing).unwrap().value,
        -lp
    ));
    assert!(close(retain_loss(&p, &s, Wrt::Nothing).unwrap().value, -lp));
    assert!(close(
        unlearn_forget_loss(&p, &s, None, Wrt::Nothing).unwrap().value,
        away(&p, &s)
    ));
    let sft = benign_sft_loss(&p, &[s.clone(), r.clone()], Wrt::Nothing)
        .unwrap()
        .value;
    assert!(close(sft, -(lp + log_prob(&p, &r)) / 2.0));
}

#[test]
fn refusal_losses_pull_toward_one_completion_and_push_from_the_other() {
    let p = params(2, 7);
    let t = PreferenceTriple::new(vec![0, 3, 5], vec![2, 7], vec![4, 9, 1]).unwrap();
    let (c, r) = (t.chosen_sequence(), t.rejected_sequence());
    let defense = rt_defense_loss(&p, &t, None, Wrt::Nothing).unwrap().value;
    let attack = rt_attack_loss(&p, &t, None, Wrt::Nothing).unwrap().value;
    assert!(close(defense, -log_prob(&p, &c) + away(&p, &r)));
    assert!(close(attack, -log_prob(&p, &r) + away(&p, &c)));
}

#[test]
fn dpo_matches_the_closed_form() {
    let p = params(2, 8);
    let reference = ReferenceHandle::new(params(2, 9));
    let t = PreferenceTriple::new(vec![0, 3, 5], vec![2, 7], vec![4, 9, 1]).unwrap();
    let (c, r) = (t.chosen_sequence(), t.rejected_sequence());
    let rp = reference.params();
    for beta in [0.1, 0.5] {
        let m = beta * ((log_prob(&p, &c) - log_prob(rp, &c)) - (log_prob(&p, &r) - log_prob(rp, &r)));
        let softplus = |x: f64| (1.0 + x.exp()).ln();
        let plain = dpo_loss(&p, &reference, &t, beta, None, false, Wrt::Nothing)
            .unwrap()
            .value;
        let flipped = dpo_loss(&p, &reference, &t, beta, None, true, Wrt::Nothing)
            .unwrap()
            .value;
        assert!(close(plain, softplus(-m)), "{plain} vs {}", softplus(-m));
        assert!(close(flipped, softplus(m)));
        let cached = reference_pair_log_probs(&reference, &t).unwrap();
        assert!(close(
            dpo_loss_cached(&p, cached, &t, beta, None, false, Wrt::Nothing)
                .unwrap()
                .value,
            plain
        ));
    }
}

#[test]
fn kl_penalty_is_zero_at_the_reference_and_positive_elsewhere() {
    let p = params(2, 10);
    let batch = vec![seq(&[0, 3], &[5, 6, 7]), seq(&[0, 9, 9], &[1])];
    let same = benign_kl_loss(&p, &ReferenceHandle::new(p.clone()), &batch, Wrt::Params).unwrap();
    assert!(same.value.abs() < 1e-12);
    assert!(same.grads.iter().all(|g| g.data().iter().all(|x| x.abs() < 1e-10)));
    let other = ReferenceHandle::new(params(2, 11));
    let kl = benign_kl_loss(&p, &other, &batch, Wrt::Nothing).unwrap().value;
    assert!(kl > 0.0);
    let refs: Vec<_> = batch.iter().map(|s| reference_log_probs(&other, s).unwrap()).collect();
    assert!(close(
        benign_kl_loss_cached(&p, &batch, &refs, Wrt::Nothing).unwrap().value,
        kl
    ));
}

#[test]
fn rmu_terms_match_their_definitions() {
    let p = params(2, 12);
    let s = seq(&[0, 3, 5], &[7, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = RmuSpec::sample(8, 1, &mut rng).unwrap();
    assert_eq!((spec.c(), spec.alpha()), (DEFAULT_RMU_C, DEFAULT_RMU_ALPHA));
    assert_eq!(spec.trainable_layers(), &[0, 1]);
    let acts = frozen_activations(&ReferenceHandle::new(p.clone()), &s, 1).unwrap();
    let expect = (0..s.len())
        .map(|t| {
            acts.row(t)
                .iter()
                .zip(spec.u())
                .map(|(a, u)| (a - spec.c() * u).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / s.len() as f64;
    assert!(close(
        rmu_forget_term(&p, &s, &spec, None, Wrt::Nothing).unwrap().value,
        expect
    ));
    let other = frozen_activations(&ReferenceHandle::new(params(2, 13)), &s, 1).unwrap();
    let retain = rmu_retain_term(&p, &other, &s, &spec, Wrt::Nothing).unwrap().value;
    let expect = spec.alpha()
        * acts
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
        / s.len() as f64;
    assert!(close(retain, expect));
    // Sites after the RMU layer cannot influence its activations.
    let late = PerturbationSet::<f64>::zeros_for_prompt(&[HookSite { layer: 1 }], 3, 8);
    let spec0 = RmuSpec::new(spec.u().to_vec(), 6.5, 1200.0, 0, vec![0]).unwrap();
    assert!(rmu_forget_term(&p, &s, &spec0, Some(&late), Wrt::Nothing).is_err());
    assert!(RmuSpec::new(vec![1.0, 1.0], 6.5, 1200.0, 0, vec![]).is_err());
}

#[test]
fn perturbation_gradient_requires_a_perturbation() {
    let p = params(1, 14);
    let s = seq(&[0, 3], &[7]);
    assert!(unlearn_attack_loss(&p, &s, None, Wrt::Perturbation).is_err());
    let d = PerturbationSet::<f64>::zeros_for_prompt(&[HookSite { layer: 0 }], 2, 8);
    let e = unlearn_attack_loss(&p, &s, Some(&d), Wrt::Perturbation).unwrap();
    assert_eq!(e.grads.len(), 1);
    assert_eq!(e.grads[0].shape(), &[2, 8]);
}
