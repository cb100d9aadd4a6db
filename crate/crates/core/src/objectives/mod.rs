//! Attack and defense losses for refusal training, preference optimization,
//! unlearning and representation misdirection.
//!
//! Conventions shared by every loss: toward/away terms sum over the tokens of
//! a completion and average over the batch; `log(1 − p)` terms clamp `p` to
//! at most `1 − 1e-6`. Perturbations only ever enter the policy forward pass;
//! reference and benign quantities are computed without them.

mod rmu;

use std::sync::Arc;

use rand::Rng;

pub use rmu::{
    frozen_activations, rmu_defense_loss, rmu_forget_term, rmu_retain_term, RmuSpec, DEFAULT_RMU_ALPHA, DEFAULT_RMU_C,
};

use crate::attack::PerturbationSet;
use crate::diff::{Graph, Real, Tensor, Var};
use crate::lm::{completion_nll, forward_graph, BoundParams, Parameters, SiteVar, TokenSequence};
use crate::{Error, Result};

/// Upper clamp on `p` inside `log(1 − p)`.
pub const PROB_CLAMP: f64 = 1.0 - 1e-6;

/// Default DPO inverse temperature.
pub const DEFAULT_BETA: f64 = 0.1;

/// A prompt with a preferred (`chosen`) and a dispreferred (`rejected`) completion.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PreferenceTriple {
    prompt: Vec<usize>,
    chosen: Vec<usize>,
    rejected: Vec<usize>,
}

impl PreferenceTriple {
    pub fn new(prompt: Vec<usize>, chosen: Vec<usize>, rejected: Vec<usize>) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::InvalidSequence("empty prompt".into()));
        }
        if chosen.is_empty() || rejected.is_empty() {
            return Err(Error::EmptyCompletion);
        }
        Ok(Self {
            prompt,
            chosen,
            rejected,
        })
    }

    pub fn prompt(&self) -> &[usize] {
        &self.prompt
    }

    pub fn chosen(&self) -> &[usize] {
        &self.chosen
    }

    pub fn rejected(&self) -> &[usize] {
        &self.rejected
    }

    pub fn chosen_sequence(&self) -> TokenSequence {
        TokenSequence::from_parts(&self.prompt, &self.chosen).expect("validated")
    }

    pub fn rejected_sequence(&self) -> TokenSequence {
        TokenSequence::from_parts(&self.prompt, &self.rejected).expect("validated")
    }

    /// The same prompt with the roles of the completions exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            prompt: self.prompt.clone(),
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
        }
    }
}

/// Frozen reference weights `θ*`. Cloning shares the same snapshot.
#[derive(Debug, Clone)]
pub struct ReferenceHandle<T = f32> {
    params: Arc<Parameters<T>>,
}

impl<T: Real> ReferenceHandle<T> {
    pub fn new(params: Parameters<T>) -> Self {
        Self {
            params: Arc::new(params),
        }
    }

    pub fn params(&self) -> &Parameters<T> {
        &self.params
    }
}

/// What a loss evaluation differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    /// Value only.
    Nothing,
    /// Every parameter tensor, in canonical order (defender).
    Params,
    /// Every perturbation entry, in set order (attacker).
    Perturbation,
}

/// A loss value and its gradient with respect to the requested quantity.
#[derive(Debug, Clone)]
pub struct LossEval<T = f32> {
    pub value: T,
    /// Empty for [`Wrt::Nothing`].
    pub grads: Vec<Tensor<T>>,
}

/// Builds a loss on a fresh graph and differentiates it as requested.
///
/// `build` receives the bound parameters and the bound perturbation (empty
/// when `delta` is `None`).
pub fn evaluate_loss<T, F>(
    params: &Parameters<T>,
    delta: Option<&PerturbationSet<T>>,
    wrt: Wrt,
    build: F,
) -> Result<LossEval<T>>
where
    T: Real,
    F: FnOnce(&mut Graph<T>, &BoundParams, &[SiteVar]) -> Result<Var>,
{
    if wrt == Wrt::Perturbation && delta.is_none() {
        return Err(Error::InvalidArgument(
            "perturbation gradient requested for a loss without a perturbation".into(),
        ));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |_| wrt == Wrt::Params)?;
    let mut sites = Vec::new();
    if let Some(set) = delta {
        for (i, e) in set.entries().iter().enumerate() {
            let v = g.bind(&format!("delta.{i}"), e.delta.clone(), wrt == Wrt::Perturbation)?;
            sites.push(SiteVar { site: e.site, delta: v });
        }
    }
    let out = build(&mut g, &bound, &sites)?;
    let value = g.value(out).item();
    let grads = match wrt {
        Wrt::Nothing => Vec::new(),
        Wrt::Params => {
            let mut all = g.backward(out)?;
            bound
                .vars()
                .iter()
                .map(|&v| all.take(v).expect("tracked parameter"))
                .collect()
        }
        Wrt::Perturbation => {
            let mut all = g.backward(out)?;
            sites
                .iter()
                .map(|s| all.take(s.delta).expect("tracked perturbation"))
                .collect()
        }
    };
    Ok(LossEval { value, grads })
}

fn check_delta<T: Real>(delta: Option<&PerturbationSet<T>>, prompt_len: usize, seq_len: usize) -> Result<()> {
    match delta {
        Some(set) => set.check_against(prompt_len, seq_len),
        None => Ok(()),
    }
}

/// `log P(completion | prompt)` as a scalar node.
pub fn log_prob_node<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    seq: &TokenSequence,
    sites: &[SiteVar],
) -> Result<Var> {
    let out = forward_graph(g, bound, seq, sites)?;
    let nll = completion_nll(g, out.logits, seq)?;
    let total = g.sum(nll)?;
    Ok(g.neg(total)?)
}

/// `−Σ_t log(1 − p_t)` over completion tokens with `p_t ≤ 1 − 1e-6`.
pub fn away_node<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    seq: &TokenSequence,
    sites: &[SiteVar],
) -> Result<Var> {
    let out = forward_graph(g, bound, seq, sites)?;
    let nll = completion_nll(g, out.logits, seq)?;
    let neg = g.neg(nll)?;
    let p = g.exp(neg)?;
    let p = g.clamp_max(p, T::of(PROB_CLAMP))?;
    let q = g.neg(p)?;
    let q = g.shift(q, T::one())?;
    let logq = g.log(q)?;
    let total = g.sum(logq)?;
    Ok(g.neg(total)?)
}

/// Toward `toward`, away from `away`: `−log P(toward) − Σ log(1 − p_t(away))`.
fn toward_away<T: Real>(
    params: &Parameters<T>,
    triple: &PreferenceTriple,
    toward_rejected: bool,
    delta: Option<&PerturbationSet<T>>,
    wrt: Wrt,
) -> Result<LossEval<T>> {
    let (toward, away) = if toward_rejected {
        (triple.rejected_sequence(), triple.chosen_sequence())
    } else {
        (triple.chosen_sequence(), triple.rejected_sequence())
    };
    check_delta(delta, triple.prompt().len(), toward.len().min(away.len()))?;
    evaluate_loss(params, delta, wrt, |g, bound, sites| {
        let lp = log_prob_node(g, bound, &toward, sites)?;
        let t = g.neg(lp)?;
        let a = away_node(g, bound, &away, sites)?;
        Ok(g.add(t, a)?)
    })
}

/// Refusal-training attack loss: toward the rejected (harmful) completion,
/// away from the chosen one.
pub fn rt_attack_loss<T: Real>(
    params: &Parameters<T>,
    triple: &PreferenceTriple,
    delta: Option<&PerturbationSet<T>>,
    wrt: Wrt,
) -> Result<LossEval<T>> {
    toward_away(params, triple, true, delta, wrt)
}

/// Refusal-training defense loss: toward the chosen completion, away from the
/// rejected one, with the adversary's perturbation present.
pub fn rt_defense_loss<T: Real>(
    params: &Parameters<T>,
    triple: &PreferenceTriple,
    delta: Option<&PerturbationSet<T>>,
    wrt: Wrt,
) -> Result<LossEval<T>> {
    toward_away(params, triple, false, delta, wrt)
}

/// Mean over the batch of `−log P(y | x)`; never perturbed.
pub fn benign_sft_loss<T: Real>(params: &Parameters<T>, batch: &[TokenSequence], wrt: Wrt) -> Result<LossEval<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let scale = T::of(1.0 / batch.len() as f64);
    evaluate_loss(params, None, wrt, |g, bound, _| {
        let mut total: Option<Var> = None;
        for seq in batch {
            let lp = log_prob_node(g, bound, seq, &[])?;
            total = Some(match total {
                Some(t) => g.sub(t, lp)?,
                None => g.neg(lp)?,
            });
        }
        Ok(g.scale(total.expect("non-empty"), scale)?)
    })
}

/// Reference next-token log-distributions at the completion positions of `seq`, `[c, vocab]`.
pub fn reference_log_probs<T: Real>(reference: &ReferenceHandle<T>, seq: &TokenSequence) -> Result<Tensor<T>> {
    let c = seq.completion().len();
    if c == 0 {
        return Err(Error::EmptyCompletion);
    }
    let mut g = Graph::new();
    let bound = reference.params().bind(&mut g, |_| false)?;
    let out = forward_graph(&mut g, &bound, seq, &[])?;
    let rows = g.slice_rows(out.logits, seq.prompt_len() - 1, c)?;
    let lp = g.log_softmax(rows)?;
    Ok(g.value(lp).clone())
}

/// `Σ_t KL[P_ref(·|prefix_t) ‖ P_θ(·|prefix_t)]` over the completion positions
/// of one sequence, given the reference log-distributions.
pub fn kl_sum_node<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    seq: &TokenSequence,
    reference_lp: &Tensor<T>,
) -> Result<Var> {
    let c = seq.completion().len();
    let out = forward_graph(g, bound, seq, &[])?;
    let rows = g.slice_rows(out.logits, seq.prompt_len() - 1, c)?;
    let lp = g.log_softmax(rows)?;
    if g.shape(lp) != reference_lp.shape() {
        return Err(Error::InvalidArgument(format!(
            "reference distribution shape {:?} for policy {:?}",
            reference_lp.shape(),
            g.shape(lp)
        )));
    }
    let ref_p = g.constant(reference_lp.map(T::exp))?;
    let ref_lp = g.constant(reference_lp.clone())?;
    let diff = g.sub(ref_lp, lp)?;
    let terms = g.mul(ref_p, diff)?;
    Ok(g.sum(terms)?)
}

/// Mean over all completion positions in the batch of `KL[P_θ* ‖ P_θ]`; unperturbed.
pub fn benign_kl_loss<T: Real>(
    params: &Parameters<T>,
    reference: &ReferenceHandle<T>,
    batch: &[TokenSequence],
    wrt: Wrt,
) -> Result<LossEval<T>> {
    let refs = batch
        .iter()
        .map(|s| reference_log_probs(reference, s))
        .collect::<Result<Vec<_>>>()?;
    benign_kl_loss_cached(params, batch, &refs, wrt)
}

/// [`benign_kl_loss`] with precomputed reference log-distributions.
pub fn benign_kl_loss_cached<T: Real>(
    params: &Parameters<T>,
    batch: &[TokenSequence],
    reference_lp: &[Tensor<T>],
    wrt: Wrt,
) -> Result<LossEval<T>> {
    if batch.is_empty() || batch.len() != reference_lp.len() {
        return Err(Error::InvalidArgument(format!(
            "{} sequences with {} reference distributions",
            batch.len(),
            reference_lp.len()
        )));
    }
    let positions: usize = batch.iter().map(|s| s.completion().len()).sum();
    let scale = T::of(1.0 / positions as f64);
    evaluate_loss(params, None, wrt, |g, bound, _| {
        let mut total: Option<Var> = None;
        for (seq, r) in batch.iter().zip(reference_lp) {
            let kl = kl_sum_node(g, bound, seq, r)?;
            total = Some(match total {
                Some(t) => g.add(t, kl)?,
                None => kl,
            });
        }
        Ok(g.scale(total.expect("non-empty"), scale)?)
    })
}

/// Reference log-probabilities of both completions of a triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceLogProbs<T = f32> {
    pub chosen: T,
    pub rejected: T,
}

pub fn reference_pair_log_probs<T: Real>(
    reference: &ReferenceHandle<T>,
    triple: &PreferenceTriple,
) -> Result<ReferenceLogProbs<T>> {
    let lp = |seq: &TokenSequence| -> Result<T> {
        let mut g = Graph::new();
        let bound = reference.params().bind(&mut g, |_| false)?;
        let v = log_prob_node(&mut g, &bound, seq, &[])?;
        Ok(g.value(v).item())
    };
    Ok(ReferenceLogProbs {
        chosen: lp(&triple.chosen_sequence())?,
        rejected: lp(&triple.rejected_sequence())?,
    })
}

/// DPO loss `−log σ(β·[logratio(winner) − logratio(loser)])`.
///
/// The winner is the chosen completion, or the rejected one when `flip` is
/// set (the attacker's objective). `delta` perturbs the policy only.
pub fn dpo_loss<T: Real>(
    params: &Parameters<T>,
    reference: &ReferenceHandle<T>,
    triple: &PreferenceTriple,
    beta: f64,
    delta: Option<&PerturbationSet<T>>,
    flip: bool,
    wrt: Wrt,
) -> Result<LossEval<T>> {
    let r = reference_pair_log_probs(reference, triple)?;
    dpo_loss_cached(params, r, triple, beta, delta, flip, wrt)
}

/// [`dpo_loss`] with precomputed reference log-probabilities.
pub fn dpo_loss_cached<T: Real>(
    params: &Parameters<T>,
    reference: ReferenceLogProbs<T>,
    triple: &PreferenceTriple,
    beta: f64,
    delta: Option<&PerturbationSet<T>>,
    flip: bool,
    wrt: Wrt,
) -> Result<LossEval<T>> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let (winner, loser, ref_w, ref_l) = if flip {
        (
            triple.rejected_sequence(),
            triple.chosen_sequence(),
            reference.rejected,
            reference.chosen,
        )
    } else {
        (
            triple.chosen_sequence(),
            triple.rejected_sequence(),
            reference.chosen,
            reference.rejected,
        )
    };
    check_delta(delta, triple.prompt().len(), winner.len().min(loser.len()))?;
    evaluate_loss(params, delta, wrt, |g, bound, sites| {
        let lw = log_prob_node(g, bound, &winner, sites)?;
        let ll = log_prob_node(g, bound, &loser, sites)?;
        let d = g.sub(lw, ll)?;
        let d = g.shift(d, ref_l - ref_w)?;
        let margin = g.scale(d, T::of(beta))?;
        // −log σ(m) is the cross-entropy of class 1 under logits [0, m].
        let m = g.reshape(margin, &[1, 1])?;
        let basis = g.constant(Tensor::matrix(1, 2, vec![T::zero(), T::one()])?)?;
        let logits = g.matmul(m, basis)?;
        let nll = g.cross_entropy(logits, &[1])?;
        Ok(g.sum(nll)?)
    })
}

/// Toward-only attack on a forget sequence: completion cross-entropy (token sum) with `delta`.
pub fn unlearn_attack_loss<T: Real>(
    params: &Parameters<T>,
    seq: &TokenSequence,
    delta: Option<&PerturbationSet<T>>,
    wrt: Wrt,
) -> Result<LossEval<T>> {
    check_delta(delta, seq.prompt_len(), seq.len())?;
    evaluate_loss(params, delta, wrt, |g, bound, sites| {
        let lp = log_prob_node(g, bound, seq, sites)?;
        Ok(g.neg(lp)?)
    })
}

/// `−Σ_j log(1 − p_j)` over the completion tokens of a forget sequence, with `delta`.
pub fn unlearn_forget_loss<T: Real>(
    params: &Parameters<T>,
    seq: &TokenSequence,
    delta: Option<&PerturbationSet<T>>,
    wrt: Wrt,
) -> Result<LossEval<T>> {
    check_delta(delta, seq.prompt_len(), seq.len())?;
    evaluate_loss(params, delta, wrt, |g, bound, sites| away_node(g, bound, seq, sites))
}

/// Completion cross-entropy (token sum) on retain text; never perturbed.
pub fn retain_loss<T: Real>(params: &Parameters<T>, seq: &TokenSequence, wrt: Wrt) -> Result<LossEval<T>> {
    evaluate_loss(params, None, wrt, |g, bound, _| {
        let lp = log_prob_node(g, bound, seq, &[])?;
        Ok(g.neg(lp)?)
    })
}

/// Samples a unit steering direction: uniform `[0, 1)` coordinates, normalized.
pub fn sample_steering_vector(d_model: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let u: Vec<f64> = (0..d_model).map(|_| rng.gen::<f64>()).collect();
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return u.into_iter().map(|x| x / n).collect();
        }
    }
}
