//! The latent adversarial training loop.
//!
//! Each adversarial step runs PGD per example against frozen parameters,
//! evaluates the defense loss with the resulting perturbations held constant,
//! adds the configured benign term and applies one momentum-SGD update. Data
//! order and adversary randomness are pure functions of the seeds and the
//! step counter, so runs are reproducible and resumable.

mod config;
mod relearn;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::{AttackConfig, BenignMode, LossKind, OptimizerConfig, RmuConfig, RunConfig};
pub use relearn::{relearn_attack, RelearnConfig, RelearnReport};

use crate::attack::{fit_whitener_default, run_pgd, AttackBudget, AttackMode, PerturbationSet, Whitener};
use crate::diff::Tensor;
use crate::evalkit::{accuracy_and_perplexity, compliance_rate, trigger_success_rate, MetricsRecord};
use crate::lm::{hook_sites_for, site_activations, HookSite, Parameters, TokenSequence};
use crate::objectives::{
    dpo_loss_cached, evaluate_loss, frozen_activations, kl_sum_node, log_prob_node, reference_log_probs,
    reference_pair_log_probs, rmu_forget_term, rmu_retain_term, rt_attack_loss, rt_defense_loss, unlearn_attack_loss,
    unlearn_forget_loss, LossEval, PreferenceTriple, ReferenceHandle, ReferenceLogProbs, RmuSpec, Wrt,
};
use crate::taskgen::vocab::{proxy_trigger, BOS};
use crate::taskgen::DatasetSplit;
use crate::{Error, Result};

/// Positions in each data stream, counted in examples consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Cursors {
    pub train: u64,
    pub retain: u64,
    pub benign: u64,
}

/// Everything that evolves during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub params: Parameters,
    /// Momentum buffers, same shapes as the parameters.
    pub momentum: Parameters,
    pub nan_skips: usize,
    pub cursors: Cursors,
}

impl TrainState {
    pub fn new(params: Parameters) -> Self {
        let momentum = params.zeros_like();
        Self {
            step: 0,
            params,
            momentum,
            nan_skips: 0,
            cursors: Cursors::default(),
        }
    }
}

/// Training examples in the shape the configured loss expects.
#[derive(Debug, Clone)]
pub enum TrainSet {
    Sequences(Vec<TokenSequence>),
    Triples(Vec<PreferenceTriple>),
    ForgetRetain {
        forget: Vec<TokenSequence>,
        retain: Vec<TokenSequence>,
    },
}

impl TrainSet {
    fn shape_name(&self) -> &'static str {
        match self {
            TrainSet::Sequences(_) => "sequences",
            TrainSet::Triples(_) => "preference triples",
            TrainSet::ForgetRetain { .. } => "forget/retain sequences",
        }
    }
}

/// Held-out splits evaluated at every metrics interval.
#[derive(Debug, Clone, Default)]
pub struct EvalSets {
    pub trigger: Option<DatasetSplit>,
    pub clean: Option<DatasetSplit>,
    pub forget: Option<Vec<TokenSequence>>,
    pub retain: Option<Vec<TokenSequence>>,
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: TrainSet,
    /// Benign sequences for the interleave / KL term.
    pub benign: Vec<TokenSequence>,
    pub eval: EvalSets,
}

/// Receives metrics rows and checkpoints as a run progresses.
pub trait RunObserver {
    fn on_metrics(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Adversarial,
    Benign,
}

/// Summary of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub kind: StepKind,
    pub attack_loss: Option<f64>,
    pub defense_loss: Option<f64>,
    pub benign_loss: Option<f64>,
    /// The update was skipped by the non-finite guard.
    pub skipped: bool,
}

/// Index of the `k`-th example of a stream of `n` examples: a fresh
/// permutation per epoch, drawn from `(seed, salt, epoch)`.
fn stream_indices(n: usize, seed: u64, salt: u64, start: u64, count: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for k in start..start + count as u64 {
        let epoch = k / n as u64;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, salt, epoch]));
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("set").1[(k % n as u64) as usize]);
    }
    out
}

/// SplitMix64-style mixing of several words into one seed.
fn mix(words: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3u64;
    for &w in words {
        h ^= w
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

const SALT_TRAIN: u64 = 1;
const SALT_RETAIN: u64 = 2;
const SALT_BENIGN: u64 = 3;

/// Mean of per-example gradients weighted by `w`, summed in order.
fn accumulate(total: &mut Option<Vec<Tensor>>, grads: &[Tensor], w: f32) {
    let acc = total.get_or_insert_with(|| grads.iter().map(|g| Tensor::zeros(g.shape())).collect());
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += w * y;
        }
    }
}

/// One adversarial example: what the attacker perturbs and the defender trains on.
enum Item<'a> {
    Seq(&'a TokenSequence),
    Triple(&'a PreferenceTriple, ReferenceLogProbs),
    Forget(&'a TokenSequence),
}

impl Item<'_> {
    fn prompt_len(&self) -> usize {
        match self {
            Item::Seq(s) | Item::Forget(s) => s.prompt_len(),
            Item::Triple(t, _) => t.prompt().len(),
        }
    }
}

/// Immutable per-run context: configuration, data and cached reference quantities.
pub struct Trainer<'a> {
    config: RunConfig,
    data: &'a TrainData,
    triples: Vec<PreferenceTriple>,
    dpo_refs: Vec<ReferenceLogProbs>,
    kl_refs: Vec<Tensor>,
    rmu: Option<RmuSpec>,
    rmu_frozen: Vec<Tensor>,
    rmu_mask: Vec<bool>,
    sites: Vec<HookSite>,
    whiteners: Option<Vec<Whitener>>,
}

impl<'a> Trainer<'a> {
    /// Prepares a run. `reference` is the frozen model `θ*` used by DPO, the
    /// KL penalty, RMU and whitening.
    pub fn new(config: RunConfig, data: &'a TrainData, reference: &Parameters) -> Result<Self> {
        config.validate()?;
        if reference.config() != &config.model {
            return Err(Error::InvalidModel(
                "reference model does not match the run's model config".into(),
            ));
        }
        let shape_ok = matches!(
            (config.loss, &data.train),
            (LossKind::Sft, TrainSet::Sequences(_))
                | (LossKind::Rt | LossKind::Dpo, TrainSet::Triples(_))
                | (LossKind::UnlearnGa | LossKind::Rmu, TrainSet::ForgetRetain { .. })
        );
        if !shape_ok {
            return Err(Error::BatchMismatch(format!(
                "loss `{}` cannot train on {}",
                config.loss,
                data.train.shape_name()
            )));
        }
        let empty = match &data.train {
            TrainSet::Sequences(s) => s.is_empty(),
            TrainSet::Triples(t) => t.is_empty(),
            TrainSet::ForgetRetain { forget, retain } => forget.is_empty() || retain.is_empty(),
        };
        if empty {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        if config.benign != BenignMode::None && data.benign.is_empty() {
            return Err(Error::InvalidArgument(
                "benign mode configured without benign data".into(),
            ));
        }
        let handle = ReferenceHandle::new(reference.clone());

        let triples: Vec<PreferenceTriple> = match &data.train {
            TrainSet::Triples(ts) if config.proxy_trigger => ts
                .iter()
                .map(|t| with_proxy(t, &config.trigger))
                .collect::<Result<_>>()?,
            TrainSet::Triples(ts) => ts.clone(),
            _ => Vec::new(),
        };
        let dpo_refs = if config.loss == LossKind::Dpo {
            triples
                .par_iter()
                .map(|t| reference_pair_log_probs(&handle, t))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let kl_refs = if config.benign == BenignMode::KlPenalty {
            data.benign
                .par_iter()
                .map(|s| reference_log_probs(&handle, s))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };

        let sites = if config.attack.enabled {
            hook_sites_for(config.attack.profile, config.model.n_layers)?
        } else {
            Vec::new()
        };

        let (rmu, rmu_frozen, rmu_mask) = if config.loss == LossKind::Rmu {
            let mut rng = ChaCha8Rng::seed_from_u64(config.rmu.seed);
            let u = crate::objectives::sample_steering_vector(config.model.d_model, &mut rng);
            let spec = RmuSpec::new(
                u,
                config.rmu.c,
                config.rmu.alpha,
                config.rmu.layer,
                config.rmu.trainable_layers.clone(),
            )?;
            if let Some(s) = sites.iter().find(|s| s.layer > spec.rmu_layer()) {
                return Err(Error::RmuSiteAfterLayer {
                    site: s.layer,
                    rmu_layer: spec.rmu_layer(),
                });
            }
            let TrainSet::ForgetRetain { retain, .. } = &data.train else {
                unreachable!("checked above")
            };
            let frozen = retain
                .par_iter()
                .map(|s| frozen_activations(&handle, s, spec.rmu_layer()))
                .collect::<Result<Vec<_>>>()?;
            let mut mask = vec![false; reference.tensors().len()];
            for i in spec.trainable_tensors(reference) {
                mask[i] = true;
            }
            (Some(spec), frozen, mask)
        } else {
            (None, Vec::new(), Vec::new())
        };

        let mut trainer = Self {
            config,
            data,
            triples,
            dpo_refs,
            kl_refs,
            rmu,
            rmu_frozen,
            rmu_mask,
            sites,
            whiteners: None,
        };
        if trainer.config.attack.enabled && trainer.config.attack.whiten {
            trainer.whiteners = Some(trainer.fit_whiteners(reference)?);
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn sites(&self) -> &[HookSite] {
        &self.sites
    }

    pub fn whiteners(&self) -> Option<&[Whitener]> {
        self.whiteners.as_deref()
    }

    /// Fits one whitener per site to prompt-position activations of the
    /// reference model on the adversarial training prompts.
    fn fit_whiteners(&self, reference: &Parameters) -> Result<Vec<Whitener>> {
        let d = self.config.model.d_model;
        let prompts: Vec<TokenSequence> = match &self.data.train {
            TrainSet::Sequences(s) => s.clone(),
            TrainSet::Triples(_) => self.triples.iter().map(PreferenceTriple::chosen_sequence).collect(),
            TrainSet::ForgetRetain { forget, .. } => forget.clone(),
        };
        let layers: Vec<usize> = self.sites.iter().map(|s| s.layer).collect();
        let target_rows = 8 * d;
        let mut rows: Vec<Vec<f32>> = vec![Vec::new(); layers.len()];
        let mut count = 0;
        for seq in &prompts {
            let acts = site_activations(reference, seq, &layers)?;
            for (r, a) in rows.iter_mut().zip(&acts) {
                for p in 0..seq.prompt_len() {
                    r.extend_from_slice(a.row(p));
                }
            }
            count += seq.prompt_len();
            if count >= target_rows {
                break;
            }
        }
        rows.into_iter()
            .map(|r| {
                let n = r.len() / d;
                fit_whitener_default(&Tensor::matrix(n, d, r)?)
            })
            .collect()
    }

    fn budget(&self) -> AttackBudget {
        let a = &self.config.attack;
        AttackBudget {
            epsilon: vec![a.epsilon; self.sites.len()],
            steps: a.steps,
            step_size: a.step_size,
            mode: a.mode,
            init: a.init,
            scope: a.scope,
        }
    }

    pub fn step_kind(&self, step: usize) -> StepKind {
        let r = self.config.interleave_ratio;
        if self.config.benign == BenignMode::SftInterleave && step % (r + 1) == r {
            StepKind::Benign
        } else {
            StepKind::Adversarial
        }
    }

    /// Attack objective of one example at `delta`, differentiated as requested.
    fn attack_eval(&self, params: &Parameters, item: &Item, delta: &PerturbationSet, wrt: Wrt) -> Result<LossEval> {
        let targeted = self.config.attack.mode == AttackMode::Targeted;
        match (item, targeted) {
            (Item::Triple(t, _), true) if self.config.loss == LossKind::Rt => {
                rt_attack_loss(params, t, Some(delta), wrt)
            }
            (Item::Triple(t, r), true) => dpo_loss_cached(params, *r, t, self.config.beta, Some(delta), true, wrt),
            (Item::Forget(s), true) => unlearn_attack_loss(params, s, Some(delta), wrt),
            _ => self.defense_eval(params, item, Some(delta), wrt),
        }
    }

    /// Defense loss of one adversarial example.
    fn defense_eval(
        &self,
        params: &Parameters,
        item: &Item,
        delta: Option<&PerturbationSet>,
        wrt: Wrt,
    ) -> Result<LossEval> {
        match item {
            Item::Seq(s) => unlearn_attack_loss(params, s, delta, wrt),
            Item::Triple(t, _) if self.config.loss == LossKind::Rt => rt_defense_loss(params, t, delta, wrt),
            Item::Triple(t, r) => dpo_loss_cached(params, *r, t, self.config.beta, delta, false, wrt),
            Item::Forget(s) if self.config.loss == LossKind::Rmu => {
                rmu_forget_term(params, s, self.rmu.as_ref().expect("rmu spec"), delta, wrt)
            }
            Item::Forget(s) => unlearn_forget_loss(params, s, delta, wrt),
        }
    }

    /// Runs the adversary on one example; returns the perturbation (if any)
    /// and the attack objective at its last iterate.
    fn attack(
        &self,
        params: &Parameters,
        item: &Item,
        step: usize,
        index: usize,
    ) -> Result<(Option<PerturbationSet>, Option<f64>)> {
        if !self.config.attack.enabled {
            return Ok((None, None));
        }
        let d = self.config.model.d_model;
        let template = PerturbationSet::zeros_for_prompt(&self.sites, item.prompt_len(), d);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.config.attack.seed, step as u64, index as u64]));
        let outcome = run_pgd(
            |delta: &PerturbationSet| {
                let e = self.attack_eval(params, item, delta, Wrt::Perturbation)?;
                Ok((e.value, e.grads))
            },
            &template,
            &self.budget(),
            self.whiteners.as_deref(),
            &mut rng,
        )?;
        Ok((Some(outcome.perturbation), outcome.losses.last().copied()))
    }

    fn items(&self, state: &TrainState) -> (Vec<Item<'_>>, Vec<&TokenSequence>) {
        let b = self.config.batch_size;
        let seed = self.config.seed;
        match &self.data.train {
            TrainSet::Sequences(s) => {
                let idx = stream_indices(s.len(), seed, SALT_TRAIN, state.cursors.train, b);
                (idx.into_iter().map(|i| Item::Seq(&s[i])).collect(), Vec::new())
            }
            TrainSet::Triples(_) => {
                let idx = stream_indices(self.triples.len(), seed, SALT_TRAIN, state.cursors.train, b);
                let items = idx
                    .into_iter()
                    .map(|i| {
                        let r = self.dpo_refs.get(i).copied().unwrap_or(ReferenceLogProbs {
                            chosen: 0.0,
                            rejected: 0.0,
                        });
                        Item::Triple(&self.triples[i], r)
                    })
                    .collect();
                (items, Vec::new())
            }
            TrainSet::ForgetRetain { forget, retain } => {
                let fi = stream_indices(forget.len(), seed, SALT_TRAIN, state.cursors.train, b);
                let ri = stream_indices(retain.len(), seed, SALT_RETAIN, state.cursors.retain, b);
                (
                    fi.into_iter().map(|i| Item::Forget(&forget[i])).collect(),
                    ri.into_iter().map(|i| &retain[i]).collect(),
                )
            }
        }
    }

    fn retain_indices(&self, state: &TrainState) -> Vec<usize> {
        match &self.data.train {
            TrainSet::ForgetRetain { retain, .. } => stream_indices(
                retain.len(),
                self.config.seed,
                SALT_RETAIN,
                state.cursors.retain,
                self.config.batch_size,
            ),
            _ => Vec::new(),
        }
    }

    fn benign_indices(&self, state: &TrainState) -> Vec<usize> {
        stream_indices(
            self.data.benign.len(),
            self.config.seed,
            SALT_BENIGN,
            state.cursors.benign,
            self.config.batch_size,
        )
    }

    /// Benign SFT batch: mean `−log P(y|x)`, unperturbed.
    fn benign_sft(&self, params: &Parameters, idx: &[usize]) -> Result<(f64, Option<Vec<Tensor>>)> {
        let evals = idx
            .par_iter()
            .map(|&i| {
                evaluate_loss(params, None, Wrt::Params, |g, bound, _| {
                    let lp = log_prob_node(g, bound, &self.data.benign[i], &[])?;
                    Ok(g.neg(lp)?)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let w = 1.0 / idx.len() as f32;
        let mut total = None;
        let mut value = 0.0;
        for e in &evals {
            accumulate(&mut total, &e.grads, w);
            value += e.value as f64 * w as f64;
        }
        Ok((value, total))
    }

    /// Benign KL batch: mean over completion positions of `KL[P_ref ‖ P_θ]`.
    fn benign_kl(&self, params: &Parameters, idx: &[usize]) -> Result<(f64, Option<Vec<Tensor>>)> {
        let positions: usize = idx.iter().map(|&i| self.data.benign[i].completion().len()).sum();
        let evals = idx
            .par_iter()
            .map(|&i| {
                evaluate_loss(params, None, Wrt::Params, |g, bound, _| {
                    kl_sum_node(g, bound, &self.data.benign[i], &self.kl_refs[i])
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let w = 1.0 / positions as f32;
        let mut total = None;
        let mut value = 0.0;
        for e in &evals {
            accumulate(&mut total, &e.grads, w);
            value += e.value as f64 * w as f64;
        }
        Ok((value, total))
    }

    /// One LAT step: attack, defense, benign term, guarded update.
    pub fn step(&self, state: &mut TrainState) -> Result<StepReport> {
        let kind = self.step_kind(state.step);
        let b = self.config.batch_size as u64;
        let report = match kind {
            StepKind::Benign => {
                let idx = self.benign_indices(state);
                let (value, grads) = self.benign_sft(&state.params, &idx)?;
                let mut grads = grads.expect("non-empty batch");
                let w = self.config.benign_weight as f32;
                grads.iter_mut().for_each(|g| g.scale_assign(w));
                let applied = apply_update(state, &grads, &self.config.optimizer, None, value * w as f64);
                state.cursors.benign += b;
                StepReport {
                    kind,
                    attack_loss: None,
                    defense_loss: None,
                    benign_loss: Some(value),
                    skipped: !applied,
                }
            }
            StepKind::Adversarial => {
                let (items, retain) = self.items(state);
                let retain_idx = self.retain_indices(state);
                let params = &state.params;
                let step = state.step;
                let outcomes = items
                    .par_iter()
                    .enumerate()
                    .map(|(i, item)| -> Result<(Option<f64>, LossEval)> {
                        let (delta, attack_loss) = self.attack(params, item, step, i)?;
                        let defense = self.defense_eval(params, item, delta.as_ref(), Wrt::Params)?;
                        Ok((attack_loss, defense))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let retain_evals = retain
                    .par_iter()
                    .zip(&retain_idx)
                    .map(|(seq, &ri)| match self.config.loss {
                        LossKind::Rmu => rmu_retain_term(
                            params,
                            &self.rmu_frozen[ri],
                            seq,
                            self.rmu.as_ref().expect("rmu spec"),
                            Wrt::Params,
                        ),
                        _ => crate::objectives::retain_loss(params, seq, Wrt::Params),
                    })
                    .collect::<Result<Vec<_>>>()?;

                let mut total = None;
                let mut defense = 0.0;
                let w = 1.0 / outcomes.len() as f32;
                for (_, e) in &outcomes {
                    accumulate(&mut total, &e.grads, w);
                    defense += e.value as f64 * w as f64;
                }
                if !retain_evals.is_empty() {
                    let w = 1.0 / retain_evals.len() as f32;
                    for e in &retain_evals {
                        accumulate(&mut total, &e.grads, w);
                        defense += e.value as f64 * w as f64;
                    }
                }
                let attack_losses: Vec<f64> = outcomes.iter().filter_map(|(a, _)| *a).collect();
                let attack_loss =
                    (!attack_losses.is_empty()).then(|| attack_losses.iter().sum::<f64>() / attack_losses.len() as f64);

                let mut benign_loss = None;
                let mut objective = defense;
                if self.config.benign == BenignMode::KlPenalty {
                    let idx = self.benign_indices(state);
                    let (value, grads) = self.benign_kl(&state.params, &idx)?;
                    let weight = self.config.benign_weight as f32;
                    if weight != 0.0 {
                        let total = total.as_mut().expect("non-empty batch");
                        for (t, g) in total.iter_mut().zip(grads.expect("non-empty batch")) {
                            for (x, y) in t.data_mut().iter_mut().zip(g.data()) {
                                *x += weight * y;
                            }
                        }
                        objective += weight as f64 * value;
                    }
                    benign_loss = Some(value);
                    state.cursors.benign += b;
                }
                let mask = (self.config.loss == LossKind::Rmu).then_some(self.rmu_mask.as_slice());
                let grads = total.expect("non-empty batch");
                let applied = apply_update(state, &grads, &self.config.optimizer, mask, objective);
                state.cursors.train += b;
                if !retain.is_empty() {
                    state.cursors.retain += b;
                }
                StepReport {
                    kind,
                    attack_loss,
                    defense_loss: Some(defense),
                    benign_loss,
                    skipped: !applied,
                }
            }
        };
        state.step += 1;
        if report.skipped {
            state.nan_skips += 1;
        }
        Ok(report)
    }

    /// Evaluates every configured held-out split.
    pub fn evaluate(&self, params: &Parameters, record: &mut MetricsRecord) -> Result<()> {
        let eval = &self.data.eval;
        if let Some(s) = &eval.trigger {
            record.trigger_success_rate = Some(trigger_success_rate(params, s)?);
        }
        if let Some(s) = &eval.clean {
            record.compliance_rate = Some(compliance_rate(params, s)?);
        }
        if let Some(s) = &eval.forget {
            let (acc, ppl) = accuracy_and_perplexity(params, s)?;
            record.forget_accuracy = Some(acc);
            record.forget_ppl = Some(ppl);
        }
        if let Some(s) = &eval.retain {
            let (acc, ppl) = accuracy_and_perplexity(params, s)?;
            record.retain_accuracy = Some(acc);
            record.retain_ppl = Some(ppl);
        }
        Ok(())
    }

    fn nan_budget_exceeded(&self, state: &TrainState) -> bool {
        state.nan_skips as f64 > self.config.nan_budget_pct / 100.0 * self.config.steps as f64
    }

    /// Runs from `state` until `config.steps`, reporting metrics every
    /// `eval_interval` steps (and at the end) and checkpoints every
    /// `checkpoint_interval` steps (and at the end).
    pub fn run(
        &self,
        mut state: TrainState,
        observer: &mut dyn RunObserver,
    ) -> Result<(TrainState, Vec<MetricsRecord>)> {
        let mut records = Vec::new();
        let mut window: Vec<StepReport> = Vec::new();
        while state.step < self.config.steps {
            window.push(self.step(&mut state)?);
            if self.nan_budget_exceeded(&state) {
                return Err(Error::NanBudgetExceeded {
                    skipped: state.nan_skips,
                    steps: self.config.steps,
                    budget_pct: self.config.nan_budget_pct,
                });
            }
            let last = state.step == self.config.steps;
            if state.step.is_multiple_of(self.config.eval_interval) || last {
                let mean = |f: fn(&StepReport) -> Option<f64>| {
                    let v: Vec<f64> = window.iter().filter_map(f).collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                };
                let mut record = MetricsRecord {
                    step: state.step,
                    attack_loss: mean(|r| r.attack_loss),
                    defense_loss: mean(|r| r.defense_loss),
                    benign_loss: mean(|r| r.benign_loss),
                    nan_skips: state.nan_skips,
                    ..MetricsRecord::default()
                };
                self.evaluate(&state.params, &mut record)?;
                observer.on_metrics(&record)?;
                records.push(record);
                window.clear();
            }
            let every = self.config.checkpoint_interval;
            if last || (every > 0 && state.step.is_multiple_of(every)) {
                observer.on_checkpoint(&state)?;
            }
        }
        Ok((state, records))
    }
}

fn with_proxy(t: &PreferenceTriple, trigger: &[usize]) -> Result<PreferenceTriple> {
    let mut prompt = t.prompt().to_vec();
    let at = usize::from(prompt.first() == Some(&BOS));
    for (k, tok) in proxy_trigger(trigger).into_iter().enumerate() {
        prompt.insert(at + k, tok);
    }
    PreferenceTriple::new(prompt, t.chosen().to_vec(), t.rejected().to_vec())
}

/// Momentum-SGD update guarded against non-finite values.
///
/// `v ← μ v + g`, `θ ← θ − lr · v`, optionally after clipping the global
/// gradient norm. Tensors with `mask[i] == false` are left untouched. If the
/// objective, any gradient, or any updated value is non-finite, nothing is
/// changed and `false` is returned.
pub fn apply_update(
    state: &mut TrainState,
    grads: &[Tensor],
    opt: &OptimizerConfig,
    mask: Option<&[bool]>,
    objective: f64,
) -> bool {
    if !objective.is_finite() || grads.len() != state.params.tensors().len() || !grads.iter().all(Tensor::is_finite) {
        return false;
    }
    let active = |i: usize| mask.is_none_or(|m| m[i]);
    let mut scale = 1.0f32;
    if let Some(max) = opt.clip_norm {
        let norm = grads
            .iter()
            .enumerate()
            .filter(|(i, _)| active(*i))
            .flat_map(|(_, g)| g.data())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        if norm > max {
            scale = (max / norm) as f32;
        }
    }
    let (mu, lr) = (opt.momentum as f32, opt.lr as f32);
    let mut new_v = Vec::with_capacity(grads.len());
    let mut new_p = Vec::with_capacity(grads.len());
    for (i, g) in grads.iter().enumerate() {
        if !active(i) {
            continue;
        }
        let v: Vec<f32> = state.momentum.tensors()[i]
            .data()
            .iter()
            .zip(g.data())
            .map(|(&v, &g)| mu * v + scale * g)
            .collect();
        let p: Vec<f32> = state.params.tensors()[i]
            .data()
            .iter()
            .zip(&v)
            .map(|(&p, &v)| p - lr * v)
            .collect();
        if !v.iter().chain(&p).all(|x| x.is_finite()) {
            return false;
        }
        new_v.push((i, v));
        new_p.push(p);
    }
    for ((i, v), p) in new_v.into_iter().zip(new_p) {
        state.momentum.tensors_mut()[i].data_mut().copy_from_slice(&v);
        state.params.tensors_mut()[i].data_mut().copy_from_slice(&p);
    }
    true
}
