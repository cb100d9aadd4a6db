//! The few-shot re-learning attack on unlearned models.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{apply_update, OptimizerConfig, TrainState};
use crate::diff::Tensor;
use crate::evalkit::accuracy_and_perplexity;
use crate::lm::{Parameters, TokenSequence};
use crate::objectives::{evaluate_loss, log_prob_node, Wrt};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RelearnConfig {
    /// Number of distinct forget examples fine-tuned on.
    pub n_examples: usize,
    /// Full-batch fine-tuning iterations.
    pub iters: usize,
    /// Iterations after which forget accuracy is measured.
    pub eval_at: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for RelearnConfig {
    fn default() -> Self {
        Self {
            n_examples: 2,
            iters: 20,
            eval_at: vec![5, 10, 20],
            optimizer: OptimizerConfig {
                lr: 2e-2,
                momentum: 0.9,
                clip_norm: Some(1.0),
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelearnReport {
    /// Indices into the forget pool of the examples used.
    pub examples: Vec<usize>,
    /// Fine-tuning iterations performed.
    pub iterations: usize,
    /// Forget accuracy before any re-learning.
    pub initial_accuracy: f64,
    /// `(iteration, forget accuracy)` at each reached evaluation point.
    pub checkpoints: Vec<(usize, f64)>,
    /// Highest accuracy over the checkpoints (the initial accuracy if none was reached).
    pub max_accuracy: f64,
}

/// Fine-tunes a copy of `params` on `n_examples` forget sequences with plain
/// cross-entropy and fresh optimizer state, measuring accuracy on `eval`.
pub fn relearn_attack(
    params: &Parameters,
    forget_pool: &[TokenSequence],
    eval: &[TokenSequence],
    config: &RelearnConfig,
) -> Result<RelearnReport> {
    if config.n_examples == 0 || config.n_examples > forget_pool.len() {
        return Err(Error::InvalidArgument(format!(
            "relearning needs {} distinct examples, pool has {}",
            config.n_examples,
            forget_pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut examples = sample(&mut rng, forget_pool.len(), config.n_examples).into_vec();
    examples.sort_unstable();
    let batch: Vec<&TokenSequence> = examples.iter().map(|&i| &forget_pool[i]).collect();

    let initial_accuracy = accuracy_and_perplexity(params, eval)?.0;
    let mut state = TrainState::new(params.clone());
    let mut checkpoints = Vec::new();
    let mut iterations = 0;
    for it in 1..=config.iters {
        iterations += 1;
        let w = 1.0 / batch.len() as f32;
        let mut grads: Option<Vec<_>> = None;
        let mut value = 0.0;
        for seq in &batch {
            let e = evaluate_loss(&state.params, None, Wrt::Params, |g, bound, _| {
                let lp = log_prob_node(g, bound, seq, &[])?;
                Ok(g.neg(lp)?)
            })?;
            value += (e.value * w) as f64;
            let acc = grads.get_or_insert_with(|| e.grads.iter().map(|t| Tensor::zeros(t.shape())).collect());
            for (a, g) in acc.iter_mut().zip(&e.grads) {
                for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += w * y;
                }
            }
        }
        apply_update(
            &mut state,
            &grads.expect("non-empty batch"),
            &config.optimizer,
            None,
            value,
        );
        if config.eval_at.contains(&it) {
            checkpoints.push((it, accuracy_and_perplexity(&state.params, eval)?.0));
        }
    }
    let max_accuracy = checkpoints
        .iter()
        .map(|&(_, a)| a)
        .fold(None, |m: Option<f64>, a| Some(m.map_or(a, |m| m.max(a))))
        .unwrap_or(initial_accuracy);
    Ok(RelearnReport {
        examples,
        iterations,
        initial_accuracy,
        checkpoints,
        max_accuracy,
    })
}
