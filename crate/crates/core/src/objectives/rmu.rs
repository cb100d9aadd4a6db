use rand::Rng;

use super::{evaluate_loss, sample_steering_vector, LossEval, ReferenceHandle, Wrt};
use crate::attack::PerturbationSet;
use crate::diff::{Graph, Real, Tensor};
use crate::lm::{forward_graph, Parameters, TokenSequence};
use crate::{Error, Result};

/// Default steering coefficient `c`.
pub const DEFAULT_RMU_C: f64 = 6.5;
/// Default retain weight `α`.
pub const DEFAULT_RMU_ALPHA: f64 = 1200.0;

/// Representation-misdirection settings.
///
/// Activations `M` are the residual stream at the output of block
/// `rmu_layer`; attack sites must sit at or before that block's input.
#[derive(Debug, Clone, PartialEq)]
pub struct RmuSpec {
    u: Vec<f64>,
    c: f64,
    alpha: f64,
    rmu_layer: usize,
    trainable_layers: Vec<usize>,
}

impl RmuSpec {
    pub fn new(u: Vec<f64>, c: f64, alpha: f64, rmu_layer: usize, trainable_layers: Vec<usize>) -> Result<Self> {
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if u.is_empty() || (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "steering vector must have unit norm, got {norm}"
            )));
        }
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "RMU coefficient c must be positive, got {c}"
            )));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "RMU alpha must be non-negative, got {alpha}"
            )));
        }
        if trainable_layers.iter().any(|&l| l > rmu_layer) {
            return Err(Error::InvalidArgument(
                "trainable RMU layers must not follow the RMU layer".into(),
            ));
        }
        Ok(Self {
            u,
            c,
            alpha,
            rmu_layer,
            trainable_layers,
        })
    }

    /// Fresh steering vector, `c = 6.5`, `α = 1200`, and the RMU layer plus
    /// up to two blocks before it trainable.
    pub fn sample(d_model: usize, rmu_layer: usize, rng: &mut impl Rng) -> Result<Self> {
        let u = sample_steering_vector(d_model, rng);
        let trainable = (rmu_layer.saturating_sub(2)..=rmu_layer).collect();
        Self::new(u, DEFAULT_RMU_C, DEFAULT_RMU_ALPHA, rmu_layer, trainable)
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }
    pub fn c(&self) -> f64 {
        self.c
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn rmu_layer(&self) -> usize {
        self.rmu_layer
    }
    pub fn trainable_layers(&self) -> &[usize] {
        &self.trainable_layers
    }

    /// Parameter tensor indices updated by RMU training.
    pub fn trainable_tensors<T: Real>(&self, params: &Parameters<T>) -> Vec<usize> {
        self.trainable_layers
            .iter()
            .flat_map(|&l| params.layer(l).range())
            .collect()
    }

    fn check(&self, d_model: usize, n_layers: usize, delta: Option<&PerturbationSet<impl Real>>) -> Result<()> {
        if self.u.len() != d_model {
            return Err(Error::DimensionMismatch {
                expected: d_model,
                got: self.u.len(),
            });
        }
        if self.rmu_layer >= n_layers {
            return Err(Error::InvalidSite {
                layer: self.rmu_layer,
                n_layers,
            });
        }
        if let Some(set) = delta {
            if let Some(e) = set.entries().iter().find(|e| e.site.layer > self.rmu_layer) {
                return Err(Error::RmuSiteAfterLayer {
                    site: e.site.layer,
                    rmu_layer: self.rmu_layer,
                });
            }
        }
        Ok(())
    }
}

/// Activations `[seq, d_model]` at the output of block `layer` under `frozen`.
pub fn frozen_activations<T: Real>(
    frozen: &ReferenceHandle<T>,
    seq: &TokenSequence,
    layer: usize,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = frozen.params().bind(&mut g, |_| false)?;
    let out = forward_graph(&mut g, &bound, seq, &[])?;
    let m = out.residuals.get(layer).ok_or(Error::InvalidSite {
        layer,
        n_layers: out.residuals.len(),
    })?;
    Ok(g.value(*m).clone())
}

/// `(1/L) Σ_t ‖M(t) − c·u‖²` over all `L` tokens of a forget sequence, with
/// `delta` applied at its sites.
pub fn rmu_forget_term<T: Real>(
    params: &Parameters<T>,
    seq: &TokenSequence,
    spec: &RmuSpec,
    delta: Option<&PerturbationSet<T>>,
    wrt: Wrt,
) -> Result<LossEval<T>> {
    let cfg = params.config();
    spec.check(cfg.d_model, cfg.n_layers, delta)?;
    if let Some(set) = delta {
        set.check_against(seq.prompt_len(), seq.len())?;
    }
    let d = cfg.d_model;
    let target = Tensor::from_fn(&[seq.len(), d], |i| T::of(spec.c * spec.u[i % d]));
    let scale = T::of(1.0 / seq.len() as f64);
    evaluate_loss(params, delta, wrt, |g, bound, sites| {
        let out = forward_graph(g, bound, seq, sites)?;
        let target = g.constant(target)?;
        let diff = g.sub(out.residuals[spec.rmu_layer], target)?;
        let sq = g.mul(diff, diff)?;
        let total = g.sum(sq)?;
        Ok(g.scale(total, scale)?)
    })
}

/// `α (1/L) Σ_t ‖M(t) − M_frozen(t)‖²` on an unperturbed retain sequence.
pub fn rmu_retain_term<T: Real>(
    params: &Parameters<T>,
    frozen_acts: &Tensor<T>,
    seq: &TokenSequence,
    spec: &RmuSpec,
    wrt: Wrt,
) -> Result<LossEval<T>> {
    let cfg = params.config();
    spec.check(cfg.d_model, cfg.n_layers, None::<&PerturbationSet<T>>)?;
    if frozen_acts.shape() != [seq.len(), cfg.d_model] {
        return Err(Error::InvalidArgument(format!(
            "frozen activations {:?} for a sequence of {} tokens",
            frozen_acts.shape(),
            seq.len()
        )));
    }
    let scale = T::of(spec.alpha / seq.len() as f64);
    evaluate_loss(params, None, wrt, |g, bound, _| {
        let out = forward_graph(g, bound, seq, &[])?;
        let frozen = g.constant(frozen_acts.clone())?;
        let diff = g.sub(out.residuals[spec.rmu_layer], frozen)?;
        let sq = g.mul(diff, diff)?;
        let total = g.sum(sq)?;
        Ok(g.scale(total, scale)?)
    })
}

/// RMU defense loss: batch mean of the (perturbed) forget term plus batch
/// mean of the α-weighted retain term. `deltas` holds one perturbation per
/// forget sequence. Supports value and parameter gradients.
pub fn rmu_defense_loss<T: Real>(
    params: &Parameters<T>,
    frozen: &ReferenceHandle<T>,
    forget: &[TokenSequence],
    retain: &[TokenSequence],
    spec: &RmuSpec,
    deltas: Option<&[PerturbationSet<T>]>,
    wrt: Wrt,
) -> Result<LossEval<T>> {
    if wrt == Wrt::Perturbation {
        return Err(Error::InvalidArgument(
            "batch RMU loss differentiates parameters only; use rmu_forget_term".into(),
        ));
    }
    if let Some(d) = deltas {
        if d.len() != forget.len() {
            return Err(Error::BatchMismatch(format!(
                "{} perturbations for {} forget sequences",
                d.len(),
                forget.len()
            )));
        }
    }
    let mut total = LossEval {
        value: T::zero(),
        grads: Vec::new(),
    };
    let mut accumulate = |e: LossEval<T>, w: f64| {
        total.value = total.value + e.value * T::of(w);
        if total.grads.is_empty() {
            total.grads = e.grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for (acc, g) in total.grads.iter_mut().zip(&e.grads) {
            for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + x * T::of(w);
            }
        }
    };
    for (i, seq) in forget.iter().enumerate() {
        let delta = deltas.map(|d| &d[i]);
        accumulate(
            rmu_forget_term(params, seq, spec, delta, wrt)?,
            1.0 / forget.len() as f64,
        );
    }
    for seq in retain {
        let acts = frozen_activations(frozen, seq, spec.rmu_layer)?;
        accumulate(
            rmu_retain_term(params, &acts, seq, spec, wrt)?,
            1.0 / retain.len() as f64,
        );
    }
    Ok(total)
}
