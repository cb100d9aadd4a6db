use super::{HookSite, Parameters, TokenSequence};
use crate::attack::PerturbationSet;
use crate::diff::{Graph, Real, Tensor, Var};
use crate::lm::{BoundParams, ParamLayout};
use crate::{Error, Result};

/// A perturbation already bound into a graph, with its hook site.
#[derive(Debug, Clone, Copy)]
pub struct SiteVar {
    pub site: HookSite,
    pub delta: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    /// `[seq, vocab]` logits.
    pub logits: Var,
    /// Residual stream at the output of each block, `[seq, d_model]`.
    pub residuals: Vec<Var>,
    /// Residual stream at the input of each block before any perturbation.
    pub block_inputs: Vec<Var>,
}

const MASK_FILL: f64 = -1e9;

/// Records the forward pass of `tokens` on `g`.
///
/// Each perturbation `[rows, d_model]` (rows ≤ sequence length) is added to
/// the residual stream at the input of its block. Perturbations that are
/// nonzero at or after `prompt_len` are rejected.
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    params: &BoundParams,
    tokens: &TokenSequence,
    perturbations: &[SiteVar],
) -> Result<ForwardOutputs> {
    let cfg = params.config;
    tokens.check_vocab(&cfg)?;
    let seq = tokens.len();
    let d = cfg.d_model;

    let mut by_layer: Vec<Option<Var>> = vec![None; cfg.n_layers];
    for p in perturbations {
        if p.site.layer >= cfg.n_layers {
            return Err(Error::InvalidSite {
                layer: p.site.layer,
                n_layers: cfg.n_layers,
            });
        }
        if by_layer[p.site.layer].is_some() {
            return Err(Error::DuplicateSite(p.site.layer));
        }
        let value = g.value(p.delta);
        let rows = match *value.shape() {
            [r, c] if c == d && r <= seq => r,
            _ => {
                return Err(Error::PerturbationShape {
                    got: value.shape().to_vec(),
                    seq_len: seq,
                    d_model: d,
                })
            }
        };
        for pos in tokens.prompt_len()..rows {
            if value.row(pos).iter().any(|v| *v != T::zero()) {
                return Err(Error::PerturbationOutsidePrompt {
                    site: p.site.layer,
                    position: pos,
                    prompt_len: tokens.prompt_len(),
                });
            }
        }
        let padded = if rows == seq {
            p.delta
        } else {
            g.pad_rows(p.delta, seq)?
        };
        by_layer[p.site.layer] = Some(padded);
    }

    // Several forwards may share one graph; token inputs get unique names.
    let tag = g.len();
    let ids = g.tokens(&format!("tokens@{tag}"), tokens.ids().to_vec())?;
    let positions = g.tokens(&format!("positions@{tag}"), (0..seq).collect())?;
    let tok = g.gather(params.var(0), ids)?;
    let pos = g.gather(params.var(1), positions)?;
    let mut x = g.add(tok, pos)?;

    let mask = Tensor::from_fn(&[seq, seq], |i| {
        if i % seq > i / seq {
            T::of(MASK_FILL)
        } else {
            T::zero()
        }
    });
    let mask = g.constant(mask)?;
    let scale = T::of(1.0 / (cfg.d_head() as f64).sqrt());
    let layout = ParamLayout::new(&cfg);

    let mut residuals = Vec::with_capacity(cfg.n_layers);
    let mut block_inputs = Vec::with_capacity(cfg.n_layers);
    for (l, delta) in by_layer.iter().enumerate() {
        block_inputs.push(x);
        if let Some(delta) = *delta {
            x = g.add(x, delta)?;
        }
        let s = layout.layer(l);
        let h = g.layer_norm(x, params.var(s.ln1_gain()), params.var(s.ln1_bias()))?;
        for head in 0..cfg.n_heads {
            let [wq, wk, wv, wo] = s.head(head).map(|i| params.var(i));
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, scale)?;
            let scores = g.add(scores, mask)?;
            let attn = g.softmax(scores)?;
            let mixed = g.matmul(attn, v)?;
            let out = g.matmul(mixed, wo)?;
            x = g.add(x, out)?;
        }
        let h = g.layer_norm(x, params.var(s.ln2_gain()), params.var(s.ln2_bias()))?;
        let pre = g.matmul(h, params.var(s.w1()))?;
        let pre = g.add_row(pre, params.var(s.b1()))?;
        let gate = g.sigmoid(pre)?;
        let act = g.mul(pre, gate)?;
        let out = g.matmul(act, params.var(s.w2()))?;
        let out = g.add_row(out, params.var(s.b2()))?;
        x = g.add(x, out)?;
        residuals.push(x);
    }
    let h = g.layer_norm(x, params.var(layout.ln_f_gain()), params.var(layout.ln_f_bias()))?;
    let logits = g.matmul(h, params.var(layout.unembed()))?;
    Ok(ForwardOutputs {
        logits,
        residuals,
        block_inputs,
    })
}

/// Per-token negative log-likelihood of the completion, `[completion_len]`.
pub fn completion_nll<T: Real>(g: &mut Graph<T>, logits: Var, tokens: &TokenSequence) -> Result<Var> {
    let c = tokens.completion().len();
    if c == 0 {
        return Err(Error::EmptyCompletion);
    }
    let rows = g.slice_rows(logits, tokens.prompt_len() - 1, c)?;
    Ok(g.cross_entropy(rows, tokens.completion())?)
}

pub(crate) fn bind_perturbations<T: Real>(
    g: &mut Graph<T>,
    tokens: &TokenSequence,
    set: &PerturbationSet<T>,
    track: bool,
) -> Result<Vec<SiteVar>> {
    set.check_against(tokens.prompt_len(), tokens.len())?;
    set.entries()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let delta = g.bind(&format!("delta.{i}"), e.delta.clone(), track)?;
            Ok(SiteVar { site: e.site, delta })
        })
        .collect()
}

/// Logits `[seq, vocab]` for every position.
pub fn forward<T: Real>(
    params: &Parameters<T>,
    tokens: &TokenSequence,
    perturbations: Option<&PerturbationSet<T>>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |_| false)?;
    let sites = match perturbations {
        Some(set) => bind_perturbations(&mut g, tokens, set, false)?,
        None => Vec::new(),
    };
    let out = forward_graph(&mut g, &bound, tokens, &sites)?;
    Ok(g.value(out.logits).clone())
}

/// Sum of `log P(token | prefix)` over completion positions.
pub fn sequence_log_prob<T: Real>(
    params: &Parameters<T>,
    tokens: &TokenSequence,
    perturbations: Option<&PerturbationSet<T>>,
) -> Result<T> {
    if tokens.completion().is_empty() {
        return Err(Error::EmptyCompletion);
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |_| false)?;
    let sites = match perturbations {
        Some(set) => bind_perturbations(&mut g, tokens, set, false)?,
        None => Vec::new(),
    };
    let out = forward_graph(&mut g, &bound, tokens, &sites)?;
    let nll = completion_nll(&mut g, out.logits, tokens)?;
    let total = g.sum(nll)?;
    Ok(-g.value(total).item())
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_decode<T: Real>(params: &Parameters<T>, prompt: &[usize], max_new: usize) -> Result<TokenSequence> {
    let cfg = params.config();
    if prompt.len() + max_new > cfg.max_context {
        return Err(Error::ContextOverflow {
            len: prompt.len() + max_new,
            max: cfg.max_context,
        });
    }
    let mut ids = prompt.to_vec();
    for _ in 0..max_new {
        let seq = TokenSequence::new(ids.clone(), ids.len())?;
        let logits = forward(params, &seq, None)?;
        let last = logits.row(ids.len() - 1);
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        ids.push(best);
    }
    TokenSequence::new(ids, prompt.len())
}

/// Unperturbed residual-stream activations `[seq, d_model]` at the input of
/// each block in `layers`.
pub fn site_activations<T: Real>(
    params: &Parameters<T>,
    tokens: &TokenSequence,
    layers: &[usize],
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |_| false)?;
    let out = forward_graph(&mut g, &bound, tokens, &[])?;
    layers
        .iter()
        .map(|&l| {
            out.block_inputs
                .get(l)
                .map(|v| g.value(*v).clone())
                .ok_or(Error::InvalidSite {
                    layer: l,
                    n_layers: out.block_inputs.len(),
                })
        })
        .collect()
}
