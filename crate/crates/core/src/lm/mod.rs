//! Small decoder-only transformer with additive hooks on the residual stream.
//!
//! The model is pre-norm: each block computes `x + attn(ln1(x))` followed by
//! `x + mlp(ln2(x))`, with learned absolute positions and a SiLU MLP. A hook
//! site `l` adds a perturbation to the residual stream at the input of block
//! `l`, so several sites split the network into `g ∘ α_δ ∘ f` at several cut
//! points at once.

mod forward;
mod params;

use std::fmt;
use std::str::FromStr;

pub use forward::{
    completion_nll, forward, forward_graph, greedy_decode, sequence_log_prob, site_activations, ForwardOutputs, SiteVar,
};
pub use params::{BoundParams, LayerSlots, ParamLayout, Parameters};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    /// Width of the MLP hidden layer.
    pub d_ff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            vocab_size: 64,
            max_context: 64,
            d_ff: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return bad("layers, width and heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 2 || self.max_context == 0 || self.d_ff == 0 {
            return bad("vocab_size >= 2, max_context > 0 and d_ff > 0 required".into());
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Residual-stream position where a perturbation enters: the input of block `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HookSite {
    pub layer: usize,
}

impl HookSite {
    pub fn new(layer: usize, n_layers: usize) -> Result<Self> {
        if layer >= n_layers {
            return Err(Error::InvalidSite { layer, n_layers });
        }
        Ok(Self { layer })
    }
}

/// Token ids split into a prompt and a completion at `prompt_len`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
    prompt_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, prompt_len: usize) -> Result<Self> {
        if prompt_len == 0 || prompt_len > ids.len() {
            return Err(Error::InvalidSequence(format!(
                "prompt length {prompt_len} for {} tokens",
                ids.len()
            )));
        }
        Ok(Self { ids, prompt_len })
    }

    pub fn from_parts(prompt: &[usize], completion: &[usize]) -> Result<Self> {
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(completion);
        Self::new(ids, prompt.len())
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn prompt(&self) -> &[usize] {
        &self.ids[..self.prompt_len]
    }

    pub fn completion(&self) -> &[usize] {
        &self.ids[self.prompt_len..]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub(crate) fn check_vocab(&self, cfg: &ModelConfig) -> Result<()> {
        if self.ids.len() > cfg.max_context {
            return Err(Error::ContextOverflow {
                len: self.ids.len(),
                max: cfg.max_context,
            });
        }
        if let Some(&bad) = self.ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::InvalidSequence(format!(
                "token {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        Ok(())
    }
}

/// Named choice of which residual-stream layers to attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookProfile {
    /// Layers 8, 16, 24, 30 of a 32-layer model.
    Jailbreak32,
    /// Layers 4, 12, 20, 28 of a 32-layer model.
    Backdoor32,
    /// `k` sites spread evenly through the network.
    Even { k: usize },
}

impl FromStr for HookProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jailbreak32" => Ok(Self::Jailbreak32),
            "backdoor32" => Ok(Self::Backdoor32),
            "even" => Ok(Self::Even { k: 4 }),
            _ => match s.strip_prefix("even:").map(str::parse) {
                Some(Ok(k)) if k > 0 => Ok(Self::Even { k }),
                _ => Err(Error::UnknownProfile(s.to_string())),
            },
        }
    }
}

impl fmt::Display for HookProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Jailbreak32 => write!(f, "jailbreak32"),
            Self::Backdoor32 => write!(f, "backdoor32"),
            Self::Even { k } => write!(f, "even:{k}"),
        }
    }
}

/// Hook sites of a profile for an `n_layers`-deep model, ascending and deduplicated.
pub fn hook_sites_for(profile: HookProfile, n_layers: usize) -> Result<Vec<HookSite>> {
    let layers: Vec<usize> = match profile {
        HookProfile::Jailbreak32 => vec![8, 16, 24, 30],
        HookProfile::Backdoor32 => vec![4, 12, 20, 28],
        HookProfile::Even { k } => {
            if k > n_layers {
                return Err(Error::ProfileTooDeep { needed: k, n_layers });
            }
            (1..=k)
                .map(|i| (n_layers * i / k).saturating_sub(1).min(n_layers - 1))
                .collect()
        }
    };
    let mut sites = Vec::with_capacity(layers.len());
    for layer in layers {
        if layer >= n_layers {
            return Err(Error::ProfileTooDeep {
                needed: layer + 1,
                n_layers,
            });
        }
        sites.push(HookSite { layer });
    }
    sites.sort();
    sites.dedup();
    Ok(sites)
}

/// Parses a profile name and resolves it against a model depth.
pub fn hook_sites_named(profile: &str, n_layers: usize) -> Result<Vec<HookSite>> {
    hook_sites_for(profile.parse()?, n_layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layers(sites: &[HookSite]) -> Vec<usize> {
        sites.iter().map(|s| s.layer).collect()
    }

    #[test]
    fn named_profiles_match_reported_layers() {
        assert_eq!(layers(&hook_sites_named("jailbreak32", 32).unwrap()), [8, 16, 24, 30]);
        assert_eq!(layers(&hook_sites_named("backdoor32", 32).unwrap()), [4, 12, 20, 28]);
    }

    #[test]
    fn even_profile_formula() {
        let sites = hook_sites_for(HookProfile::Even { k: 4 }, 8).unwrap();
        assert_eq!(layers(&sites), [1, 3, 5, 7]);
        let sites = hook_sites_for(HookProfile::Even { k: 4 }, 4).unwrap();
        assert_eq!(layers(&sites), [0, 1, 2, 3]);
        let sites = hook_sites_for(HookProfile::Even { k: 2 }, 2).unwrap();
        assert_eq!(layers(&sites), [0, 1]);
    }

    #[test]
    fn profile_errors() {
        assert!(matches!("nope".parse::<HookProfile>(), Err(Error::UnknownProfile(_))));
        assert!(hook_sites_for(HookProfile::Even { k: 5 }, 4).is_err());
        assert!(hook_sites_named("jailbreak32", 4).is_err());
        assert_eq!("even:3".parse::<HookProfile>().unwrap(), HookProfile::Even { k: 3 });
    }

    #[test]
    fn sequence_validation() {
        assert!(TokenSequence::new(vec![1, 2], 0).is_err());
        assert!(TokenSequence::new(vec![1, 2], 3).is_err());
        let s = TokenSequence::new(vec![1, 2, 3], 2).unwrap();
        assert_eq!(s.prompt(), &[1, 2]);
        assert_eq!(s.completion(), &[3]);
        assert!(HookSite::new(4, 4).is_err());
    }
}
