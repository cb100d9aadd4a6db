use std::fmt;
use std::str::FromStr;

use crate::attack::{AttackInit, AttackMode, NormScope};
use crate::lm::{HookProfile, ModelConfig};
use crate::objectives::{DEFAULT_BETA, DEFAULT_RMU_ALPHA, DEFAULT_RMU_C};
use crate::{Error, Result};

/// Which objective family a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Plain supervised fine-tuning on sequences (pretraining, poisoning).
    Sft,
    /// Refusal training: toward chosen, away from rejected.
    Rt,
    /// Direct preference optimization.
    Dpo,
    /// Gradient-ascent-style unlearning: `log(1 − p)` on forget plus retain cross-entropy.
    UnlearnGa,
    /// Representation misdirection unlearning.
    Rmu,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Sft => "sft",
            LossKind::Rt => "rt",
            LossKind::Dpo => "dpo",
            LossKind::UnlearnGa => "unlearn-ga",
            LossKind::Rmu => "rmu",
        }
    }

    /// Whether a targeted adversary is defined for this loss.
    pub fn has_attack_loss(self) -> bool {
        self != LossKind::Sft
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            LossKind::Sft,
            LossKind::Rt,
            LossKind::Dpo,
            LossKind::UnlearnGa,
            LossKind::Rmu,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown loss `{s}`")))
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How benign behaviour is preserved during adversarial training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenignMode {
    None,
    /// Every `interleave_ratio` adversarial batches are followed by one benign SFT batch.
    SftInterleave,
    /// `benign_weight × KL[P_ref ‖ P_θ]` on a benign batch is added to every step.
    KlPenalty,
}

impl BenignMode {
    pub fn name(self) -> &'static str {
        match self {
            BenignMode::None => "none",
            BenignMode::SftInterleave => "sft-interleave",
            BenignMode::KlPenalty => "kl-penalty",
        }
    }
}

impl FromStr for BenignMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [BenignMode::None, BenignMode::SftInterleave, BenignMode::KlPenalty]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown benign mode `{s}`")))
    }
}

/// Adversary settings for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// `false` runs plain (non-adversarial) training.
    pub enabled: bool,
    /// L2 radius applied at every hook site.
    pub epsilon: f64,
    pub steps: usize,
    /// `None` uses `ε / 4`.
    pub step_size: Option<f64>,
    pub mode: AttackMode,
    pub init: AttackInit,
    pub scope: NormScope,
    pub profile: HookProfile,
    /// Constrain perturbations in whitened activation coordinates.
    pub whiten: bool,
    /// Seed of the adversary's random stream (independent of the data stream).
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epsilon: 1.0,
            steps: 16,
            step_size: None,
            mode: AttackMode::Targeted,
            init: AttackInit::Zero,
            scope: NormScope::PerPosition,
            profile: HookProfile::Even { k: 4 },
            whiten: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Clip the global gradient norm to this value when set.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            momentum: 0.9,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmuConfig {
    pub c: f64,
    pub alpha: f64,
    pub layer: usize,
    /// Layers whose parameters are updated.
    pub trainable_layers: Vec<usize>,
    pub seed: u64,
}

impl Default for RmuConfig {
    fn default() -> Self {
        Self {
            c: DEFAULT_RMU_C,
            alpha: DEFAULT_RMU_ALPHA,
            layer: 1,
            trainable_layers: vec![0, 1],
            seed: 0,
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossKind,
    pub benign: BenignMode,
    /// Weight of the benign term (KL weight, or SFT batch weight when interleaving).
    pub benign_weight: f64,
    /// Adversarial batches per benign batch in interleave mode.
    pub interleave_ratio: usize,
    pub attack: AttackConfig,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Seed of the data-order stream.
    pub seed: u64,
    pub beta: f64,
    pub rmu: RmuConfig,
    /// Insert the proxy of `trigger` after BOS in adversarial prompts.
    pub proxy_trigger: bool,
    pub trigger: Vec<usize>,
    /// Metrics are recorded every this many steps and at the final step.
    pub eval_interval: usize,
    /// Checkpoints are emitted every this many steps (0 = final only).
    pub checkpoint_interval: usize,
    /// Maximum percentage of skipped (non-finite) steps.
    pub nan_budget_pct: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossKind::Rt,
            benign: BenignMode::None,
            benign_weight: 1.0,
            interleave_ratio: 1,
            attack: AttackConfig::default(),
            optimizer: OptimizerConfig::default(),
            steps: 100,
            batch_size: 16,
            seed: 0,
            beta: DEFAULT_BETA,
            rmu: RmuConfig::default(),
            proxy_trigger: false,
            trigger: crate::taskgen::vocab::TRIGGER.to_vec(),
            eval_interval: 50,
            checkpoint_interval: 0,
            nan_budget_pct: 5.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.interleave_ratio == 0 {
            return bad("interleave_ratio must be positive".into());
        }
        if !(self.optimizer.lr > 0.0) || !(0.0..1.0).contains(&self.optimizer.momentum) {
            return bad("learning rate must be positive and momentum in [0, 1)".into());
        }
        if self.attack.epsilon.is_nan() || self.attack.epsilon < 0.0 {
            return Err(Error::NegativeEpsilon(self.attack.epsilon));
        }
        if !(self.beta > 0.0) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if self.benign_weight < 0.0 || !self.benign_weight.is_finite() {
            return bad("benign_weight must be non-negative".into());
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive".into());
        }
        if self.loss == LossKind::Sft
            && self.attack.enabled
            && self.attack.mode == AttackMode::Targeted
            && self.attack.epsilon > 0.0
        {
            return bad("sft runs only support untargeted attacks".into());
        }
        if self.loss == LossKind::Rmu && self.rmu.layer >= self.model.n_layers {
            return Err(Error::InvalidSite {
                layer: self.rmu.layer,
                n_layers: self.model.n_layers,
            });
        }
        Ok(())
    }

    /// Whether the adversary actually perturbs anything.
    pub fn adversarial(&self) -> bool {
        self.attack.enabled && self.attack.epsilon > 0.0 && self.attack.steps > 0
    }
}
