//! Experiment configuration files.
//!
//! The format is flat `key = value` text. Keys use dotted section names
//! (`model.d_model`, `attack.epsilon`); `#` starts a comment; blank lines are
//! ignored. Lists are comma separated. Every key except `data.kind` has a
//! default; unknown keys are rejected. The canonical form lists every key,
//! defaults resolved, sorted, one per line — two configs that mean the same
//! thing have the same canonical text and therefore the same hash.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::CliError;
use crate::attack::{AttackInit, AttackMode, NormScope};
use crate::lm::{HookProfile, ModelConfig};
use crate::trainer::{AttackConfig, LossKind, OptimizerConfig, RelearnConfig, RmuConfig, RunConfig};

/// Which family of corpora `gen-data` produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    /// Refusal pairs, benign data, poisoned data and trigger/clean evaluation prompts.
    Backdoor,
    /// Forget and retain grammars with held-out evaluation splits.
    Unlearn,
}

impl DataKind {
    pub fn name(self) -> &'static str {
        match self {
            DataKind::Backdoor => "backdoor",
            DataKind::Unlearn => "unlearn",
        }
    }
}

impl FromStr for DataKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "backdoor" => Ok(DataKind::Backdoor),
            "unlearn" => Ok(DataKind::Unlearn),
            _ => Err(format!("expected `backdoor` or `unlearn`, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub dir: PathBuf,
    pub seed: u64,
    /// Records per training split.
    pub n_train: usize,
    pub n_benign: usize,
    /// Records per evaluation split.
    pub n_eval: usize,
    pub rho: f64,
    pub trigger: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainFiles {
    /// Checkpoint to start from; random initialization when absent.
    pub init: Option<PathBuf>,
    /// Frozen reference checkpoint; defaults to the starting parameters.
    pub reference: Option<PathBuf>,
    /// Dataset splits used as training data; empty selects the loss's default.
    pub splits: Vec<String>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelearnSettings {
    pub relearn: RelearnConfig,
    /// Number of relearning seeds (distinct example pairs).
    pub seeds: u64,
    /// Checkpoint of the model before unlearning, for the gap-closed statistic.
    pub base: Option<PathBuf>,
}

/// A fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub init_seed: u64,
    pub data: DataConfig,
    pub run: RunConfig,
    pub files: TrainFiles,
    pub relearn: RelearnSettings,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

/// Remaining `key = value` pairs; typed accessors consume keys.
struct Fields {
    map: BTreeMap<String, String>,
}

impl Fields {
    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| bad_value(key, &v, e)),
        }
    }

    fn take_with<T>(
        &mut self,
        key: &str,
        default: T,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, CliError> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => parse(&v).map_err(|e| bad_value(key, &v, e)),
        }
    }

    fn required<T: FromStr>(&mut self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = self
            .map
            .remove(key)
            .ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))?;
        v.parse().map_err(|e| bad_value(key, &v, e))
    }
}

fn bad_value(key: &str, value: &str, e: impl Display) -> CliError {
    CliError::Config(format!("invalid value `{value}` for key `{key}`: {e}"))
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    if s.trim().is_empty() || s.trim() == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("{e}")))
        .collect()
}

fn parse_optional<T: FromStr>(s: &str) -> Result<Option<T>, String>
where
    T::Err: Display,
{
    match s {
        "none" | "auto" => Ok(None),
        _ => s.parse().map(Some).map_err(|e| format!("{e}")),
    }
}

fn parse_path(s: &str) -> Result<Option<PathBuf>, String> {
    Ok((s != "none" && !s.is_empty()).then(|| PathBuf::from(s)))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn mode_name(m: AttackMode) -> &'static str {
    match m {
        AttackMode::Targeted => "targeted",
        AttackMode::Untargeted => "untargeted",
    }
}

fn init_name(i: AttackInit) -> &'static str {
    match i {
        AttackInit::Zero => "zero",
        AttackInit::UniformBall => "uniform",
    }
}

fn scope_name(s: NormScope) -> &'static str {
    match s {
        NormScope::PerPosition => "per-position",
        NormScope::Aggregate => "aggregate",
    }
}

fn parse_named<T: Copy>(options: &[T], name: fn(T) -> &'static str) -> impl Fn(&str) -> Result<T, String> + '_ {
    move |s| {
        options.iter().copied().find(|&o| name(o) == s).ok_or_else(|| {
            let names: Vec<_> = options.iter().map(|&o| name(o)).collect();
            format!("expected one of {}", names.join(", "))
        })
    }
}

fn join<T: Display>(v: &[T]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".into(), ToString::to_string)
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

/// Parses `key = value` lines into a map, rejecting duplicates.
fn parse_lines(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
            return Err(CliError::Config(format!("line {}: invalid key `{k}`", n + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CliError::Config(format!("duplicate key `{k}`")));
        }
    }
    Ok(map)
}

impl ExperimentConfig {
    /// Reads and resolves a config file; relative paths resolve against its directory.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base, seed_override)
    }

    /// Parses config text. `seed_override` replaces the top-level `seed`
    /// (and everything derived from it).
    pub fn parse(text: &str, base_dir: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let mut f = Fields {
            map: parse_lines(text)?,
        };
        // Derived seeds follow the top-level seed unless pinned explicitly.
        let file_seed: u64 = f.take("seed", 0)?;
        let seed = seed_override.unwrap_or(file_seed);

        let data = DataConfig {
            kind: f.required("data.kind")?,
            dir: f.take("data.dir", PathBuf::from("data"))?,
            seed: f.take("data.seed", seed)?,
            n_train: f.take("data.n_train", 2000)?,
            n_benign: f.take("data.n_benign", 2000)?,
            n_eval: f.take("data.n_eval", 200)?,
            rho: f.take("data.rho", 0.25)?,
            trigger: f.take_with("data.trigger", crate::taskgen::vocab::TRIGGER.to_vec(), parse_list)?,
        };

        let model = ModelConfig {
            n_layers: f.take("model.layers", 2)?,
            d_model: f.take("model.d_model", 32)?,
            n_heads: f.take("model.heads", 4)?,
            vocab_size: f.take("model.vocab", crate::taskgen::vocab::VOCAB_SIZE)?,
            max_context: f.take("model.context", 16)?,
            d_ff: f.take("model.d_ff", 128)?,
        };
        let init_seed = f.take("model.init_seed", seed)?;

        let d = RunConfig::default();
        let da = AttackConfig::default();
        let attack = AttackConfig {
            enabled: f.take_with("attack.enabled", false, parse_bool)?,
            epsilon: f.take("attack.epsilon", da.epsilon)?,
            steps: f.take("attack.steps", da.steps)?,
            step_size: f.take_with("attack.step_size", da.step_size, parse_optional)?,
            mode: f.take_with(
                "attack.mode",
                da.mode,
                parse_named(&[AttackMode::Targeted, AttackMode::Untargeted], mode_name),
            )?,
            init: f.take_with(
                "attack.init",
                da.init,
                parse_named(&[AttackInit::Zero, AttackInit::UniformBall], init_name),
            )?,
            scope: f.take_with(
                "attack.scope",
                da.scope,
                parse_named(&[NormScope::PerPosition, NormScope::Aggregate], scope_name),
            )?,
            profile: f.take_with("attack.profile", HookProfile::Even { k: 2 }, |s| {
                s.parse().map_err(|e: crate::Error| e.to_string())
            })?,
            whiten: f.take_with("attack.whiten", da.whiten, parse_bool)?,
            seed: f.take("attack.seed", seed)?,
        };
        let dr = RmuConfig::default();
        let rmu = RmuConfig {
            c: f.take("rmu.c", dr.c)?,
            alpha: f.take("rmu.alpha", dr.alpha)?,
            layer: f.take("rmu.layer", dr.layer)?,
            trainable_layers: f.take_with("rmu.trainable_layers", dr.trainable_layers, parse_list)?,
            seed: f.take("rmu.seed", seed)?,
        };
        let run = RunConfig {
            model,
            loss: f.take_with("train.loss", LossKind::Sft, |s| {
                s.parse().map_err(|e: crate::Error| e.to_string())
            })?,
            benign: f.take_with("train.benign", d.benign, |s| {
                s.parse().map_err(|e: crate::Error| e.to_string())
            })?,
            benign_weight: f.take("train.benign_weight", d.benign_weight)?,
            interleave_ratio: f.take("train.interleave_ratio", d.interleave_ratio)?,
            attack,
            optimizer: OptimizerConfig {
                lr: f.take("train.lr", d.optimizer.lr)?,
                momentum: f.take("train.momentum", d.optimizer.momentum)?,
                clip_norm: f.take_with("train.clip_norm", d.optimizer.clip_norm, parse_optional)?,
            },
            steps: f.take("train.steps", d.steps)?,
            batch_size: f.take("train.batch_size", d.batch_size)?,
            seed: f.take("train.seed", seed)?,
            beta: f.take("train.beta", d.beta)?,
            rmu,
            proxy_trigger: f.take_with("train.proxy_trigger", d.proxy_trigger, parse_bool)?,
            trigger: data.trigger.clone(),
            eval_interval: f.take("train.eval_interval", d.eval_interval)?,
            checkpoint_interval: f.take("train.checkpoint_interval", d.checkpoint_interval)?,
            nan_budget_pct: f.take("train.nan_budget_pct", d.nan_budget_pct)?,
        };
        let files = TrainFiles {
            init: f.take_with("train.init", None, parse_path)?,
            reference: f.take_with("train.reference", None, parse_path)?,
            splits: f.take_with("train.splits", Vec::new(), parse_list)?,
            out: f.take("train.out", PathBuf::from("run"))?,
        };
        let dl = RelearnConfig::default();
        let relearn = RelearnSettings {
            relearn: RelearnConfig {
                n_examples: f.take("relearn.n_examples", dl.n_examples)?,
                iters: f.take("relearn.iters", dl.iters)?,
                eval_at: f.take_with("relearn.eval_at", dl.eval_at, parse_list)?,
                optimizer: OptimizerConfig {
                    lr: f.take("relearn.lr", dl.optimizer.lr)?,
                    momentum: f.take("relearn.momentum", dl.optimizer.momentum)?,
                    clip_norm: f.take_with("relearn.clip_norm", dl.optimizer.clip_norm, parse_optional)?,
                },
                seed: 0,
            },
            seeds: f.take("relearn.seeds", 5)?,
            base: f.take_with("relearn.base", None, parse_path)?,
        };

        if let Some(k) = f.map.keys().next() {
            return Err(CliError::Config(format!("unknown key `{k}`")));
        }
        let cfg = Self {
            seed,
            init_seed,
            data,
            run,
            files,
            relearn,
            base_dir: base_dir.to_path_buf(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let config_err = |e: crate::Error| CliError::Config(e.to_string());
        self.run.validate().map_err(config_err)?;
        if !(0.0..=1.0).contains(&self.data.rho) {
            return Err(CliError::Config(format!(
                "data.rho must lie in [0, 1], got {}",
                self.data.rho
            )));
        }
        if self.data.trigger.is_empty() {
            return Err(CliError::Config("data.trigger must not be empty".into()));
        }
        if self.run.model.vocab_size < crate::taskgen::vocab::VOCAB_SIZE {
            return Err(CliError::Config(format!(
                "model.vocab must be at least {}",
                crate::taskgen::vocab::VOCAB_SIZE
            )));
        }
        if self.relearn.relearn.n_examples == 0 || self.relearn.seeds == 0 {
            return Err(CliError::Config(
                "relearn.n_examples and relearn.seeds must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Canonical text: every key with its resolved value, sorted.
    pub fn canonical(&self) -> String {
        let r = &self.run;
        let a = &r.attack;
        let m = &r.model;
        let l = &self.relearn;
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("data.kind", self.data.kind.name().into()),
            ("data.dir", self.data.dir.display().to_string()),
            ("data.seed", self.data.seed.to_string()),
            ("data.n_train", self.data.n_train.to_string()),
            ("data.n_benign", self.data.n_benign.to_string()),
            ("data.n_eval", self.data.n_eval.to_string()),
            ("data.rho", self.data.rho.to_string()),
            ("data.trigger", join(&self.data.trigger)),
            ("model.layers", m.n_layers.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.heads", m.n_heads.to_string()),
            ("model.vocab", m.vocab_size.to_string()),
            ("model.context", m.max_context.to_string()),
            ("model.d_ff", m.d_ff.to_string()),
            ("model.init_seed", self.init_seed.to_string()),
            ("train.loss", r.loss.name().into()),
            ("train.benign", r.benign.name().into()),
            ("train.benign_weight", r.benign_weight.to_string()),
            ("train.interleave_ratio", r.interleave_ratio.to_string()),
            ("train.lr", r.optimizer.lr.to_string()),
            ("train.momentum", r.optimizer.momentum.to_string()),
            ("train.clip_norm", opt(&r.optimizer.clip_norm)),
            ("train.steps", r.steps.to_string()),
            ("train.batch_size", r.batch_size.to_string()),
            ("train.seed", r.seed.to_string()),
            ("train.beta", r.beta.to_string()),
            ("train.proxy_trigger", r.proxy_trigger.to_string()),
            ("train.eval_interval", r.eval_interval.to_string()),
            ("train.checkpoint_interval", r.checkpoint_interval.to_string()),
            ("train.nan_budget_pct", r.nan_budget_pct.to_string()),
            ("train.init", opt_path(&self.files.init)),
            ("train.reference", opt_path(&self.files.reference)),
            ("train.splits", join(&self.files.splits)),
            ("train.out", self.files.out.display().to_string()),
            ("attack.enabled", a.enabled.to_string()),
            ("attack.epsilon", a.epsilon.to_string()),
            ("attack.steps", a.steps.to_string()),
            ("attack.step_size", opt(&a.step_size)),
            ("attack.mode", mode_name(a.mode).into()),
            ("attack.init", init_name(a.init).into()),
            ("attack.scope", scope_name(a.scope).into()),
            ("attack.profile", a.profile.to_string()),
            ("attack.whiten", a.whiten.to_string()),
            ("attack.seed", a.seed.to_string()),
            ("rmu.c", r.rmu.c.to_string()),
            ("rmu.alpha", r.rmu.alpha.to_string()),
            ("rmu.layer", r.rmu.layer.to_string()),
            ("rmu.trainable_layers", join(&r.rmu.trainable_layers)),
            ("rmu.seed", r.rmu.seed.to_string()),
            ("relearn.n_examples", l.relearn.n_examples.to_string()),
            ("relearn.iters", l.relearn.iters.to_string()),
            ("relearn.eval_at", join(&l.relearn.eval_at)),
            ("relearn.lr", l.relearn.optimizer.lr.to_string()),
            ("relearn.momentum", l.relearn.optimizer.momentum.to_string()),
            ("relearn.clip_norm", opt(&l.relearn.optimizer.clip_norm)),
            ("relearn.seeds", l.seeds.to_string()),
            ("relearn.base", opt_path(&l.base)),
        ];
        let sorted: BTreeMap<&str, String> = pairs.into_iter().collect();
        sorted.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Resolves a configured path against the config file's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.data.dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::parse(text, Path::new("."), None)
    }

    #[test]
    fn canonical_form_ignores_layout_and_explicit_defaults() {
        let a = parse("data.kind = backdoor\nattack.epsilon = 1\n").unwrap();
        let b = parse("# comment\n\n  attack.epsilon=1.0   \ndata.kind=backdoor\nrmu.c = 6.5\n").unwrap();
        assert_eq!(a.canonical(), b.canonical());
        assert_eq!(a.hash(), b.hash());
        let c = parse("data.kind = backdoor\nattack.epsilon = 2\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn canonical_text_round_trips() {
        let a = parse("data.kind = unlearn\ntrain.loss = rmu\ntrain.clip_norm = 1\nattack.step_size = 0.1\n").unwrap();
        let b = parse(&a.canonical()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors_name_the_key() {
        let e = parse("attack.epsilon = 1\n").unwrap_err().to_string();
        assert!(e.contains("data.kind"), "{e}");
        let e = parse("data.kind = backdoor\nattack.epsilonn = 1\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("attack.epsilonn"), "{e}");
        let e = parse("data.kind = backdoor\ntrain.lr = fast\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("train.lr"), "{e}");
    }

    #[test]
    fn paper_defaults() {
        let c = parse("data.kind = unlearn\n").unwrap();
        assert_eq!(c.run.rmu.c, 6.5);
        assert_eq!(c.run.rmu.alpha, 1200.0);
        assert_eq!(c.relearn.relearn.n_examples, 2);
        assert_eq!(c.relearn.relearn.iters, 20);
        assert_eq!(c.relearn.relearn.eval_at, vec![5, 10, 20]);
    }

    #[test]
    fn seed_override_propagates() {
        let c = ExperimentConfig::parse("data.kind = backdoor\nattack.seed = 9\n", Path::new("."), Some(4)).unwrap();
        assert_eq!(
            (c.seed, c.data.seed, c.run.seed, c.init_seed, c.run.attack.seed),
            (4, 4, 4, 4, 9)
        );
    }
}
