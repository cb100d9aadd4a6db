//! Operator surface: config files, datasets on disk, checkpoints, metrics
//! CSV, SVG plots and the `gen-data` / `train` / `eval` / `relearn` / `plot`
//! subcommands.
//!
//! Dataset files are `<split>.tsv` in the data directory, one record per
//! line: `role<TAB>prompt ids<TAB>completion ids[ | rejected ids]<TAB>flags`,
//! ids space separated, flags a comma list of `harmful`, `triggered`,
//! `poisoned` (or `-`). `manifest.tsv` records each split's role, seed, size
//! and SHA-256.

pub mod checkpoint;
pub mod config;
pub mod fsutil;
pub mod metrics_csv;
pub mod plot;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{DataKind, ExperimentConfig};
pub use fsutil::{atomic_write, RunLock};
pub use metrics_csv::{parse_csv, to_csv, MetricsTable, COLUMNS};

use crate::evalkit::{accuracy_and_perplexity, gap_closed, MetricsRecord};
use crate::lm::{Parameters, TokenSequence};
use crate::taskgen::{
    gen_benign, gen_clean_eval, gen_forget_retain, gen_helpful_pairs, gen_poisoned, gen_preference_pairs,
    gen_trigger_eval, interleave, DatasetSplit,
};
use crate::trainer::{
    relearn_attack, EvalSets, LossKind, RelearnReport, RunObserver, TrainData, TrainSet, TrainState, Trainer,
};

/// Failure of a subcommand, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] crate::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    /// 2 for configuration problems, 3 when the non-finite step budget is
    /// exhausted, 4 for file-system problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 4,
            CliError::Core(crate::Error::NanBudgetExceeded { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub const MANIFEST: &str = "manifest.tsv";
pub const METRICS: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.latf";

pub const SPLIT_PREFERENCE: &str = "preference-pairs";
pub const SPLIT_BENIGN: &str = "benign";
pub const SPLIT_POISONED: &str = "poisoned-train";
pub const SPLIT_TRIGGER_EVAL: &str = "trigger-eval";
pub const SPLIT_CLEAN_EVAL: &str = "clean-eval";
pub const SPLIT_FORGET: &str = "forget";
pub const SPLIT_RETAIN: &str = "retain";
pub const SPLIT_FORGET_EVAL: &str = "forget-eval";
pub const SPLIT_RETAIN_EVAL: &str = "retain-eval";

/// Every split of a data kind, in manifest order.
pub fn generate_splits(cfg: &ExperimentConfig) -> CliResult<Vec<(&'static str, DatasetSplit)>> {
    let d = &cfg.data;
    let s = d.seed;
    Ok(match d.kind {
        DataKind::Backdoor => vec![
            (
                SPLIT_PREFERENCE,
                interleave(
                    &gen_preference_pairs(s, d.n_train / 2),
                    &gen_helpful_pairs(s, d.n_train - d.n_train / 2),
                ),
            ),
            (SPLIT_BENIGN, gen_benign(s, d.n_benign)),
            (SPLIT_POISONED, gen_poisoned(s, d.n_train, &d.trigger, d.rho)?),
            (SPLIT_TRIGGER_EVAL, gen_trigger_eval(s, d.n_eval, &d.trigger)),
            (SPLIT_CLEAN_EVAL, gen_clean_eval(s, d.n_eval)),
        ],
        DataKind::Unlearn => {
            let (forget, retain) = gen_forget_retain(s, d.n_train, d.n_train);
            let (forget_eval, retain_eval) = gen_forget_retain(s.wrapping_add(1), d.n_eval, d.n_eval);
            vec![
                (SPLIT_FORGET, forget),
                (SPLIT_RETAIN, retain),
                (SPLIT_FORGET_EVAL, forget_eval),
                (SPLIT_RETAIN_EVAL, retain_eval),
            ]
        }
    })
}

/// Writes every split and the hash manifest; returns the manifest text.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: Option<&Path>) -> CliResult<String> {
    let dir = out.map_or_else(|| cfg.data_dir(), Path::to_path_buf);
    let splits = generate_splits(cfg)?;
    let mut manifest = format!("# config_hash {}\nsplit\trole\tseed\trecords\tsha256\n", cfg.hash());
    for (name, split) in &splits {
        atomic_write(&dir.join(format!("{name}.tsv")), split.to_tsv().as_bytes())?;
        let _ = writeln!(
            manifest,
            "{name}\t{}\t{}\t{}\t{}",
            split.role,
            split.seed,
            split.len(),
            split.content_hash()
        );
    }
    atomic_write(&dir.join(MANIFEST), manifest.as_bytes())?;
    Ok(manifest)
}

pub fn load_split(cfg: &ExperimentConfig, name: &str) -> CliResult<DatasetSplit> {
    let path = cfg.data_dir().join(format!("{name}.tsv"));
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    DatasetSplit::from_tsv(&text, cfg.data.seed).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn split_exists(cfg: &ExperimentConfig, name: &str) -> bool {
    cfg.data_dir().join(format!("{name}.tsv")).is_file()
}

fn load_sequences(cfg: &ExperimentConfig, names: &[String]) -> CliResult<Vec<TokenSequence>> {
    let mut merged: Option<DatasetSplit> = None;
    for n in names {
        let s = load_split(cfg, n)?;
        merged = Some(match merged {
            None => s,
            Some(m) => interleave(&m, &s),
        });
    }
    Ok(merged.map(|m| m.sequences()).transpose()?.unwrap_or_default())
}

/// Evaluation splits present for the config's data kind.
pub fn eval_sets(cfg: &ExperimentConfig) -> CliResult<EvalSets> {
    let mut e = EvalSets::default();
    let opt = |name: &str| -> CliResult<Option<DatasetSplit>> {
        if split_exists(cfg, name) {
            load_split(cfg, name).map(Some)
        } else {
            Ok(None)
        }
    };
    match cfg.data.kind {
        DataKind::Backdoor => {
            e.trigger = opt(SPLIT_TRIGGER_EVAL)?;
            e.clean = opt(SPLIT_CLEAN_EVAL)?;
        }
        DataKind::Unlearn => {
            e.forget = opt(SPLIT_FORGET_EVAL)?.map(|s| s.sequences()).transpose()?;
            e.retain = opt(SPLIT_RETAIN_EVAL)?.map(|s| s.sequences()).transpose()?;
        }
    }
    Ok(e)
}

/// Assembles training data for the configured loss from the data directory.
pub fn train_data(cfg: &ExperimentConfig) -> CliResult<TrainData> {
    let kind = cfg.data.kind;
    let loss = cfg.run.loss;
    let splits: Vec<String> = if cfg.files.splits.is_empty() {
        let names: &[&str] = match (loss, kind) {
            (LossKind::Sft, DataKind::Backdoor) => &[SPLIT_POISONED, SPLIT_BENIGN],
            (LossKind::Rt | LossKind::Dpo, _) => &[SPLIT_PREFERENCE],
            _ => &[SPLIT_FORGET, SPLIT_RETAIN],
        };
        names.iter().map(|s| s.to_string()).collect()
    } else {
        cfg.files.splits.clone()
    };
    let train = match loss {
        LossKind::Sft => TrainSet::Sequences(load_sequences(cfg, &splits)?),
        LossKind::Rt | LossKind::Dpo => {
            let mut triples = Vec::new();
            for n in &splits {
                triples.extend(load_split(cfg, n)?.triples()?);
            }
            TrainSet::Triples(triples)
        }
        LossKind::UnlearnGa | LossKind::Rmu => {
            if splits.len() != 2 {
                return Err(CliError::Config(format!(
                    "train.splits for `{loss}` must name a forget and a retain split, got {}",
                    splits.len()
                )));
            }
            TrainSet::ForgetRetain {
                forget: load_sequences(cfg, &splits[..1])?,
                retain: load_sequences(cfg, &splits[1..])?,
            }
        }
    };
    let benign_split = match kind {
        DataKind::Backdoor => SPLIT_BENIGN,
        DataKind::Unlearn => SPLIT_RETAIN,
    };
    let benign = if cfg.run.benign != crate::trainer::BenignMode::None || split_exists(cfg, benign_split) {
        load_sequences(cfg, &[benign_split.to_string()])?
    } else {
        Vec::new()
    };
    Ok(TrainData {
        train,
        benign,
        eval: eval_sets(cfg)?,
    })
}

fn load_params(cfg: &ExperimentConfig, path: &Path) -> CliResult<Parameters> {
    let path = cfg.resolve(path);
    let ck = load_checkpoint(&path)?;
    if ck.state.params.config() != &cfg.run.model {
        return Err(CliError::Config(format!(
            "{} holds a {:?} model, config describes {:?}",
            path.display(),
            ck.state.params.config(),
            cfg.run.model
        )));
    }
    Ok(ck.state.params)
}

/// Starting parameters: `train.init` if set, else a seeded random init.
pub fn initial_params(cfg: &ExperimentConfig) -> CliResult<Parameters> {
    match &cfg.files.init {
        Some(p) => load_params(cfg, p),
        None => Ok(Parameters::init(
            cfg.run.model,
            &mut ChaCha8Rng::seed_from_u64(cfg.init_seed),
        )?),
    }
}

/// Writes metrics rows and checkpoints as a run progresses.
struct DiskObserver<'a> {
    dir: &'a Path,
    canonical: String,
    hash: String,
    rows: Vec<MetricsRecord>,
    total_steps: usize,
    /// The write error that aborted the run, reported instead of the trainer's wrapper.
    failure: Option<CliError>,
}

impl DiskObserver<'_> {
    fn record(&mut self, r: CliResult<()>) -> crate::Result<()> {
        r.map_err(|e| {
            let msg = e.to_string();
            self.failure = Some(e);
            crate::Error::InvalidArgument(msg)
        })
    }
}

impl RunObserver for DiskObserver<'_> {
    fn on_metrics(&mut self, record: &MetricsRecord) -> crate::Result<()> {
        let r = metrics_csv::append_rows(&self.dir.join(METRICS), &mut self.rows, record, &self.hash);
        self.record(r)
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> crate::Result<()> {
        let name = if state.step == self.total_steps {
            FINAL_CHECKPOINT.to_string()
        } else {
            format!("checkpoint-{:06}.latf", state.step)
        };
        let r = save_checkpoint(&self.dir.join(name), &self.canonical, state);
        self.record(r)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub state: TrainState,
    pub records: Vec<MetricsRecord>,
}

/// Runs training; writes `metrics.csv`, periodic checkpoints and `final.latf`.
pub fn cmd_train(cfg: &ExperimentConfig, out: Option<&Path>, resume: Option<&Path>) -> CliResult<TrainOutcome> {
    let dir = out.map_or_else(|| cfg.resolve(&cfg.files.out), Path::to_path_buf);
    let data = train_data(cfg)?;
    let init = initial_params(cfg)?;
    let reference = match &cfg.files.reference {
        Some(p) => load_params(cfg, p)?,
        None => init.clone(),
    };
    let _lock = RunLock::acquire(&dir)?;
    let canonical = cfg.canonical();
    let hash = cfg.hash();
    let (state, rows) = match resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.config_text != canonical {
                return Err(CliError::Config(format!(
                    "{} was written by a different configuration; resume needs the same config",
                    p.display()
                )));
            }
            let csv = dir.join(METRICS);
            let rows = if csv.is_file() {
                let text = std::fs::read_to_string(&csv).map_err(|e| CliError::io(&csv, e))?;
                parse_csv(&text)?
                    .records
                    .into_iter()
                    .filter(|r| r.step <= ck.state.step)
                    .collect()
            } else {
                Vec::new()
            };
            (ck.state, rows)
        }
        None => {
            atomic_write(&dir.join(METRICS), to_csv(&[], &hash)?.as_bytes())?;
            (TrainState::new(init), Vec::new())
        }
    };
    let trainer = Trainer::new(cfg.run.clone(), &data, &reference)?;
    let mut observer = DiskObserver {
        dir: &dir,
        canonical,
        hash,
        rows,
        total_steps: cfg.run.steps,
        failure: None,
    };
    let (state, records) = match trainer.run(state, &mut observer) {
        Ok(r) => r,
        Err(e) => return Err(observer.failure.take().unwrap_or(CliError::Core(e))),
    };
    Ok(TrainOutcome {
        out_dir: dir,
        state,
        records,
    })
}

/// Evaluates a checkpoint on the configured evaluation splits (or the named
/// ones) and returns the metrics CSV text (header plus one row).
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    splits: Option<&[String]>,
) -> CliResult<(MetricsRecord, String)> {
    let ck = load_checkpoint(checkpoint)?;
    let params = ck.state.params;
    let mut record = MetricsRecord {
        step: ck.state.step,
        nan_skips: ck.state.nan_skips,
        ..MetricsRecord::default()
    };
    match splits {
        None => evaluate_into(&params, &eval_sets(cfg)?, &mut record)?,
        Some(names) => {
            for n in names {
                let split = load_split(cfg, n)?;
                let mut e = EvalSets::default();
                match n.as_str() {
                    SPLIT_TRIGGER_EVAL => e.trigger = Some(split),
                    SPLIT_CLEAN_EVAL | SPLIT_BENIGN => e.clean = Some(split),
                    SPLIT_FORGET | SPLIT_FORGET_EVAL => e.forget = Some(split.sequences()?),
                    SPLIT_RETAIN | SPLIT_RETAIN_EVAL => e.retain = Some(split.sequences()?),
                    other => return Err(CliError::Config(format!("split `{other}` has no evaluation metric"))),
                }
                evaluate_into(&params, &e, &mut record)?;
            }
        }
    }
    let csv = to_csv(std::slice::from_ref(&record), &cfg.hash())?;
    Ok((record, csv))
}

fn evaluate_into(params: &Parameters, e: &EvalSets, record: &mut MetricsRecord) -> CliResult<()> {
    use crate::evalkit::{compliance_rate, trigger_success_rate};
    if let Some(s) = &e.trigger {
        record.trigger_success_rate = Some(trigger_success_rate(params, s)?);
    }
    if let Some(s) = &e.clean {
        record.compliance_rate = Some(compliance_rate(params, s)?);
    }
    if let Some(s) = &e.forget {
        let (a, p) = accuracy_and_perplexity(params, s)?;
        record.forget_accuracy = Some(a);
        record.forget_ppl = Some(p);
    }
    if let Some(s) = &e.retain {
        let (a, p) = accuracy_and_perplexity(params, s)?;
        record.retain_accuracy = Some(a);
        record.retain_ppl = Some(p);
    }
    Ok(())
}

/// Result of the few-shot re-learning protocol over several seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RelearnSummary {
    pub reports: Vec<RelearnReport>,
    /// Forget accuracy of the pre-unlearning model, when `relearn.base` is set.
    pub base_accuracy: Option<f64>,
    /// Forget accuracy of the attacked (unlearned) checkpoint.
    pub unlearned_accuracy: f64,
    /// Per-seed gap closed (requires a base model and a nonzero gap).
    pub gap_closed: Vec<Option<f64>>,
    pub mean_gap_closed: Option<f64>,
    pub text: String,
}

/// Runs the re-learning attack against a checkpoint: `relearn.seeds` draws of
/// `relearn.n_examples` forget examples, each fine-tuned for `relearn.iters`
/// iterations and evaluated on the held-out forget split at `relearn.eval_at`.
pub fn cmd_relearn(cfg: &ExperimentConfig, checkpoint: &Path) -> CliResult<RelearnSummary> {
    let params = load_checkpoint(checkpoint)?.state.params;
    let pool = load_split(cfg, SPLIT_FORGET)?.sequences()?;
    let eval_name = if split_exists(cfg, SPLIT_FORGET_EVAL) {
        SPLIT_FORGET_EVAL
    } else {
        SPLIT_FORGET
    };
    let eval = load_split(cfg, eval_name)?.sequences()?;
    let base_accuracy = match &cfg.relearn.base {
        Some(p) => Some(accuracy_and_perplexity(&load_params(cfg, p)?, &eval)?.0),
        None => None,
    };
    let unlearned_accuracy = accuracy_and_perplexity(&params, &eval)?.0;
    let mut reports = Vec::new();
    for i in 0..cfg.relearn.seeds {
        let rc = crate::trainer::RelearnConfig {
            seed: cfg.seed.wrapping_add(i),
            ..cfg.relearn.relearn.clone()
        };
        reports.push(relearn_attack(&params, &pool, &eval, &rc)?);
    }
    let gaps: Vec<Option<f64>> = reports
        .iter()
        .map(|r| base_accuracy.and_then(|b| gap_closed(b, unlearned_accuracy, r.max_accuracy)))
        .collect();
    let mean_gap_closed = gaps
        .iter()
        .copied()
        .collect::<Option<Vec<f64>>>()
        .filter(|g| !g.is_empty())
        .map(|g| g.iter().sum::<f64>() / g.len() as f64);

    let mut text = format!("# config_hash {}\n", cfg.hash());
    let _ = writeln!(text, "checkpoint\t{}", checkpoint.display());
    let _ = writeln!(
        text,
        "protocol\tn_examples={} iters={} eval_at={:?}",
        cfg.relearn.relearn.n_examples, cfg.relearn.relearn.iters, cfg.relearn.relearn.eval_at
    );
    let _ = writeln!(
        text,
        "base_accuracy\t{}",
        base_accuracy.map_or("".into(), |b| b.to_string())
    );
    let _ = writeln!(text, "unlearned_accuracy\t{unlearned_accuracy}");
    for (r, g) in reports.iter().zip(&gaps) {
        let cps: Vec<String> = r.checkpoints.iter().map(|(it, a)| format!("{it}:{a}")).collect();
        let _ = writeln!(
            text,
            "seed_run\texamples={:?}\titerations={}\tcheckpoints={}\tmax={}\tgap_closed={}",
            r.examples,
            r.iterations,
            cps.join(","),
            r.max_accuracy,
            g.map_or("".into(), |g| g.to_string())
        );
    }
    let _ = writeln!(
        text,
        "mean_gap_closed\t{}",
        mean_gap_closed.map_or("".into(), |g| g.to_string())
    );
    Ok(RelearnSummary {
        reports,
        base_accuracy,
        unlearned_accuracy,
        gap_closed: gaps,
        mean_gap_closed,
        text,
    })
}

/// Renders one SVG per non-empty metric family next to (or into) `out`.
pub fn cmd_plot(csv_path: &Path, out: Option<&Path>) -> CliResult<Vec<PathBuf>> {
    let text = std::fs::read_to_string(csv_path).map_err(|e| CliError::io(csv_path, e))?;
    let table = parse_csv(&text)?;
    let hash = table.hashes.first().cloned().unwrap_or_default();
    let dir = out.map_or_else(
        || csv_path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        Path::to_path_buf,
    );
    let mut written = Vec::new();
    for (name, svg) in plot::render_all(&table.records, &hash) {
        let p = dir.join(format!("{name}.svg"));
        atomic_write(&p, svg.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}
