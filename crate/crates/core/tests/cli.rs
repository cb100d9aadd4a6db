//! Command-level behaviour: resume, exit codes, evaluation, plotting, and the
//! binary's argument handling.

use std::path::Path;
use std::process::Command;

use latforge::cli::{self, parse_csv, CliError, ExperimentConfig, FINAL_CHECKPOINT, MANIFEST, METRICS};
use latforge::Error;

const BASE: &str = "data.kind = unlearn\ndata.dir = data\ndata.n_train = 48\ndata.n_eval = 24\nseed = 5\n\
model.layers = 2\nmodel.d_model = 16\nmodel.heads = 2\nmodel.d_ff = 32\n\
train.steps = 12\ntrain.batch_size = 4\ntrain.lr = 0.05\ntrain.clip_norm = 1\ntrain.eval_interval = 4\n\
train.checkpoint_interval = 4\ntrain.out = run\n";

/// `BASE` with the keys set in `extra` replaced.
fn config(dir: &Path, extra: &str) -> ExperimentConfig {
    let key = |l: &str| l.split('=').next().unwrap_or("").trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let base: String = BASE
        .lines()
        .filter(|l| !overridden.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    ExperimentConfig::parse(&format!("{base}{extra}"), dir, None).unwrap()
}

fn prepared(extra: &str) -> (tempfile::TempDir, ExperimentConfig) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), extra);
    cli::cmd_gen_data(&cfg, None).unwrap();
    (dir, cfg)
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_is_deterministic_and_hashed() {
    let (dir, cfg) = prepared("");
    let again = tempfile::tempdir().unwrap();
    let manifest = cli::cmd_gen_data(&cfg, Some(again.path())).unwrap();
    assert_eq!(
        read(&dir.path().join("data").join(MANIFEST)),
        read(&again.path().join(MANIFEST))
    );
    for split in ["forget", "retain", "forget-eval", "retain-eval"] {
        assert!(manifest.contains(split), "{manifest}");
        assert_eq!(
            read(&dir.path().join("data").join(format!("{split}.tsv"))),
            read(&again.path().join(format!("{split}.tsv")))
        );
    }
}

#[test]
fn training_writes_metrics_and_checkpoints() {
    let (dir, cfg) = prepared("train.loss = sft\n");
    let out = cli::cmd_train(&cfg, None, None).unwrap();
    assert_eq!(out.out_dir, dir.path().join("run"));
    let table = parse_csv(&String::from_utf8(read(&out.out_dir.join(METRICS))).unwrap()).unwrap();
    let steps: Vec<usize> = table.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, [4, 8, 12]);
    assert!(table.hashes.iter().all(|h| *h == cfg.hash()));
    for f in ["checkpoint-000004.latf", "checkpoint-000008.latf", FINAL_CHECKPOINT] {
        assert!(out.out_dir.join(f).is_file(), "{f} missing");
    }
    assert!(!out.out_dir.join(".lock").exists());
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let (dir, cfg) = prepared("train.loss = unlearn-ga\nattack.enabled = true\nattack.epsilon = 1\nattack.steps = 3\n");
    let full = cli::cmd_train(&cfg, Some(&dir.path().join("full")), None).unwrap();

    // An "interrupted" copy: metrics up to step 12 exist but the run restarts from step 8.
    let part = dir.path().join("part");
    std::fs::create_dir_all(&part).unwrap();
    std::fs::copy(full.out_dir.join(METRICS), part.join(METRICS)).unwrap();
    std::fs::copy(full.out_dir.join("checkpoint-000008.latf"), part.join("ck8.latf")).unwrap();
    let resumed = cli::cmd_train(&cfg, Some(&part), Some(&part.join("ck8.latf"))).unwrap();
    assert_eq!(resumed.state, full.state);
    assert_eq!(read(&part.join(METRICS)), read(&full.out_dir.join(METRICS)));
    assert_eq!(
        read(&part.join(FINAL_CHECKPOINT)),
        read(&full.out_dir.join(FINAL_CHECKPOINT))
    );
}

#[test]
fn resume_refuses_a_different_config() {
    let (dir, cfg) = prepared("train.loss = sft\n");
    let out = cli::cmd_train(&cfg, None, None).unwrap();
    let other = config(dir.path(), "train.loss = sft\ntrain.lr = 0.01\n");
    let err = cli::cmd_train(&other, None, Some(&out.out_dir.join("checkpoint-000004.latf"))).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn exhausted_nan_budget_exits_with_code_three() {
    let (_dir, cfg) =
        prepared("train.loss = sft\ntrain.lr = 1e38\ntrain.clip_norm = none\ntrain.nan_budget_pct = 10\n");
    let err = cli::cmd_train(&cfg, None, None).unwrap_err();
    assert!(matches!(err, CliError::Core(Error::NanBudgetExceeded { .. })), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn config_and_io_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let err = ExperimentConfig::parse(&format!("{BASE}train.lrr = 1\n"), dir.path(), None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("train.lrr"));
    let err = ExperimentConfig::load(&dir.path().join("missing.conf"), None).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    // Training without generated data is a file-system problem.
    let err = cli::cmd_train(&config(dir.path(), "train.loss = sft\n"), None, None).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
}

#[test]
fn concurrent_runs_in_one_directory_are_refused() {
    let (dir, cfg) = prepared("train.loss = sft\n");
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".lock"), "").unwrap();
    assert_eq!(cli::cmd_train(&cfg, None, None).unwrap_err().exit_code(), 4);
}

#[test]
fn eval_and_plot_round_trip() {
    let (_dir, cfg) = prepared("train.loss = sft\n");
    let out = cli::cmd_train(&cfg, None, None).unwrap();
    let (record, csv) = cli::cmd_eval(&cfg, &out.out_dir.join(FINAL_CHECKPOINT), None).unwrap();
    let last = out.records.last().unwrap();
    assert_eq!(record.forget_accuracy, last.forget_accuracy);
    assert_eq!(record.retain_accuracy, last.retain_accuracy);
    assert_eq!(parse_csv(&csv).unwrap().records, vec![record]);
    let only = vec!["retain-eval".to_string()];
    let (r, _) = cli::cmd_eval(&cfg, &out.out_dir.join(FINAL_CHECKPOINT), Some(&only)).unwrap();
    assert!(r.forget_accuracy.is_none() && r.retain_accuracy.is_some());

    let charts = cli::cmd_plot(&out.out_dir.join(METRICS), None).unwrap();
    let names: Vec<String> = charts
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert!(names.contains(&"accuracy.svg".to_string()), "{names:?}");
    for p in &charts {
        let svg = String::from_utf8(read(p)).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains(&cfg.hash()));
    }
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_latforge");
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("x.conf");
    std::fs::write(&conf, format!("{BASE}train.loss = sft\n")).unwrap();
    let run = |args: &[&str]| Command::new(bin).args(args).output().unwrap();

    let gen = run(&["gen-data", "--config", conf.to_str().unwrap()]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(String::from_utf8_lossy(&gen.stdout).contains("forget-eval"));
    let train = run(&["train", "--config", conf.to_str().unwrap()]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let ck = dir.path().join("run").join(FINAL_CHECKPOINT);
    let relearn = run(&[
        "relearn",
        "--config",
        conf.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
    ]);
    assert!(relearn.status.success());
    assert!(String::from_utf8_lossy(&relearn.stdout).contains("n_examples=2 iters=20"));

    std::fs::write(&conf, "data.kind = nonsense\n").unwrap();
    assert_eq!(
        run(&["gen-data", "--config", conf.to_str().unwrap()]).status.code(),
        Some(2)
    );
    let missing = dir.path().join("nope.conf");
    assert_eq!(
        run(&["train", "--config", missing.to_str().unwrap()]).status.code(),
        Some(4)
    );
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}
