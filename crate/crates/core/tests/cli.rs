use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[data]
labeled_head = 40
labeled_ratio = 8.0
unlabeled_head = 120
unlabeled_ratio = 8.0
test_per_class = 30
classes = 4
separation = 4.0

[model]
hidden = [16]

[sgd]
momentum = 0.9

[threshold]
ema = 0.9

[train]
epochs = 3
steps_per_epoch = 4
seed = 5

[sweep]
passes = [2, 6, 10, 12]
"#;

fn udts(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_udts"))
        .args(args)
        .current_dir(dir)
        .env_remove("UDTS_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn train_writes_artifacts_and_echoes_seed() {
    let dir = setup();
    let out = udts(&["train", "--config", "small.toml", "--out-dir", "run", "--seed", "42"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    for f in [
        "metrics.csv",
        "thresholds.csv",
        "selection.csv",
        "summary.json",
        "checkpoint.json",
        "model.json",
        "timing.json",
        "effective_config.toml",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 42);
    assert_eq!(summary["config"]["seed"], 42);
    assert_eq!(summary["epochs_completed"], 3);
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 4);
}

#[test]
fn identical_runs_give_identical_summary() {
    let dir = setup();
    for d in ["a", "b"] {
        let out = udts(&["train", "--config", "small.toml", "--out-dir", d], dir.path());
        assert_eq!(out.status.code(), Some(0));
    }
    for f in ["summary.json", "metrics.csv", "thresholds.csv", "selection.csv"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn out_dir_from_environment() {
    let dir = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_udts"))
        .args(["gen-data", "--config", "small.toml"])
        .current_dir(dir.path())
        .env("UDTS_OUT_DIR", "envdir")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("envdir/dataset.udts").exists());
}

#[test]
fn gen_data_then_train_on_container() {
    let dir = setup();
    assert_eq!(udts(&["gen-data", "--config", "small.toml", "--out-dir", "d"], dir.path()).status.code(), Some(0));
    let out = udts(
        &["train", "--config", "small.toml", "--data", "d/dataset.udts", "--out-dir", "r", "--mode", "fixed_baseline"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(dir.path().join("r/summary.json")).unwrap();
    assert!(summary.contains("\"mode\": \"fixed_baseline\""));

    // same data through the generator and through the container
    let direct = udts(&["train", "--config", "small.toml", "--out-dir", "r2", "--mode", "fixed_baseline"], dir.path());
    assert_eq!(direct.status.code(), Some(0));
    assert_eq!(
        fs::read(dir.path().join("r/metrics.csv")).unwrap(),
        fs::read(dir.path().join("r2/metrics.csv")).unwrap()
    );
}

#[test]
fn eval_prints_metrics() {
    let dir = setup();
    assert_eq!(udts(&["train", "--config", "small.toml", "--out-dir", "r"], dir.path()).status.code(), Some(0));
    let out = udts(&["eval", "--config", "small.toml", "--checkpoint", "r/checkpoint.json"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("top1 "));
    assert!(text.contains("recall_c3 "));
}

#[test]
fn eval_missing_checkpoint_is_data_error() {
    let dir = setup();
    let out = udts(&["eval", "--config", "small.toml", "--checkpoint", "missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert!(out.stdout.is_empty());
}

#[test]
fn config_errors_exit_3_and_name_the_key() {
    let dir = setup();
    fs::write(dir.path().join("bad.toml"), "[mc]\ndropout_rate = 2.0\n").unwrap();
    let out = udts(&["train", "--config", "bad.toml", "--out-dir", "r"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mc.dropout_rate"));
    assert!(!dir.path().join("r").exists());

    fs::write(dir.path().join("typo.toml"), "[train]\nepochz = 3\n").unwrap();
    let out = udts(&["train", "--config", "typo.toml"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

#[test]
fn corrupt_container_exits_4() {
    let dir = setup();
    fs::write(dir.path().join("junk.udts"), b"not a dataset").unwrap();
    let out = udts(&["train", "--config", "small.toml", "--data", "junk.udts"], dir.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn divergence_exits_5_and_keeps_last_good_checkpoint() {
    let dir = setup();
    let text = SMALL.replace("momentum = 0.9", "momentum = 0.99\nlearning_rate = 1000000.0").replace("epochs = 3", "epochs = 30");
    fs::write(dir.path().join("hot.toml"), text).unwrap();
    let out = udts(&["train", "--config", "hot.toml", "--out-dir", "r"], dir.path());
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("r/checkpoint.json").exists());
}

#[test]
fn usage_errors_exit_2() {
    let dir = setup();
    assert_eq!(udts(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(udts(&["train", "--mode", "greedy"], dir.path()).status.code(), Some(2));
    assert_eq!(udts(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn sweep_t_writes_one_row_per_pass_count() {
    let dir = setup();
    let out = udts(&["sweep-t", "--config", "small.toml", "--out-dir", "s"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(dir.path().join("s/sweep_t.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["T", "top1", "mc_std_error", "wall_time"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let ts: Vec<usize> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(ts, [2, 6, 10, 12]);
    let errs: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
}

#[test]
fn report_regenerates_logs_from_checkpoint() {
    let dir = setup();
    assert_eq!(udts(&["train", "--config", "small.toml", "--out-dir", "r"], dir.path()).status.code(), Some(0));
    let out = udts(&["report", "--checkpoint", "r/checkpoint.json", "--out-dir", "again"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    for f in ["metrics.csv", "thresholds.csv", "selection.csv", "summary.json"] {
        assert_eq!(
            fs::read(dir.path().join("r").join(f)).unwrap(),
            fs::read(dir.path().join("again").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn resume_continues_to_the_same_result() {
    let dir = setup();
    assert_eq!(udts(&["train", "--config", "small.toml", "--out-dir", "full"], dir.path()).status.code(), Some(0));
    fs::write(dir.path().join("short.toml"), SMALL.replace("epochs = 3", "epochs = 1")).unwrap();
    assert_eq!(udts(&["train", "--config", "short.toml", "--out-dir", "part"], dir.path()).status.code(), Some(0));
    let out = udts(
        &["train", "--config", "small.toml", "--resume", "part/checkpoint.json", "--out-dir", "rest"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read(dir.path().join("full/metrics.csv")).unwrap(),
        fs::read(dir.path().join("rest/metrics.csv")).unwrap()
    );
}

#[test]
fn dump_estimates_writes_per_sample_csv() {
    let dir = setup();
    let out = udts(&["train", "--config", "small.toml", "--out-dir", "r", "--dump-estimates"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(dir.path().join("r/estimates.csv")).unwrap();
    let n: usize = udts::data::class_counts(&udts::data::ClassProfile::new(4, 120, 8.0)).unwrap().iter().sum();
    assert_eq!(text.lines().count(), 1 + n);
}
