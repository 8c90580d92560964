//! End-to-end checks of the binary: exit codes, artifacts, determinism.

use std::path::Path;
use std::process::{Command, Output};

fn hfpredict(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hfpredict"));
    cmd.args(args);
    cmd.env_remove("HFPREDICT_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn missing_config_file_exits_one() {
    let out = hfpredict(&["sweep", "--config", "definitely_missing.json"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr_of(&out).contains("definitely_missing.json"),
        "stderr should name the missing file: {}",
        stderr_of(&out)
    );
}

#[test]
fn unknown_flag_prints_usage_to_stderr_and_exits_one() {
    let out = hfpredict(&["sweep", "--confg", "x.json"], &[]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_of(&out);
    assert!(err.to_lowercase().contains("usage"), "stderr: {err}");
}

#[test]
fn unknown_optimizer_value_exits_one() {
    let out = hfpredict(
        &[
            "train",
            "--model",
            "attention",
            "--optimizer",
            "adagrad",
            "--lr",
            "0.001",
            "--feature",
            "age",
            "--synthetic",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("adagrad"));
}

#[test]
fn help_exits_zero() {
    let out = hfpredict(&["--help"], &[]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout_of(&out).contains("hfpredict"));
}

#[test]
fn gradcheck_passes_and_prints_the_worst_error() {
    let out = hfpredict(&["gradcheck", "--instances", "2"], &[]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("max relative error"), "stdout: {text}");
    assert!(text.contains("gradient check passed"));
}

#[test]
fn synthetic_train_run_writes_artifacts_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = hfpredict(
        &[
            "train",
            "--model",
            "attention",
            "--optimizer",
            "rmsprop",
            "--lr",
            "0.001",
            "--feature",
            "serum_creatinine",
            "--synthetic",
            "--synthetic-n",
            "120",
            "--epochs",
            "5",
            "--seed",
            "7",
            "--out",
            out_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(out_dir.join("report.json").exists());
    assert!(out_dir.join("synthetic_records.csv").exists());
    let plot = out_dir.join("plots/serum_creatinine_attention_rmsprop_lr0.001.csv");
    assert!(plot.exists(), "expected per-cell plot at {}", plot.display());

    // report subcommand re-renders the stored ranking
    let rendered = hfpredict(&["report", "--dir", out_dir.to_str().unwrap()], &[]);
    assert_eq!(rendered.status.code(), Some(0));
    assert!(stdout_of(&rendered).contains("ranking (serum_creatinine)"));
}

#[test]
fn aggregate_is_byte_deterministic_and_honours_the_seed_env() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let run = hfpredict(
            &[
                "aggregate",
                "--feature",
                "age",
                "--synthetic",
                "--synthetic-n",
                "150",
                "--out",
                out.to_str().unwrap(),
            ],
            &[("HFPREDICT_SEED", "31")],
        );
        assert_eq!(run.status.code(), Some(0), "stderr: {}", stderr_of(&run));
    }
    for name in ["age_counts_all.csv", "age_counts_train.csv"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    // a different seed must change the synthetic aggregate
    let out_c = dir.path().join("c");
    let run = hfpredict(
        &[
            "aggregate",
            "--feature",
            "age",
            "--synthetic",
            "--synthetic-n",
            "150",
            "--seed",
            "32",
            "--out",
            out_c.to_str().unwrap(),
        ],
        &[("HFPREDICT_SEED", "31")],
    );
    assert_eq!(run.status.code(), Some(0));
    let a = std::fs::read(out_a.join("age_counts_all.csv")).unwrap();
    let c = std::fs::read(out_c.join("age_counts_all.csv")).unwrap();
    assert_ne!(a, c, "--seed must override the environment default");
}

#[test]
fn aggregate_requires_a_data_source() {
    let out = hfpredict(&["aggregate", "--feature", "age"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("--synthetic"));
}

#[test]
fn emitted_plot_csv_round_trips_through_a_csv_reader() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = hfpredict(
        &[
            "train",
            "--model",
            "lstm",
            "--optimizer",
            "adam",
            "--lr",
            "0.001",
            "--feature",
            "ejection_fraction",
            "--synthetic",
            "--synthetic-n",
            "120",
            "--epochs",
            "3",
            "--seed",
            "11",
            "--out",
            out_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let plot = out_dir.join("plots/ejection_fraction_lstm_adam_lr0.001.csv");
    let text = std::fs::read_to_string(&plot).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("feature_value,actual_count,predicted_count"));
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3, "line: {line}");
        for field in fields {
            let value: f64 = field.parse().expect("numeric field");
            assert!(value.is_finite());
        }
    }
    assert!(count_lines(&plot) > 1);
}

fn count_lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}
