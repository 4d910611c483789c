//! End-to-end tests of the `prefopt` binary: exit codes, file outputs, and
//! byte-level determinism of manifests across reruns.

use std::path::Path;
use std::process::{Command, Output};

fn prefopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prefopt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_scored_jsonl(path: &Path) {
    let mut lines = String::new();
    for i in 0..5 {
        lines.push_str(&format!(
            "{{\"id\":\"p{i}\",\"prompt\":\"q{i}\",\"chosen\":\"a{i}\",\"rejected\":\"b{i}\",\"chosen_score\":{},\"rejected_score\":{}}}\n",
            10 - i,
            1 + i,
        ));
    }
    std::fs::write(path, lines).unwrap();
}

const TRAIN_CONFIG: &str = r#"
algorithm = "selm"
iterations = 4
alpha = 0.01
beta = 0.1
num_prompts = 6
num_responses = 5
seeds = [3]

[optimizer]
learning_rate = 0.1
steps_per_iteration = 10

[features]
mode = "random_gaussian"
dim = 4

[environment]
kind = "linear_features"
scale = 1.0
ranker_noise = 0.0
g_max = 10

[dataset]
kind = "synthetic"
num_pairs = 40
"#;

#[test]
fn augment_emits_two_lines_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("scored.jsonl");
    let output = dir.path().join("augmented.jsonl");
    write_scored_jsonl(&input);
    let out = prefopt(&[
        "augment",
        "--in",
        input.to_str().unwrap(),
        "--out",
        output.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&output).unwrap();
    assert_eq!(text.lines().count(), 10);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["id", "source_id", "goal", "prompt", "chosen", "rejected"] {
        assert!(first.get(key).is_some(), "missing key {key}");
    }
}

#[test]
fn augment_accepts_snake_case_tie_policy() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("scored.jsonl");
    write_scored_jsonl(&input);
    for policy in ["drop", "keep_original", "emit_both"] {
        let output = dir.path().join(format!("{policy}.jsonl"));
        let out = prefopt(&[
            "augment",
            "--in",
            input.to_str().unwrap(),
            "--out",
            output.to_str().unwrap(),
            "--tie-policy",
            policy,
        ]);
        assert!(out.status.success(), "tie policy {policy} rejected");
    }
}

#[test]
fn missing_input_exits_one() {
    let out = prefopt(&["augment", "--in", "/nonexistent/x.jsonl", "--out", "/tmp/y.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_flag_exits_one() {
    let out = prefopt(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_pass_and_fail_codes() {
    let ok = prefopt(&["gradcheck", "--instances", "5", "--tol", "1e-6", "--seed", "0"]);
    assert_eq!(ok.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&ok.stderr));
    // An impossibly tight tolerance must report a numerical-check failure.
    let fail = prefopt(&["gradcheck", "--instances", "5", "--tol", "1e-30", "--seed", "0"]);
    assert_eq!(fail.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&fail.stderr).contains("FAIL"));
}

#[test]
fn verify_all_passes() {
    let out = prefopt(&["verify", "--suite", "all", "--seed", "0"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, TRAIN_CONFIG).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out_dir in [&a, &b] {
        let out = prefopt(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["manifest.json", "seed-3/metrics.csv", "seed-3/summary.json"] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file} differs between identical reruns"
        );
    }

    // A flag override must change the outputs.
    let c = dir.path().join("c");
    let out = prefopt(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--alpha",
        "0.5",
        "--out",
        c.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_ne!(
        std::fs::read(a.join("manifest.json")).unwrap(),
        std::fs::read(c.join("manifest.json")).unwrap(),
        "alpha override left manifest unchanged"
    );
}

#[test]
fn regret_and_report_write_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, TRAIN_CONFIG).unwrap();

    let regret_dir = dir.path().join("regret");
    let out = prefopt(&[
        "regret",
        "--config",
        config.to_str().unwrap(),
        "--seeds",
        "1,2",
        "--out",
        regret_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for file in ["summary.json", "mean_regret.csv", "manifest.json"] {
        assert!(regret_dir.join(file).is_file(), "missing {file}");
    }

    // Two trained runs feed the comparison report.
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(prefopt(&[
        "train", "--config", config.to_str().unwrap(),
        "--out", a.to_str().unwrap(),
    ])
    .status
    .success());
    assert!(prefopt(&[
        "train", "--config", config.to_str().unwrap(),
        "--algo", "iter-dpo",
        "--out", b.to_str().unwrap(),
    ])
    .status
    .success());
    let report_dir = dir.path().join("report");
    let out = prefopt(&[
        "report",
        "--a",
        a.join("seed-3").to_str().unwrap(),
        "--b",
        b.join("seed-3").to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for file in [
        "implicit_diffs.csv",
        "histograms.csv",
        "mean_true_reward.csv",
        "summary.json",
        "manifest.json",
    ] {
        assert!(report_dir.join(file).is_file(), "missing {file}");
    }
}
