use std::path::Path;
use std::process::{Command, Output};

use prdp::baselines::OfflineDataset;
use prdp::harness::parse_metrics;

const TINY: &[&str] = &[
    "--override",
    "hidden=8",
    "--override",
    "pretrain_steps=50",
    "--override",
    "epochs=3",
    "--override",
    "eval_samples=8",
];

fn prdp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prdp"))
        .args(args)
        .output()
        .expect("run prdp")
}

fn prdp_in(dir: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--out", dir.to_str().unwrap()];
    all.extend_from_slice(args);
    all.extend_from_slice(TINY);
    prdp(&all)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn train_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let o = prdp_in(dir.path(), &["train"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "reference.ckpt",
        "policy.ckpt",
        "metrics.csv",
        "updates.csv",
        "summary.json",
        "config.txt",
        "plots/reward.svg",
        "plots/loss.svg",
        "plots/kl.svg",
        "plots/step_ratio.svg",
    ] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let stats = parse_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(stats.len(), 3);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    // E·N·B with toy N = 4, B = 8
    assert_eq!(summary["reward_queries"], 3 * 4 * 8);
}

#[test]
fn saved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    assert_eq!(code(&prdp_in(&first, &["train", "--seed", "5"])), 0);
    let config = first.join("config.txt");
    let ckpt = first.join("reference.ckpt");
    let second = dir.path().join("b");
    let o = prdp(&[
        "train",
        "--out",
        second.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--reference",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let a = std::fs::read(first.join("metrics.csv")).unwrap();
    let b = std::fs::read(second.join("metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn offline_run_exports_its_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let o = prdp_in(
        dir.path(),
        &["train", "--override", "algorithm=prdp-offline"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let data = OfflineDataset::load(&dir.path().join("offline_dataset.csv")).unwrap();
    assert_eq!(data.len(), 3 * 4 * 8);
    assert_eq!(data.entries()[0].trajectory.steps(), 10);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&prdp_in(
            dir.path(),
            &["train", "--override", "no_such_key=1"]
        )),
        2
    );
    assert_eq!(
        code(&prdp_in(dir.path(), &["train", "--override", "beta=-1"])),
        2
    );
    assert_eq!(
        code(&prdp_in(dir.path(), &["train", "--override", "beta"])),
        2
    );
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "epochs = many\n").unwrap();
    assert_eq!(
        code(&prdp_in(
            dir.path(),
            &["train", "--config", bad.to_str().unwrap()]
        )),
        2
    );
    let missing = dir.path().join("absent.txt");
    assert_eq!(
        code(&prdp_in(
            dir.path(),
            &["pretrain", "--config", missing.to_str().unwrap()]
        )),
        2
    );
    assert_eq!(
        code(&prdp_in(
            dir.path(),
            &["sweep", "--axis", "colour", "--values", "1"]
        )),
        2
    );
    assert_eq!(code(&prdp(&["frobnicate"])), 2);
}

#[test]
fn run_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(
        code(&prdp_in(
            dir.path(),
            &["train", "--reference", missing.to_str().unwrap()]
        )),
        1
    );
    let o = prdp_in(
        dir.path(),
        &[
            "train",
            "--override",
            "clip=none",
            "--override",
            "learning_rate=1e8",
            "--override",
            "grad_clip_norm=0",
            "--override",
            "epochs=20",
        ],
    );
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    // the last finite snapshot and the partial metrics are still written
    assert!(dir.path().join("policy.ckpt").exists());
    let stats = parse_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert!(stats.last().unwrap().loss.is_nan());
}

#[test]
fn eval_reports_a_paired_comparison() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&prdp_in(dir.path(), &["train"])), 0);
    let policy = dir.path().join("policy.ckpt");
    let reference = dir.path().join("reference.ckpt");
    let o = prdp_in(
        dir.path(),
        &[
            "eval",
            "--policy",
            policy.to_str().unwrap(),
            "--reference",
            reference.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["policy"]["per_prompt"].as_array().unwrap().len(), 4);
    assert!(report["comparison"]["paired_stderr"].is_number());
    assert!(dir.path().join("eval.json").exists());
    // self-comparison is exactly zero under shared noise
    let o = prdp_in(
        dir.path(),
        &[
            "eval",
            "--policy",
            reference.to_str().unwrap(),
            "--reference",
            reference.to_str().unwrap(),
        ],
    );
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["comparison"]["difference"], 0.0);
    assert_eq!(report["kl"]["mean"], 0.0);
}

#[test]
fn eval_without_reference_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&prdp_in(dir.path(), &["eval", "--policy", "p.ckpt"])),
        2
    );
}

#[test]
fn verify_emits_a_passing_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = prdp_in(dir.path(), &["verify", "--quick"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["pass"], true);
    assert!(report["checks"].as_array().unwrap().len() >= 4);
    assert!(dir.path().join("verify.json").exists());
}

#[test]
fn sweep_writes_table_plots_and_run_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let o = prdp_in(
        dir.path(),
        &["sweep", "--axis", "beta", "--values", "0.1,1"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().starts_with("0.1,ok,"));
    let svg = std::fs::read_to_string(dir.path().join("plots/sweep_kl.svg")).unwrap();
    assert_eq!(svg.matches(r#"<g class="series""#).count(), 2);
    assert!(svg.contains("beta = 1"));
    for v in ["0.1", "1"] {
        assert!(dir.path().join(format!("beta={v}/metrics.csv")).exists());
    }
}
