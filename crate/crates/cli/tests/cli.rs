use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn rskip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rskip"))
        .args(args)
        .env_remove("RSKIP_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rskip(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn assert_hashes_match(dir: &Path) {
    let m = manifest(dir);
    let artifacts = m["artifacts"].as_array().unwrap();
    assert!(!artifacts.is_empty());
    for a in artifacts {
        let bytes = std::fs::read(dir.join(a["path"].as_str().unwrap())).unwrap();
        assert_eq!(a["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
}

const TINY: &[&str] = &[
    "--depth", "2", "--width", "8", "--subset", "120", "--test-subset", "60", "--classes", "3", "--epochs", "2",
];

#[test]
fn ratio_check_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["ratio-check", "--lambda", "3", "--instances", "10", "--out", out]);
    let csv = std::fs::read_to_string(dir.path().join("ratio_check.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "lambda,instances,max_reconstruction_error,max_ratio_discrepancy,max_extra_term_relative"
    );
    assert_eq!(lines.len(), 4);
    for line in &lines[1..] {
        let rec: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(rec <= 1e-10);
    }
    assert_eq!(manifest(dir.path())["command"], "ratio-check");
    assert_hashes_match(dir.path());
}

#[test]
fn gradcheck_passes_for_every_construction() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["gradcheck", "--instances", "2", "--out", dir.path().to_str().unwrap()]);
    assert!(!stdout.contains("FAIL"), "{stdout}");
    assert!(stdout.contains("4rSkip+LN"));
    assert_hashes_match(dir.path());
}

#[test]
fn train_is_reproducible_and_checkpoint_feeds_gradnorm() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let mut args = vec!["train", "--construction", "2rSkip+LN", "--out", d.path().to_str().unwrap()];
        args.extend_from_slice(TINY);
        ok(&args);
    }
    for f in ["results.csv", "model.ckpt"] {
        assert!(
            std::fs::read(a.path().join(f)).unwrap() == std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
    assert_eq!(manifest(a.path())["artifacts"], manifest(b.path())["artifacts"]);
    let results = std::fs::read_to_string(a.path().join("results.csv")).unwrap();
    assert!(results.starts_with("row,method,architecture,lambda,g,seed,runs,error,std,median,failed,failed_epoch"));
    assert!(results.contains("run,2rSkip+LN,MLP-2x8"));
    assert!(results.contains("summary,2rSkip+LN,MLP-2x8"));

    let g = tempfile::tempdir().unwrap();
    let ckpt = a.path().join("model.ckpt");
    let mut args = vec![
        "gradnorm",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--samples",
        "50",
        "--out",
        g.path().to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    let csv = std::fs::read_to_string(g.path().join("gradnorm.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "construction,block_index,mean_grad_norm");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("2rSkip+LN,1,"));
    assert_hashes_match(g.path());
}

#[test]
fn kind_name_with_lambda_selects_construction() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "train",
        "--construction",
        "xskip-ln",
        "--lambda",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    let stdout = ok(&args);
    assert!(stdout.starts_with("3xSkip+LN"), "{stdout}");
}

#[test]
fn matrix_writes_run_and_summary_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "matrix",
        "--constructions",
        "1xSkip,2xSkip+LN",
        "--seeds",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("run,")).count(), 4);
    assert_eq!(csv.lines().filter(|l| l.starts_with("summary,")).count(), 2);
}

#[test]
fn bad_inputs_exit_with_an_error() {
    let out = rskip(&["train", "--construction", "nonsense", "--epochs", "0"]);
    assert!(!out.status.success());
    let out = rskip(&["train", "--dataset", "cifar10", "--epochs", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("RSKIP_DATA_DIR"));
    let out = rskip(&["ratio-check", "--lambda", "0"]);
    assert!(!out.status.success());
}
