use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vcilab::tensor::Checkpoint;
use vcilab::training::load_model;

fn vcilab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcilab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("VCILAB_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = vcilab(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

const LINEAR: &str = r#"{"family":"linear_gaussian","covariate_cards":[2],"treatment_levels":3,
"latent_dim":2,"outcome_dim":4,"latent_noise":1.0,"outcome_noise":0.3,"seed":1}"#;
const ONE_STRATUM: &str = r#"{"family":"linear_gaussian","covariate_cards":[1],"treatment_levels":3,
"latent_dim":2,"outcome_dim":4,"latent_noise":1.0,"outcome_noise":0.3,"seed":1}"#;
const BLOB: &str = r#"{"family":"blob_image","resolution":16,"covariate_cards":[2],
"treatment":{"kind":"grid","thickness":[1.2,1.8,2.4],"intensity":[0.4,0.7,1.0]},
"offset_noise":1.0,"max_offset":2.0,"covariate_shift":1.0,"aniso_noise":0.25,"outcome_noise":0.0,"seed":0}"#;
const SMALL: &str = r#"{"latent_dim":2,"encoder_hidden":[8],"decoder_hidden":[8],"discriminator_hidden":[8],
"batch_size":32,"epochs":3}"#;

fn linear_dataset(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    write(dir, "linear.json", LINEAR);
    ok(
        &["generate", "--spec", "linear.json", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", name],
        dir,
    );
    dir.join(name)
}

#[test]
fn generate_writes_deterministic_jsonl_with_metadata() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "blob.json", BLOB);
    ok(&["generate", "--spec", "blob.json", "--n", "10", "--seed", "3", "--out", "a.jsonl"], d.path());
    ok(&["generate", "--spec", "blob.json", "--n", "10", "--seed", "3", "--out", "b.jsonl"], d.path());
    let a = fs::read(d.path().join("a.jsonl")).unwrap();
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 10);
    assert_eq!(a, fs::read(d.path().join("b.jsonl")).unwrap());
    assert!(d.path().join("a.jsonl.meta.json").exists());
}

#[test]
fn invalid_spec_names_the_field() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "bad.json", r#"{"family":"linear_gaussian","covariate_cards":[2]}"#);
    let out = vcilab(&["generate", "--spec", "bad.json", "--n", "5", "--out", "x.jsonl"], d.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("treatment_levels"));
}

#[test]
fn zero_lr_training_keeps_the_initial_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    linear_dataset(d.path(), "train.jsonl", 64, 1);
    write(d.path(), "cfg.json", SMALL);
    ok(
        &[
            "train", "--config", "cfg.json", "--data", "train.jsonl", "--out", "run", "--mode", "hae", "--epochs", "1",
            "--lr", "0",
        ],
        d.path(),
    );
    let run = d.path().join("run");
    let init = load_model(&Checkpoint::read(&run.join("checkpoints/epoch_0000.ckpt")).unwrap()).unwrap();
    let last = load_model(&Checkpoint::read(&run.join("final.ckpt")).unwrap()).unwrap();
    assert_eq!(init.0, last.0);
    assert_eq!(last.2.epochs, 1);

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["mode"], "hae");
    assert_eq!(manifest["config"]["lr"], 0.0);
    assert!(manifest["finished_at"].is_string());
    let meta: serde_json::Value =
        serde_json::from_slice(&fs::read(d.path().join("train.jsonl.meta.json")).unwrap()).unwrap();
    assert_eq!(manifest["datasets"][0]["sha256"], meta["sha256"]);
}

#[test]
fn training_on_a_missing_dataset_fails() {
    let d = tempfile::tempdir().unwrap();
    let out = vcilab(&["train", "--data", "nope.jsonl", "--out", "run"], d.path());
    assert!(!out.status.success());
}

#[test]
fn vci_blob_smoke_run_logs_every_term() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "blob.json", BLOB);
    ok(&["generate", "--spec", "blob.json", "--n", "96", "--seed", "1", "--out", "blob.jsonl"], d.path());
    write(d.path(), "cfg.json", SMALL);
    ok(
        &[
            "train", "--config", "cfg.json", "--data", "blob.jsonl", "--out", "run", "--mode", "vci", "--epochs", "30",
            "--supervision", "adversarial",
        ],
        d.path(),
    );
    let log = fs::read_to_string(d.path().join("run/train_log.csv")).unwrap();
    let mut lines = log.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 30 * 3);
    for col in ["recon", "cf", "kl", "total", "disc"] {
        let j = header.iter().position(|h| *h == col).unwrap();
        assert!(rows.iter().all(|r| r[j].parse::<f64>().is_ok_and(f64::is_finite)), "{col}");
    }
}

#[test]
fn evaluate_metric_selection() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(&["evaluate", "--metrics", "verify_elbo"], d.path());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["verify_elbo"]["scms"], 100);
    assert_eq!(report["verify_elbo"]["scms_passed"], 100);

    linear_dataset(d.path(), "test.jsonl", 50, 2);
    let out = ok(
        &["evaluate", "--checkpoint", "oracle", "--data", "test.jsonl", "--metrics", "cf_mse", "--out", "m.json"],
        d.path(),
    );
    assert!(out.stdout.is_empty());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(report["cf_mse"], 0.0);

    let out = vcilab(&["evaluate", "--metrics", "cf_mse,fid"], d.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("fid") && err.contains("verify_implicit_elbo") && err.contains("oracle_consistency_kl"));
}

#[test]
fn estimate_reports_both_estimators() {
    let d = tempfile::tempdir().unwrap();
    linear_dataset(d.path(), "train.jsonl", 64, 3);
    write(d.path(), "cfg.json", SMALL);
    ok(&["train", "--config", "cfg.json", "--data", "train.jsonl", "--out", "run"], d.path());
    ok(
        &["estimate", "--checkpoint", "run/final.ckpt", "--data", "train.jsonl", "--alpha", "2", "--out", "est"],
        d.path(),
    );
    let body: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("est/estimate.json")).unwrap()).unwrap();
    assert_eq!(body["robust"]["tag"], "robust");
    assert_eq!(body["plug_in_mean"]["tag"], "plug_in_mean");
    assert_eq!(body["robust"]["estimate"].as_array().unwrap().len(), 4);
    let csv = fs::read_to_string(d.path().join("est/estimate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    assert_eq!(fs::read_to_string(d.path().join("est/predictions.jsonl")).unwrap().lines().count(), 64);

    let out = vcilab(
        &["estimate", "--checkpoint", "run/final.ckpt", "--data", "train.jsonl", "--alpha", "7", "--out", "bad"],
        d.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("outside the treatment support"));
}

#[test]
fn covariate_estimate_on_single_stratum_matches_unconditional() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "one.json", ONE_STRATUM);
    ok(&["generate", "--spec", "one.json", "--n", "40", "--seed", "4", "--out", "one.jsonl"], d.path());
    write(d.path(), "cfg.json", SMALL);
    ok(&["train", "--config", "cfg.json", "--data", "one.jsonl", "--out", "run"], d.path());
    let base = ["estimate", "--checkpoint", "run/final.ckpt", "--data", "one.jsonl", "--alpha", "1"];
    ok(&[&base[..], &["--out", "all"]].concat(), d.path());
    ok(&[&base[..], &["--out", "c", "--covariate", "0"]].concat(), d.path());
    let read = |p: &str| -> serde_json::Value { serde_json::from_slice(&fs::read(d.path().join(p)).unwrap()).unwrap() };
    let (a, c) = (read("all/estimate.json"), read("c/estimate.json"));
    assert_eq!(a["robust"], c["robust"]);
    assert_eq!(a["plug_in_mean"], c["plug_in_mean"]);
}

#[test]
fn ablate_tables_are_reproducible() {
    let d = tempfile::tempdir().unwrap();
    linear_dataset(d.path(), "train.jsonl", 64, 5);
    linear_dataset(d.path(), "val.jsonl", 32, 6);
    write(d.path(), "cfg.json", SMALL);
    let args = |out: &'static str| {
        vec![
            "ablate", "--config", "cfg.json", "--data", "train.jsonl", "--validation", "val.jsonl", "--modes", "hae",
            "--seeds", "1", "--out", out,
        ]
    };
    ok(&args("a"), d.path());
    let csv = fs::read_to_string(d.path().join("a/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.starts_with("hae,1,")));

    let mut two = args("b");
    two.extend(["--jobs", "2"]);
    ok(&two, d.path());
    assert_eq!(csv, fs::read_to_string(d.path().join("b/ablation.csv")).unwrap());
}

#[test]
fn output_root_env_relocates_relative_outputs() {
    let d = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    write(d.path(), "linear.json", LINEAR);
    let status = Command::new(env!("CARGO_BIN_EXE_vcilab"))
        .args(["generate", "--spec", "linear.json", "--n", "5", "--out", "x.jsonl"])
        .current_dir(d.path())
        .env("VCILAB_OUTPUT_ROOT", root.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(root.path().join("x.jsonl").exists());
    assert!(!d.path().join("x.jsonl").exists());
}
