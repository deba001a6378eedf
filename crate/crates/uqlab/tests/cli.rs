//! Black-box checks of the command-line interface: exit codes, error
//! wording, and artifact determinism.

use std::path::Path;
use std::process::Command;

fn uqlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_uqlab"))
}

#[test]
fn gen_data_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.mman");
    let b = dir.path().join("b.mman");
    for out in [&a, &b] {
        let status = uqlab()
            .args(["gen-data", "--n", "100", "--seed", "0", "--out"])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn train_without_dataset_names_the_missing_file() {
    let out = uqlab()
        .args(["train", "--method", "hmc", "--data", "no-such-file.mman", "--out", "x.bin"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("no-such-file.mman"),
        "stderr must name the missing input, got: {stderr}"
    );
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let out = uqlab()
        .args(["--set", "no.such.key=1", "run", "--experiment", "spheres_invariance"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no.such.key"), "got: {stderr}");
}

#[test]
fn unknown_experiment_is_a_runtime_error_listing_names() {
    let out = uqlab()
        .args(["run", "--experiment", "fig0_bogus"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("fig0_bogus") && stderr.contains("spheres_invariance"));
}

#[test]
fn map_train_attack_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.mman");
    let model = dir.path().join("m.uqad");
    let report = dir.path().join("attack.csv");
    let run = |args: &[&str]| {
        let out = uqlab().args(args).output().unwrap();
        assert!(
            out.status.success(),
            "command {:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
        out
    };
    run(&["gen-data", "--n", "150", "--out", data.to_str().unwrap()]);
    run(&[
        "train",
        "--method",
        "map",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ]);
    run(&[
        "attack",
        "--method",
        "mim",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("trajectory,step,"), "got header: {}", &csv[..60]);
    assert!(csv.lines().count() > 10);
}

#[test]
fn run_then_eval_prints_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap().to_string();
    let set = format!("out_dir={out_dir}");
    let status = uqlab()
        .args(["--set", &set, "run", "--experiment", "spheres_invariance"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(Path::new(&out_dir).join("spheres_invariance.csv").is_file());
    let out = uqlab()
        .args(["--set", &set, "eval", "--report", "spheres_invariance"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("entropy_unit = nats"));
    assert!(stdout.contains("radial_on_sphere_success"));
}

#[test]
fn eval_before_run_reports_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let set = format!("out_dir={}", dir.path().display());
    let out = uqlab()
        .args(["--set", &set, "eval", "--report", "lemma1_audit"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lemma1_audit_summary.txt"), "got: {stderr}");
}

#[test]
fn config_file_and_override_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(
        &cfg_path,
        "# comment line\ndata.n = 40\ndata.n = 60\nseed = 5\n",
    )
    .unwrap();
    let data = dir.path().join("d.mman");
    // file gives n=60 (last duplicate wins); the CLI flag wins over both
    let out = uqlab()
        .arg("--config")
        .arg(&cfg_path)
        .args(["gen-data", "--out", data.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("wrote 60 points"));
    let out = uqlab()
        .arg("--config")
        .arg(&cfg_path)
        .args(["gen-data", "--n", "25", "--out", data.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("wrote 25 points"));
}
