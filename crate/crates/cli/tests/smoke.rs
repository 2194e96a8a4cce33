//! End-to-end smoke test of the `everify` binary: the four-stage pipeline,
//! the one-shot runner, and the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
name = smoke
dataset = blobs
blobs_per_class = 60
blobs_classes = 4
blobs_dim = 4
blobs_spread = 0.2
layers = 4,12,4
train_epochs = 25
esr = 0.05
target_count = 30
perturb_iters = 40
objective_lr = 0.6
seed = 11
";

fn everify(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_everify"))
        .args(args)
        .output()
        .expect("binary spawns")
}

fn path_arg(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("smoke.conf");
    std::fs::write(&conf, CONFIG).unwrap();
    let ckpt = dir.path().join("trained.evec");
    let request = dir.path().join("request");
    let unlearned = dir.path().join("unlearned.evec");

    let out = everify(&["train", "--config", &path_arg(&conf), "--out", &path_arg(&ckpt)]);
    assert!(out.status.success(), "train: {}", String::from_utf8_lossy(&out.stderr));

    let out = everify(&[
        "perturb", "--config", &path_arg(&conf), "--ckpt", &path_arg(&ckpt),
        "--out-dir", &path_arg(&request),
    ]);
    assert!(out.status.success(), "perturb: {}", String::from_utf8_lossy(&out.stderr));
    for f in ["original.csv", "perturbed.csv", "targets.csv", "metadata.json"] {
        assert!(request.join(f).exists(), "missing {f}");
    }

    let out = everify(&[
        "unlearn", "--config", &path_arg(&conf), "--ckpt", &path_arg(&ckpt),
        "--request", &path_arg(&request), "--out", &path_arg(&unlearned),
    ]);
    assert!(out.status.success(), "unlearn: {}", String::from_utf8_lossy(&out.stderr));

    // the unlearned model mispredicts the targets; the original does not
    let verdict = dir.path().join("verdict.json");
    let targets = request.join("targets.csv");
    let out = everify(&[
        "verify", "--config", &path_arg(&conf), "--ckpt", &path_arg(&unlearned),
        "--targets", &path_arg(&targets), "--json", &path_arg(&verdict),
    ]);
    assert!(out.status.success(), "verify: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&verdict).unwrap()).unwrap();
    assert!(report["uv"].as_f64().unwrap() >= 0.5);

    let out = everify(&[
        "verify", "--config", &path_arg(&conf), "--ckpt", &path_arg(&ckpt),
        "--targets", &path_arg(&targets), "--json", &path_arg(&verdict),
    ]);
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&verdict).unwrap()).unwrap();
    assert_eq!(report["uv"].as_f64().unwrap(), 0.0);
}

#[test]
fn run_and_sweep_emit_csv() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("smoke.conf");
    std::fs::write(&conf, CONFIG).unwrap();

    let report = dir.path().join("run.csv");
    let out = everify(&["run", "--config", &path_arg(&conf), "--report", &path_arg(&report)]);
    assert!(out.status.success(), "run: {}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("scenario,seed,esr,d,"));
    assert_eq!(text.lines().count(), 2);

    let report = dir.path().join("sweep.csv");
    let out = everify(&[
        "sweep", "--config", &path_arg(&conf), "--axis", "d", "--grid", "0.1,0.3",
        "--report", &path_arg(&report),
    ]);
    assert!(out.status.success(), "sweep: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), 3);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    let out = everify(&["train", "--config", &path_arg(&bad), "--out", &path_arg(&dir.path().join("x.evec"))]);
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("missing.conf");
    let out = everify(&["train", "--config", &path_arg(&missing), "--out", &path_arg(&dir.path().join("x.evec"))]);
    assert_eq!(out.status.code(), Some(4));

    // a config whose confidence bar no model can meet -> insufficient targets
    let conf = dir.path().join("greedy.conf");
    std::fs::write(&conf, format!("{CONFIG}conf_threshold = 0.999999\n")).unwrap();
    let ckpt = dir.path().join("trained.evec");
    let good = dir.path().join("good.conf");
    std::fs::write(&good, CONFIG).unwrap();
    assert!(everify(&["train", "--config", &path_arg(&good), "--out", &path_arg(&ckpt)]).status.success());
    let out = everify(&[
        "perturb", "--config", &path_arg(&conf), "--ckpt", &path_arg(&ckpt),
        "--out-dir", &path_arg(&dir.path().join("req")),
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
