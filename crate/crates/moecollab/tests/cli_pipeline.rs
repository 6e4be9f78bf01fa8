//! End-to-end exercise of the command-line surface: synthesize a corpus, walk
//! it through pretrain / train-expert / register / train-gate / eval / route /
//! stats in a temp directory, and check the documented exit codes.

use serde_json::Value;
use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moecollab"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_err(cmd: &mut Command) -> (i32, String) {
    let out = cmd.output().unwrap();
    assert!(!out.status.success(), "command unexpectedly succeeded");
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn read_run_json(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("run.json")).unwrap()).unwrap()
}

/// Synthesizes a small 2-domain corpus and pretrains an encoder into
/// `dir/reg`, returning the paths the later stages need.
fn seed_pipeline(dir: &Path) {
    run_ok(
        bin()
            .arg("synth")
            .args(["--num-domains", "2"])
            .args(["--classes-per-domain", "3,2"])
            .args(["--samples-per-class", "12"])
            .args(["--doc-length", "8"])
            .args(["--noise-rate", "0.1"])
            .arg("--out-dir")
            .arg(dir.join("data")),
    );
    run_ok(
        bin()
            .arg("pretrain")
            .arg("--corpus")
            .arg(dir.join("data/train.jsonl"))
            .arg("--registry-dir")
            .arg(dir.join("reg"))
            .arg("--out-dir")
            .arg(dir.join("pre"))
            .args(["--epochs", "2"])
            .args(["--lr", "3e-3"])
            .args(["--hidden-dim", "16"])
            .args(["--layers", "1"])
            .args(["--heads", "2"])
            .args(["--ff-dim", "24"])
            .args(["--max-len", "12"])
            .args(["--vocab-size", "128"]),
    );
}

fn train_and_register(dir: &Path, domain: &str) {
    let out = dir.join(format!("expert-{domain}"));
    run_ok(
        bin()
            .arg("train-expert")
            .arg("--corpus")
            .arg(dir.join("data/train.jsonl"))
            .arg("--registry-dir")
            .arg(dir.join("reg"))
            .arg("--out-dir")
            .arg(&out)
            .args(["--domain", domain])
            .args(["--expert-id", &format!("exp-{domain}")])
            .args(["--adapter-dim", "4"])
            .args(["--epochs", "4"])
            .args(["--lr", "2e-2"]),
    );
    run_ok(
        bin()
            .arg("register")
            .arg("--bundle")
            .arg(out.join(format!("exp-{domain}-1.0.0.moec")))
            .arg("--registry-dir")
            .arg(dir.join("reg"))
            .arg("--out-dir")
            .arg(dir.join("regout")),
    );
}

#[test]
fn full_pipeline_runs_and_reports_consistent_json() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    seed_pipeline(dir);

    // synth left a reproducible run.json and the three corpus files
    let run = read_run_json(&dir.join("data"));
    assert_eq!(run["command"], "synth");
    assert_eq!(run["config"]["samples_per_class"], 12);
    for f in ["corpus.jsonl", "train.jsonl", "eval.jsonl"] {
        assert!(dir.join("data").join(f).exists(), "missing {f}");
    }

    // pretrain populated the registry and wrote its report pair
    assert!(dir.join("reg/encoder.moec").exists());
    assert!(dir.join("pre/report.json").exists());
    assert!(dir.join("pre/report.csv").exists());
    assert_eq!(read_run_json(&dir.join("pre"))["command"], "pretrain");

    train_and_register(dir, "d0");
    train_and_register(dir, "d1");

    // registering the same bundle twice is a compatibility failure (exit 3)
    let (code, stderr) = run_err(
        bin()
            .arg("register")
            .arg("--bundle")
            .arg(dir.join("expert-d0/exp-d0-1.0.0.moec"))
            .arg("--registry-dir")
            .arg(dir.join("reg"))
            .arg("--out-dir")
            .arg(dir.join("regout")),
    );
    assert_eq!(code, 3, "stderr: {stderr}");
    assert!(stderr.contains("already registered"), "stderr: {stderr}");

    run_ok(
        bin()
            .arg("train-gate")
            .arg("--corpus")
            .arg(dir.join("data/train.jsonl"))
            .arg("--registry-dir")
            .arg(dir.join("reg"))
            .arg("--out-dir")
            .arg(dir.join("gate"))
            .args(["--experts", "exp-d0,exp-d1"])
            .args(["--epochs", "3"])
            .args(["--lr", "3e-2"]),
    );
    assert!(dir.join("reg/gate.moec").exists());

    // eval prints machine-readable JSON with routing detail
    let eval_stdout = run_ok(
        bin()
            .arg("eval")
            .arg("--corpus")
            .arg(dir.join("data/eval.jsonl"))
            .arg("--registry-dir")
            .arg(dir.join("reg"))
            .arg("--out-dir")
            .arg(dir.join("evalout"))
            .args(["--experts", "exp-d0,exp-d1"]),
    );
    let eval: Value = serde_json::from_str(&eval_stdout).unwrap();
    assert!(eval["accuracy"].as_f64().unwrap() > 0.5);
    assert!(eval["macro_f1"].as_f64().is_some());
    assert_eq!(eval["experts"], serde_json::json!(["exp-d0", "exp-d1"]));
    assert_eq!(eval["per_domain"].as_array().unwrap().len(), 2);
    let util: Vec<f64> = eval["utilization"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!((util.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    // the implicit gate (registry gate.moec) and an explicit --gate agree
    let explicit_stdout = run_ok(
        bin()
            .arg("eval")
            .arg("--corpus")
            .arg(dir.join("data/eval.jsonl"))
            .arg("--registry-dir")
            .arg(dir.join("reg"))
            .arg("--out-dir")
            .arg(dir.join("evalout2"))
            .args(["--experts", "exp-d0,exp-d1"])
            .arg("--gate")
            .arg(dir.join("reg/gate.moec")),
    );
    assert_eq!(eval_stdout, explicit_stdout);

    // route reports a full weight/logit breakdown for one text
    let route_stdout = run_ok(
        bin()
            .arg("route")
            .arg("--registry-dir")
            .arg(dir.join("reg"))
            .arg("--out-dir")
            .arg(dir.join("route"))
            .args(["--text", "w0_0_1 w0_0_2 w0_0_3"])
            .args(["--experts", "exp-d0,exp-d1"]),
    );
    let route: Value = serde_json::from_str(&route_stdout).unwrap();
    let weights: Vec<f64> = route["gate_weights"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(weights.len(), 2);
    assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let top = route["top_expert"].as_str().unwrap();
    assert!(top == "exp-d0" || top == "exp-d1");
    let per_expert = route["per_expert_logits"].as_array().unwrap();
    assert_eq!(per_expert[0]["logits"].as_array().unwrap().len(), 3);
    assert_eq!(per_expert[1]["logits"].as_array().unwrap().len(), 2);

    // stats flattens the gate report to epoch x expert CSV
    run_ok(
        bin()
            .arg("stats")
            .arg("--report")
            .arg(dir.join("gate/report.json"))
            .arg("--out-dir")
            .arg(dir.join("statsout"))
            .arg("--out")
            .arg(dir.join("statsout/stats.csv")),
    );
    let csv = fs::read_to_string(dir.join("statsout/stats.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,expert,utilization,routing_entropy");
    assert_eq!(lines.len(), 1 + 3 * 2, "3 epochs x 2 experts");
}

#[test]
fn invalid_noise_rate_is_reported_as_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, stderr) = run_err(
        bin()
            .arg("synth")
            .args(["--noise-rate", "1.5"])
            .arg("--out-dir")
            .arg(tmp.path().join("data")),
    );
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(stderr.contains("noise"), "stderr: {stderr}");
}

#[test]
fn unknown_domain_is_reported_with_the_known_names() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    seed_pipeline(dir);
    let (code, stderr) = run_err(
        bin()
            .arg("train-expert")
            .arg("--corpus")
            .arg(dir.join("data/train.jsonl"))
            .arg("--registry-dir")
            .arg(dir.join("reg"))
            .arg("--out-dir")
            .arg(dir.join("expert-x"))
            .args(["--domain", "nope"])
            .args(["--expert-id", "exp-x"]),
    );
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(stderr.contains("unknown domain"), "stderr: {stderr}");
    assert!(stderr.contains("d0"), "stderr: {stderr}");
}

#[test]
fn bundle_from_a_different_encoder_is_rejected_on_register() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    seed_pipeline(dir);
    train_and_register(dir, "d0");

    // a second registry pretrained with another seed has another fingerprint
    run_ok(
        bin()
            .arg("pretrain")
            .arg("--corpus")
            .arg(dir.join("data/train.jsonl"))
            .arg("--registry-dir")
            .arg(dir.join("reg2"))
            .arg("--out-dir")
            .arg(dir.join("pre2"))
            .args(["--seed", "8"])
            .args(["--epochs", "1"])
            .args(["--hidden-dim", "16"])
            .args(["--layers", "1"])
            .args(["--heads", "2"])
            .args(["--ff-dim", "24"])
            .args(["--max-len", "12"])
            .args(["--vocab-size", "128"]),
    );
    let (code, stderr) = run_err(
        bin()
            .arg("register")
            .arg("--bundle")
            .arg(dir.join("expert-d0/exp-d0-1.0.0.moec"))
            .arg("--registry-dir")
            .arg(dir.join("reg2"))
            .arg("--out-dir")
            .arg(dir.join("regout2")),
    );
    assert_eq!(code, 3, "stderr: {stderr}");
    assert!(stderr.contains("incompatible"), "stderr: {stderr}");
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, stderr) = run_err(
        bin()
            .arg("eval")
            .arg("--corpus")
            .arg(tmp.path().join("eval.jsonl"))
            .arg("--registry-dir")
            .arg(tmp.path().join("reg")),
    );
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(stderr.contains("--experts"), "stderr: {stderr}");
}

#[test]
fn registry_dir_can_come_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    seed_pipeline(dir);
    train_and_register(dir, "d0");
    let stdout = run_ok(
        bin()
            .env("MOECOLLAB_REGISTRY", dir.join("reg"))
            .arg("route")
            .arg("--out-dir")
            .arg(dir.join("route-env"))
            .args(["--text", "hello there"])
            .args(["--experts", "exp-d0"]),
    );
    let route: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(route["gate_weights"].as_array().unwrap().len(), 1);
    assert_eq!(route["top_expert"], "exp-d0");
}

#[test]
fn exit_codes_cover_the_failure_classes() {
    use moecollab::error::Error;
    assert_eq!(Error::NonFinite("loss").exit_code(), 4);
    assert_eq!(
        Error::DuplicateVersion {
            expert_id: "e".into(),
            version: "1.0.0".into()
        }
        .exit_code(),
        3
    );
    assert_eq!(Error::Validation("bad".into()).exit_code(), 2);
}
