use std::path::Path;
use std::process::{Command, Output};

const LINEAR: &str = r#"
seed = 9
runs = 12
horizon = 14
initial_state = [1.0, 0.0]

[plant]
kind = "linear"
a = [[[1.0, 0.1], [-0.1, 1.02]]]
b = [[[0.0], [0.1]]]
c = [[[1.0, 0.0], [0.0, 1.0]]]

[weights]
early_state = [1.0, 0.1]
late_state = [1.0, 0.1]
switch_time = 7.0
terminal_state = [1.0, 1.0]
control = [0.1]
target = [0.0, 0.0]

[optimizer]
max_iters = 40

[era]
p = 3
q = 3

[noise]
process_cov = [[1e-4, 0.0], [0.0, 1e-4]]
measurement_cov = [[1e-4, 0.0], [0.0, 1e-4]]
"#;

fn sepctl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sepctl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("linear.toml"), LINEAR).unwrap();
    dir
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = setup();
    let out = sepctl(&["pipeline", "--config", "linear.toml", "--out", "out"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["nominal.json", "realization.json", "gains.json", "stats.json", "ensemble.csv", "stats.csv", "nominal.csv"] {
        assert!(dir.path().join("out").join(f).exists(), "{f} missing");
    }
    let ensemble = std::fs::read_to_string(dir.path().join("out/ensemble.csv")).unwrap();
    assert_eq!(ensemble.lines().next(), Some("run,k,t,x1,x2,u1"));
    assert_eq!(ensemble.lines().count(), 1 + 12 * 15);

    let again = sepctl(&["pipeline", "--config", "linear.toml", "--out", "out"], dir.path());
    assert!(String::from_utf8_lossy(&again.stderr).contains("montecarlo up to date"));
}

#[test]
fn flags_override_the_config() {
    let dir = setup();
    let out = sepctl(
        &["montecarlo", "--config", "linear.toml", "--out", "json", "--runs", "3", "--seed", "4", "--format", "json"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("json/ensemble.json")).unwrap()).unwrap();
    assert_eq!(records.as_array().unwrap().len(), 3);
}

#[test]
fn single_stages_stop_early() {
    let dir = setup();
    assert!(sepctl(&["optimize", "--config", "linear.toml"], dir.path()).status.success());
    assert!(dir.path().join("out/nominal.json").exists());
    assert!(!dir.path().join("out/realization.json").exists());
    let identify = sepctl(&["identify", "--config", "linear.toml", "--markov-step", "8"], dir.path());
    assert!(identify.status.success());
    assert!(String::from_utf8_lossy(&identify.stdout).contains("markov relative error"));
    assert!(dir.path().join("out/markov.csv").exists());
    assert!(!dir.path().join("out/gains.json").exists());
    assert!(sepctl(&["gains", "--config", "linear.toml"], dir.path()).status.success());
    assert!(dir.path().join("out/gains.json").exists());
    let run = sepctl(&["run", "--config", "linear.toml"], dir.path());
    assert!(run.status.success());
    let csv = std::fs::read_to_string(dir.path().join("out/run.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 15);
}

#[test]
fn failures_have_distinct_exit_codes() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.toml"), "horizon = 0\n").unwrap();
    assert_eq!(sepctl(&["pipeline", "--config", "bad.toml"], dir.path()).status.code(), Some(2));
    assert_eq!(sepctl(&["pipeline", "--config", "missing.toml"], dir.path()).status.code(), Some(1));

    // a nominal that was hand-edited no longer matches its own rollout, so
    // identification refuses it
    assert!(sepctl(&["optimize", "--config", "linear.toml"], dir.path()).status.success());
    let path = dir.path().join("out/nominal.json");
    let mut env: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    env["payload"]["trajectory"][3][0] = serde_json::json!(42.0);
    let payload = serde_json::to_string(&env["payload"]).unwrap();
    env["payload_hash"] = serde_json::json!(sha_hex(&payload));
    std::fs::write(&path, serde_json::to_string(&env).unwrap()).unwrap();
    let out = sepctl(&["identify", "--config", "linear.toml"], dir.path());
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

fn sha_hex(text: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[test]
fn default_config_round_trips() {
    let dir = setup();
    let out = sepctl(&["default-config"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let parsed = sepctl::harness::ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(parsed, sepctl::harness::ExperimentConfig::default());
}
