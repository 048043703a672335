use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
kind = "highway"
seed = 11
[verification]
samples = 100
[datasets]
prior = 10
certify = 20
test = 10
[training]
iterations = 3
n_pairs = 2
batch_size = 4
[certify]
policies = 3
delta = 0.05
[evaluate]
disturbance_draws = 1
"#;

fn funnelpac(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_funnelpac"))
        .arg("--config")
        .arg(dir.join("config.toml"))
        .arg("--out")
        .arg(dir.join("run"))
        .args(args)
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("config.toml"), SMALL).unwrap();
    d
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn stages_run_in_sequence() {
    let d = setup();
    for stage in ["build-library", "sample-envs", "train-prior", "certify", "evaluate"] {
        ok(&funnelpac(d.path(), &[stage, "--workers", "2"]));
    }
    let run = d.path().join("run");
    for f in [
        "library.json",
        "envs_prior.json",
        "prior.json",
        "certificate.json",
        "report.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let report = run.join("report.json");
    let o = funnelpac(d.path(), &["plot-data", "--report", report.to_str().unwrap()]);
    ok(&o);
    let listed = String::from_utf8_lossy(&o.stdout);
    assert!(listed.contains("bars.csv"));
    let bars = std::fs::read_to_string(run.join("plots").join("bars.csv")).unwrap();
    assert_eq!(bars.lines().count(), 2);
}

#[test]
fn single_role_sampling_respects_count() {
    let d = setup();
    ok(&funnelpac(d.path(), &["sample-envs", "--role", "test", "--count", "3"]));
    let text = std::fs::read_to_string(d.path().join("run/envs_test.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["body"]["environments"].as_array().unwrap().len(), 3);
    assert!(!d.path().join("run/envs_prior.json").exists());
}

#[test]
fn invalid_config_exits_with_2() {
    let d = setup();
    std::fs::write(d.path().join("config.toml"), "unknown_key = 1\n").unwrap();
    assert_eq!(funnelpac(d.path(), &["build-library"]).status.code(), Some(2));
}

#[test]
fn invalid_argument_exits_with_2() {
    let d = setup();
    assert_eq!(
        funnelpac(d.path(), &["build-library", "--arm", "bogus"]).status.code(),
        Some(2)
    );
}

#[test]
fn missing_upstream_artifact_fails() {
    let d = setup();
    let o = funnelpac(d.path(), &["train-prior"]);
    assert!(!o.status.success());
}

#[test]
fn tampered_artifact_exits_with_5() {
    let d = setup();
    ok(&funnelpac(d.path(), &["build-library"]));
    ok(&funnelpac(d.path(), &["sample-envs"]));
    let p = d.path().join("run/envs_prior.json");
    let mut text = std::fs::read_to_string(&p).unwrap();
    text.push(' ');
    std::fs::write(&p, text).unwrap();
    assert_eq!(funnelpac(d.path(), &["train-prior"]).status.code(), Some(5));
}

#[test]
fn nominal_arm_runs_end_to_end() {
    let d = setup();
    let o = funnelpac(d.path(), &["run-all", "--arm", "nominal"]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("C_PAC"));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["highway.toml", "obstacle_field.toml"] {
        let o = Command::new(env!("CARGO_BIN_EXE_funnelpac"))
            .arg("--config")
            .arg(dir.join(name))
            .args(["sample-envs", "--role", "test", "--count", "1", "--out"])
            .arg(tempfile::tempdir().unwrap().path().join("run"))
            .output()
            .unwrap();
        ok(&o);
    }
}
