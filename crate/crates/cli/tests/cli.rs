use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use maet_core::io::{read_scalar, read_vector};
use maet_core::{ExperimentConfig, PhantomSpec};

fn maet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maet")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let mut cfg = ExperimentConfig::reference(10);
    cfg.inversion.source.max_iter = 20;
    cfg.inversion.resistivity.max_iter = 300;
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn run_ok(args: &[&str]) {
    let o = maet(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn phantom_is_reproducible_and_has_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    run_ok(&["phantom", "--config", &cfg, "--out", out]);
    let first = fs::read(dir.path().join("out/sigma.mfld")).unwrap();
    run_ok(&["phantom", "--config", &cfg, "--out", out]);
    assert_eq!(first, fs::read(dir.path().join("out/sigma.mfld")).unwrap());
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/sigma.json")).unwrap()).unwrap();
    assert_eq!(side["lambda"], 0.2);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/manifest_phantom.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["outputs"]["sigma.mfld"].is_string());
}

#[test]
fn seed_override_changes_random_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::reference(10);
    cfg.phantom = PhantomSpec::RandomBumps {
        background: 1.0,
        count: 3,
        width: [0.1, 0.15],
        amplitude: [-0.3, 0.3],
        inset: 0.2,
    };
    let path = dir.path().join("c.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let p = path.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["phantom", "--config", p, "--out", a.to_str().unwrap(), "--seed", "1"]);
    run_ok(&["phantom", "--config", p, "--out", b.to_str().unwrap(), "--seed", "2"]);
    assert_ne!(fs::read(a.join("sigma.mfld")).unwrap(), fs::read(b.join("sigma.mfld")).unwrap());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let o = maet(&["phantom", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let mut cfg = ExperimentConfig::reference(10);
    cfg.phantom = PhantomSpec::Constant { value: 8.0 };
    fs::write(&bad, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = maet(&["phantom", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not admissible"));
}

#[test]
fn missing_inputs_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = maet(&["forward", "--config", &cfg, "--out", dir.path().join("empty").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn zero_traces_give_zero_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    for stage in ["phantom", "coil-field", "forward", "measure"] {
        run_ok(&[stage, "--config", &cfg, "--out", o]);
    }
    for i in 0..3 {
        let p = out.join(format!("coil0_traces_{i}.csv"));
        let text = fs::read_to_string(&p).unwrap();
        let zeroed: Vec<String> = text
            .lines()
            .map(|l| {
                if l.starts_with('#') {
                    l.to_string()
                } else {
                    let mut f: Vec<&str> = l.split(',').collect();
                    f[4] = "0.0";
                    f.join(",")
                }
            })
            .collect();
        fs::write(&p, zeroed.join("\n") + "\n").unwrap();
    }
    run_ok(&["invert-source", "--config", &cfg, "--out", o]);
    let w = read_vector(&out.join("coil0_w.mfld")).unwrap();
    assert_eq!(w.max_norm(), 0.0);
}

#[test]
fn pipeline_emits_reconstruction_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    run_ok(&["pipeline", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", "1"]);
    let sigma_hat = read_scalar(&out.join("sigma_hat.mfld")).unwrap();
    assert!(sigma_hat.values.iter().all(|v| v.is_finite()));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("stability.json")).unwrap()).unwrap();
    assert!(report["stability"]["params"]["q"].as_f64().unwrap() > 3.0);
    assert!(report["sigma_relative_l1_omega_prime"].as_f64().unwrap().is_finite());
    for stage in ["phantom", "coil-field", "forward", "measure", "invert-source", "recover-current", "recover-sigma", "diagnose", "pipeline"] {
        assert!(out.join(format!("manifest_{stage}.json")).exists(), "{stage}");
    }

    // rerunning a stage on the same inputs reproduces its output
    let before = fs::read(out.join("coil0_jhat.mfld")).unwrap();
    run_ok(&["recover-current", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", "1"]);
    assert_eq!(before, fs::read(out.join("coil0_jhat.mfld")).unwrap());
}

#[test]
fn example_config_roundtrips() {
    let o = maet(&["example-config", "--n", "12"]);
    assert!(o.status.success());
    let cfg = ExperimentConfig::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg.grid.n, 12);
}
