//! End-to-end checks of the binary: exit-code contract, config handling
//! and byte-identical artifacts across reruns with the same seed.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hktwist"))
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

#[test]
fn unknown_command_exits_64() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(64));
}

#[test]
fn missing_config_block_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.json");
    std::fs::write(&cfg, "{}").unwrap();
    let out = bin()
        .args(["tba", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn schema_violation_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    // non-antisymmetric pairing
    std::fs::write(
        &cfg,
        r#"{ "spectrum": { "rank": 2, "pairing": [[0,1],[1,0]],
             "generators": [
               {"Z": [0.0,1.0], "theta": 0.0, "Omega": 1, "sigma": -1},
               {"Z": [1.0,0.0], "theta": 0.0, "Omega": 0, "sigma": -1}],
             "r": 1.0 } }"#,
    )
    .unwrap();
    let out = bin()
        .args(["tba", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("spectrum.pairing"), "{err}");
}

#[test]
fn numerical_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small_r.json");
    // R far too small for the branch condition |X^sf| < 1 on the ray
    std::fs::write(
        &cfg,
        r#"{ "spectrum": { "rank": 2, "pairing": [[0,1],[-1,0]],
             "generators": [
               {"Z": [0.0,1.0], "theta": 0.0, "Omega": 1, "sigma": -1},
               {"Z": [1.0,0.0], "theta": 0.0, "Omega": 0, "sigma": -1}],
             "r": 0.001 } }"#,
    )
    .unwrap();
    let out = bin()
        .args(["tba", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{out:?}");
}

#[test]
fn saddles_config_finds_pi_over_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["saddles", "--config"])
        .arg(repo_config("saddles_cross.json"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{out:?}");
    let text = std::fs::read_to_string(dir.path().join("saddles.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let events = v["events"].as_array().unwrap();
    assert_eq!(events.len(), 1);
    let theta_c = events[0]["theta_c"].as_f64().unwrap();
    assert!((theta_c - std::f64::consts::FRAC_PI_2).abs() < 1e-3);
}

#[test]
fn tba_trivial_spectrum_one_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["tba", "--config"])
        .arg(repo_config("tba_trivial.json"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("converged in 1 iteration"), "{stdout}");
    let text = std::fs::read_to_string(dir.path().join("tba.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for c in v["corrections_at_minus_one"].as_array().unwrap() {
        let lc = c["log_correction"].as_array().unwrap();
        assert_eq!(lc[0].as_f64().unwrap(), 0.0);
        assert_eq!(lc[1].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn selftest_deterministic_across_runs() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let out = bin()
            .args(["selftest", "--seed", "777", "--out"])
            .arg(dir.path())
            .output()
            .unwrap();
        assert!(out.status.success(), "{out:?}");
    }
    let mut names: Vec<String> = std::fs::read_dir(dir_a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        let a = std::fs::read(dir_a.path().join(&name)).unwrap();
        let b = std::fs::read(dir_b.path().join(&name)).unwrap();
        assert_eq!(a, b, "artifact {name} differs between identical runs");
    }
}
