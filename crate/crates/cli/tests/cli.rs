use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const PRESET_SHA256: &str = "39618f9cc5f25b19be0fcd38fb1375398e7c638ed898e544fdf59a739bf026c4";

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn takeover(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_takeover"))
        .args(args)
        .current_dir(root())
        .env("TAKEOVER_OUT", out)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn preset_is_pinned() {
    let bytes = fs::read(root().join("presets/default.toml")).unwrap();
    let hex: String = Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    assert_eq!(
        hex, PRESET_SHA256,
        "presets/default.toml changed; review and update the pin"
    );
}

#[test]
fn print_config_reproduces_the_preset() {
    let o = Command::new(env!("CARGO_BIN_EXE_takeover"))
        .arg("print-config")
        .env_remove("TAKEOVER_OUT")
        .output()
        .unwrap();
    assert!(o.status.success());
    let preset = fs::read_to_string(root().join("presets/default.toml")).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), preset);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "run",
        "--task",
        "A",
        "--condition",
        "proposed",
        "--seed",
        "7",
    ];
    assert!(takeover(&args, a.path()).status.success());
    assert!(takeover(&args, b.path()).status.success());
    let rel = "default/p01/A_proposed.csv";
    let x = fs::read(a.path().join(rel)).unwrap();
    assert!(!x.is_empty());
    assert_eq!(x, fs::read(b.path().join(rel)).unwrap());
    assert!(a.path().join("default/p01/A_proposed.json").exists());
}

#[test]
fn baseline_run_has_no_haptic_torque() {
    let dir = tempfile::tempdir().unwrap();
    let o = takeover(
        &[
            "run",
            "--task",
            "B",
            "--condition",
            "baseline",
            "--participant",
            "4",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(dir.path().join("default/p04/B_baseline.csv")).unwrap();
    let col = rdr
        .headers()
        .unwrap()
        .iter()
        .position(|h| h == "T_hpt")
        .unwrap();
    let mut n = 0;
    for rec in rdr.records() {
        assert_eq!(rec.unwrap()[col].parse::<f64>().unwrap(), 0.0);
        n += 1;
    }
    assert!(n > 100);
}

#[test]
fn noise_flag_changes_the_log() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "run",
        "--task",
        "B",
        "--condition",
        "proposed",
        "--seed",
        "3",
    ];
    assert!(takeover(&[&args[..], &["--noise"]].concat(), a.path())
        .status
        .success());
    assert!(takeover(&[&args[..], &["--no-noise"]].concat(), b.path())
        .status
        .success());
    let rel = "default/p01/B_proposed.csv";
    assert_ne!(
        fs::read(a.path().join(rel)).unwrap(),
        fs::read(b.path().join(rel)).unwrap()
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = takeover(
        &["run", "--task", "C", "--condition", "proposed"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(takeover(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(takeover(&["--help"], dir.path()).status.code(), Some(0));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[haptic_mpc]\nW = 100\nWW = 3\n").unwrap();
    let o = takeover(
        &[
            "run",
            "--task",
            "A",
            "--condition",
            "proposed",
            "--config",
            cfg.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 3") && err.contains("WW"), "{err}");

    let o = takeover(
        &[
            "run",
            "--task",
            "A",
            "--condition",
            "proposed",
            "--participant",
            "99",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dotted_keys_override_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "haptic_mpc.W = 50\nexperiment.name = \"small\"\n").unwrap();
    let o = takeover(
        &["print-config", "--config", cfg.to_str().unwrap()],
        dir.path(),
    );
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(
        text.contains("name = \"small\"") && text.contains("tracking_weight = 50.0"),
        "{text}"
    );
}

#[test]
fn single_participant_cohort_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = takeover(&["cohort", "--participants", "1"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let exp = dir.path().join("default");
    for f in [
        "cohort_summary.csv",
        "stats.json",
        "boxplot_data.csv",
        "p01/A_baseline.csv",
        "p01/B_proposed.json",
    ] {
        assert!(exp.join(f).exists(), "{f}");
    }
    let stats: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(exp.join("stats.json")).unwrap()).unwrap();
    assert!(stats["tasks"]["A"]["notice"]
        .as_str()
        .unwrap()
        .contains("skipped"));
    assert!(stats["failures"].is_array());
    assert!(String::from_utf8_lossy(&o.stdout).contains("skipped"));
}

#[test]
fn validate_tables_reports_missing_participant() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(root().join("data/task_b.csv")).unwrap();
    let cut: String = text
        .lines()
        .filter(|l| !l.starts_with("7,"))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.path().join("b.csv");
    fs::write(&path, cut).unwrap();
    let o = takeover(
        &["validate-tables", "--task-b", path.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("missing participant 7"),
        "{}",
        stderr(&o)
    );
}
