use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn default_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

fn fdx(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdx"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn stationary_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = fdx(&["stationary"], &default_config(), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["grid.csv", "stationary.csv", "stationary.json"] {
        assert!(dir.path().join("stationary").join(f).is_file(), "missing {f}");
    }
    let csv = fs::read_to_string(dir.path().join("stationary/grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 402);
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(default_config()).unwrap();
    let bad = text.replace("nodes = 401", "nodes = 4");
    assert_ne!(bad, text);
    let path = dir.path().join("bad.toml");
    fs::write(&path, bad).unwrap();
    let out = fdx(&["stationary"], &path, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n >= 16"));

    fs::write(&path, "[domain]\nnodez = 10\n").unwrap();
    assert_eq!(fdx(&["stationary"], &path, dir.path()).status.code(), Some(2));
    let missing = dir.path().join("absent.toml");
    assert_eq!(fdx(&["stationary"], &missing, dir.path()).status.code(), Some(2));
}

#[test]
fn spectrum_reports_the_ladder() {
    let dir = tempfile::tempdir().unwrap();
    let out = fdx(&["spectrum", "--K", "2"], &default_config(), dir.path());
    assert!(out.status.success());
    let gap = fs::read_to_string(dir.path().join("spectrum/gap.json")).unwrap();
    assert!(gap.contains("\"k\": 2"));
    assert!(gap.contains("\"ladder_ordered\": true"));
    assert!(gap.contains("\"schema_version\": 1"));
    let spec = fs::read_to_string(dir.path().join("spectrum/spectrum.csv")).unwrap();
    assert_eq!(spec.lines().next(), Some("k,lambda_k"));
    assert_eq!(spec.lines().count(), 41);
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = fdx(&["evolve", "--datum", "unstable", "--truncated", "--seed", "3"], &default_config(), dir.path());
        assert!(out.status.success());
    }
    for f in ["evolve.json", "trajectory.csv"] {
        let x = fs::read(a.path().join("evolve").join(f)).unwrap();
        let y = fs::read(b.path().join("evolve").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical runs");
    }
}
