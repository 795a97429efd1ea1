use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn frosty(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frosty")).args(args).current_dir(dir).output().expect("binary runs")
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

const SMALL: &str = "name = \"small\"\nhorizon = 60\n[params]\nn = 10\nf = 0\n";

#[test]
fn params_report_passes_at_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = frosty(&["params"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("one_round_byzantine_alpha3") && !text.contains("[FAIL]"), "{text}");
}

#[test]
fn params_report_flags_weak_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let out = frosty(&["params", "--a3", "30"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_writes_traces_that_replay() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let out = frosty(&["run", "--config", "small.toml", "--seeds", "1..2", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for s in [1, 2] {
        assert!(dir.path().join(format!("o/small-seed{s}.jsonl")).exists());
        assert!(dir.path().join(format!("o/small-seed{s}.summary.json")).exists());
    }
    let out = frosty(&["replay", "--trace", "o/small-seed2.jsonl", "--out", "r"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stdout).unwrap().contains("identical"));
}

#[test]
fn replay_reports_the_first_difference() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    assert_eq!(frosty(&["run", "--config", "small.toml", "--seed", "3", "--out", "o"], dir.path()).status.code(), Some(0));
    let path = dir.path().join("o/small-seed3.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{\"seq\":2,\"kind\":\"tampered\"}";
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let out = frosty(&["replay", "--trace", "o/small-seed3.jsonl", "--out", "r"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stdout).unwrap().contains("differs at line 3"));
}

#[test]
fn bad_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[params]\nn = 10\nalpah1 = 3\n").unwrap();
    let out = frosty(&["run", "--config", "bad.toml", "--seed", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("params"));
    let out = frosty(&["run", "--config", "missing.toml", "--seed", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn violations_give_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenarios().join("checker_sensitivity.toml");
    let out = frosty(&["run", "--config", cfg.to_str().unwrap(), "--seed", "1", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stdout).unwrap().contains("VIOLATION"));
}
