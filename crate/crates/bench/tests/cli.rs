use std::process::Command;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_auditchain-bench"))
}

#[test]
fn sweep_writes_csvs_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let status = bench()
        .args(["--payloads", "1", "--nodes", "4,7", "--trials", "1", "--jitter", "0.1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let samples = std::fs::read_to_string(dir.path().join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 3);
    assert!(samples.lines().skip(1).all(|l| l.ends_with(",ok")));
    assert_eq!(std::fs::read_to_string(dir.path().join("summary.csv")).unwrap().lines().count(), 3);
}

#[test]
fn scenario_flag_runs_one_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let out = bench().args(["--scenario", "local-tamper", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("PASS local-tamper"), "{stdout}");
    assert!(dir.path().join("scenarios.json").exists());
}

#[test]
fn unknown_scenario_is_an_error() {
    let out = bench().args(["--scenario", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_network_parameters_exit_with_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bench()
        .args(["--payloads", "1", "--nodes", "4", "--trials", "1", "--bandwidth", "0", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bandwidth"));
}
