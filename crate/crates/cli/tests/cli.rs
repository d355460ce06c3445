use std::io::Write;
use std::process::{Command, Output, Stdio};

fn sas(args: &[&str], stdin: Option<&str>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_sas"))
        .args(args)
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut input = child.stdin.take().unwrap();
    input.write_all(stdin.unwrap_or("").as_bytes()).unwrap();
    drop(input);
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn headless_run_writes_a_deterministic_report() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for p in [&a, &b] {
        let o = sas(&["run", "trusted_speaker", "--seed", "7", "--report", p.to_str().unwrap()], None);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(!stdout(&o).contains("FAIL"));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&a).unwrap()).unwrap();
    assert_eq!(report["seed"], 7);
}

#[test]
fn interactive_run_reads_answers() {
    let o = sas(&["run", "untrusted_device", "--interactive"], Some("maybe\nno\nyes\n"));
    let out = stdout(&o);
    assert!(o.status.success(), "{out}");
    assert!(out.contains("expected yes or no"));
    assert!(out.contains("quiescent"));
}

#[test]
fn interactive_run_stops_at_end_of_input() {
    let o = sas(&["run", "untrusted_device", "--interactive"], Some(""));
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn policy_file_overrides_the_scenario_policy() {
    let dir = tempfile::tempdir().unwrap();
    let policy = dir.path().join("policy.json");
    std::fs::write(&policy, r#"{"device_trust": true}"#).unwrap();
    let o = sas(&["run", "untrusted_device", "--policy", policy.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn oracle_agrees_on_bundled_problems() {
    for h in ["1", "4", "5"] {
        let o = sas(&["oracle", "../core/fixtures/problems/probe_without_password.json", "--horizon", h], None);
        assert!(o.status.success());
        let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(v["agree"], true);
    }
}

#[test]
fn check_model_reports_errors() {
    let o = sas(&["check-model", "../core/fixtures/smart_home.goals"], None);
    assert!(o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.goals");
    std::fs::write(&bad, "goal g \"x\" AND formal=\"never in(outsider,home)\"\n  assume a \"y\" formal=\"forbid open(sl) when $missing\"\n").unwrap();
    let o = sas(&["check-model", bad.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn replay_prints_anomalies() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let lines: Vec<String> = (1..=3)
        .map(|i| format!(r#"{{"id":{i},"time":{},"kind":"device_connected","subject":"x{i}"}}"#, i * 10))
        .collect();
    std::fs::write(&log, lines.join("\n") + "\n").unwrap();
    let o = sas(&["replay", log.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let kinds: Vec<String> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["anomaly"]["kind"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds, ["new_device", "new_device", "new_device", "frequent_new_devices"]);
}
