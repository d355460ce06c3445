use sas_core::config::Config;
use sas_core::sim::{bundled_scenario, run_scenario, Scenario, SimError, SCENARIOS};

fn run(name: &str) -> sas_core::sim::RunReport {
    run_scenario(bundled_scenario(name).unwrap(), Config::default(), None, None).unwrap()
}

#[test]
fn bundled_scenarios_pass_their_checklists() {
    for name in SCENARIOS {
        let r = run(name);
        for c in r.checks.iter().filter(|c| !c.passed) {
            eprintln!("{name}: {:?} -> {}", c.check, c.detail);
        }
        assert!(r.passed, "{name} failed");
        assert!(r.quiescent);
        assert!(r.events.len() < 10_000);
    }
}

#[test]
fn reports_are_byte_identical_across_runs() {
    for name in SCENARIOS {
        assert_eq!(run(name).to_json(), run(name).to_json(), "{name}");
    }
}

#[test]
fn empty_script_gives_no_anomalies() {
    let s = Scenario::from_json(r#"{"name": "empty"}"#).unwrap();
    let r = run_scenario(s, Config::default(), None, None).unwrap();
    assert!(r.anomalies.is_empty());
    assert!(r.events.is_empty());
    assert!(r.quiescent);
}

#[test]
fn missing_policy_entry_is_an_error_headless() {
    let mut s = bundled_scenario("untrusted_device").unwrap();
    s.policy.answers.remove("approve_control");
    let err = run_scenario(s, Config::default(), None, None).unwrap_err();
    assert!(matches!(err, SimError::Unanswered { ref keys } if keys[0].starts_with("approve_control:")), "{err}");
}
