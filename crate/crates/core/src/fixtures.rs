//! Bundled smart-home models.

use crate::domain::ActionDomain;
use crate::goal_model::GoalModel;

pub const SMART_HOME_DOMAIN: &str = include_str!("../fixtures/smart_home.domain");

pub fn smart_home_domain() -> ActionDomain {
    ActionDomain::parse(SMART_HOME_DOMAIN).expect("bundled domain parses")
}

pub const SMART_HOME_GOALS: &str = include_str!("../fixtures/smart_home.goals");

pub fn smart_home_goals() -> GoalModel {
    GoalModel::parse(SMART_HOME_GOALS).expect("bundled goal model parses")
}

pub const VULNERABILITIES: &str = include_str!("../fixtures/vulnerabilities.json");

pub const SCENARIO_UNTRUSTED_DEVICE: &str = include_str!("../fixtures/scenarios/untrusted_device.json");
pub const SCENARIO_TRUSTED_SPEAKER: &str = include_str!("../fixtures/scenarios/trusted_speaker.json");
pub const SCENARIO_FREQUENT_DEVICES: &str = include_str!("../fixtures/scenarios/frequent_devices.json");
pub const SCENARIO_MITM_CVE: &str = include_str!("../fixtures/scenarios/mitm_cve.json");

/// Source of a bundled scenario by name.
pub fn scenario_source(name: &str) -> Option<&'static str> {
    match name {
        "untrusted_device" => Some(SCENARIO_UNTRUSTED_DEVICE),
        "trusted_speaker" => Some(SCENARIO_TRUSTED_SPEAKER),
        "frequent_devices" => Some(SCENARIO_FREQUENT_DEVICES),
        "mitm_cve" => Some(SCENARIO_MITM_CVE),
        _ => None,
    }
}

/// Bundled search problems as `(file name, JSON)`.
pub const PROBLEMS: [(&str, &str); 6] = [
    ("untrusted_d1", include_str!("../fixtures/problems/untrusted_d1.json")),
    ("trusted_d1", include_str!("../fixtures/problems/trusted_d1.json")),
    ("mitm_without_trusted_devices", include_str!("../fixtures/problems/mitm_without_trusted_devices.json")),
    ("probe_without_password", include_str!("../fixtures/problems/probe_without_password.json")),
    ("probe_with_password", include_str!("../fixtures/problems/probe_with_password.json")),
    ("careless_tenant", include_str!("../fixtures/problems/careless_tenant.json")),
];

pub const UNTRUSTED_TRACE_GOLDEN: &str = include_str!("../fixtures/golden/untrusted_d1_trace.json");
