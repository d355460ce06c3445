//! Scenario files: roster, positive suite, timed script and checklist.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::{DeviceSpec, PositiveSpec};
use crate::term::Action;

use super::policy::HumanPolicy;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parsing scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("directive {index} at minute {at} comes before minute {previous}")]
    TimeRegression { index: usize, at: u64, previous: u64 },
    #[error("directive {index}: {reason}")]
    Invalid { index: usize, reason: String },
}

/// Baseline latency samples generated before the script runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Warmup {
    pub device: String,
    pub samples: u32,
    pub start: u64,
    pub interval: u64,
    pub mean_ms: f64,
    /// Samples are drawn uniformly from `mean_ms ± jitter_ms`.
    pub jitter_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case")]
pub enum Directive {
    /// A device joins the network.
    Connect {
        at: u64,
        device: String,
        #[serde(default)]
        attrs: BTreeMap<String, String>,
    },
    Disconnect { at: u64, device: String },
    /// Any agent attempts an action in the world.
    Act {
        at: u64,
        #[serde(with = "action_text")]
        action: Action,
    },
    /// The tenant leaves, locking the door unless `lock` is false, and
    /// comes back `minutes` later.
    TenantAway {
        at: u64,
        minutes: u64,
        #[serde(default = "yes")]
        lock: bool,
    },
    Latency { at: u64, device: String, ms: f64 },
}

fn yes() -> bool {
    true
}

mod action_text {
    use serde::{de, Deserialize, Deserializer, Serializer};

    use crate::term::Action;

    pub fn serialize<S: Serializer>(a: &Action, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(a)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Action, D::Error> {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

impl Directive {
    pub fn at(&self) -> u64 {
        match self {
            Directive::Connect { at, .. }
            | Directive::Disconnect { at, .. }
            | Directive::Act { at, .. }
            | Directive::TenantAway { at, .. }
            | Directive::Latency { at, .. } => *at,
        }
    }
}

/// A harness check evaluated after the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Expectation {
    /// Some analysis attached exactly this trace (`a@1, b@2, ...`).
    TraceFound { trace: String },
    ControlEnacted { constraint: String },
    /// A plan evaluated this candidate and it broke a positive trace.
    CandidateRejected { constraint: String },
    ShortTermControl { constraint: String },
    PatchScheduled { cve: String },
    WorldRefused { action: String },
    AnomalyCount { kind: String, count: usize },
    AssumptionActive { assumption: String, active: bool },
    ParamEquals { assumption: String, param: String, value: i64 },
    /// Every intervention whose key starts with `key` has a complete explanation.
    ExplanationComplete { key: String },
    /// The device's granted behaviour still replays under the final model.
    NotBlocked { device: String },
    /// The audit log holds these steps, in order, for anomalies of `kind`.
    AuditChain { kind: String, steps: Vec<String> },
    Quiescent,
    NoViolation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub positives: Vec<PositiveSpec>,
    /// Assumptions the simulated world enforces as physical laws.
    #[serde(default)]
    pub world_laws: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup: Option<Warmup>,
    #[serde(default)]
    pub script: Vec<Directive>,
    #[serde(default)]
    pub policy: HumanPolicy,
    #[serde(default)]
    pub expect: Vec<Expectation>,
}

impl Scenario {
    pub fn from_json(src: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(src)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Script times never decrease and every directive names a device or
    /// agent that exists by then.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut known: BTreeSet<String> = ["tenant", "outsider", "sl"].iter().map(|s| s.to_string()).collect();
        known.extend(self.devices.iter().map(|d| d.id.clone()));
        let mut previous = 0;
        for (index, d) in self.script.iter().enumerate() {
            let at = d.at();
            if at < previous {
                return Err(ScenarioError::TimeRegression { index, at, previous });
            }
            previous = at;
            let invalid = |reason: String| ScenarioError::Invalid { index, reason };
            match d {
                Directive::Connect { device, .. } => {
                    known.insert(device.clone());
                }
                Directive::Disconnect { device, .. } | Directive::Latency { device, .. } => {
                    if !known.contains(device) {
                        return Err(invalid(format!("unknown device {device}")));
                    }
                }
                Directive::Act { action, .. } => {
                    for a in action.args.iter().filter_map(|t| t.as_sym()) {
                        if !known.contains(a) && a != "home" && a != "wifi" {
                            return Err(invalid(format!("unknown agent or object {a} in {action}")));
                        }
                    }
                }
                Directive::TenantAway { .. } => {}
            }
            if let Directive::Latency { ms, .. } = d {
                if !ms.is_finite() || *ms <= 0.0 {
                    return Err(invalid("latency must be positive".into()));
                }
            }
        }
        Ok(())
    }
}
