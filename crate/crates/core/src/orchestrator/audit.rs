//! Stream messages and the append-only audit log.

use serde::{Deserialize, Serialize};

use crate::domain::Trust;
use crate::expr::Params;
use crate::goal_model::Role;
use crate::monitor::{Anomaly, Event};

use super::intervention::{Answer, InterventionRequest};
use super::plan::{AnalysisOutcome, Plan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Approval {
    Intervention { id: String, role: Role },
    AutoEnactPolicy,
}

/// Something the execute phase changed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum Effect {
    TrustRecorded {
        device: String,
        trust: Trust,
    },
    AccessGranted {
        device: String,
    },
    ControlEnacted {
        control: String,
        constraint: String,
        approval: Approval,
    },
    ControlRejected {
        constraint: String,
        reason: String,
    },
    AssumptionEvolved {
        assumption: String,
        old: Params,
        new: Params,
        version: u32,
        approver: Role,
    },
    PasswordPolicy {
        network: String,
        min_chars: i64,
    },
    PatchScheduled {
        cve: String,
        device: String,
        fix: String,
    },
    AdviceRecorded {
        device: String,
        text: String,
    },
    Requeued {
        expired: String,
        replacement: String,
    },
}

/// One decision of the loop, appended to the audit log and mirrored on
/// the stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub time: u64,
    pub anomaly: String,
    pub step: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<AnalysisOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Plan>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interventions: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<(String, Answer)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub effects: Vec<Effect>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum StreamPayload {
    Event(Event),
    Anomaly(Anomaly),
    Intervention(InterventionRequest),
    Decision(AuditRecord),
}

impl StreamPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            StreamPayload::Event(_) => "event",
            StreamPayload::Anomaly(_) => "anomaly",
            StreamPayload::Intervention(_) => "intervention",
            StreamPayload::Decision(_) => "decision",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamMessage {
    pub seq: u64,
    pub time: u64,
    #[serde(flatten)]
    pub payload: StreamPayload,
}
