//! Analysis outcomes and mitigation plans.

use serde::{Deserialize, Serialize};

use crate::goal_model::Sustainability;
use crate::learner::ControlCandidate;
use crate::search::Trace;

use super::vuln::VulnerabilityRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum AnalysisOutcome {
    /// A fact only a human can supply is missing.
    NeedFact { fact: String, device: String },
    /// The current model admits a violating trace.
    ThreatConfirmed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        device: Option<String>,
        trace: Trace,
    },
    /// Without `assumption` the model admits a violating trace.
    AssumptionSuspect {
        assumption: String,
        horizon: u32,
        trace: Trace,
    },
    Benign { reason: String },
}

impl AnalysisOutcome {
    pub fn name(&self) -> &'static str {
        match self {
            AnalysisOutcome::NeedFact { .. } => "need_fact",
            AnalysisOutcome::ThreatConfirmed { .. } => "threat_confirmed",
            AnalysisOutcome::AssumptionSuspect { .. } => "assumption_suspect",
            AnalysisOutcome::Benign { .. } => "benign",
        }
    }

    pub fn trace(&self) -> Option<&Trace> {
        match self {
            AnalysisOutcome::ThreatConfirmed { trace, .. } | AnalysisOutcome::AssumptionSuspect { trace, .. } => Some(trace),
            _ => None,
        }
    }
}

/// Mitigation aimed at the cause rather than the symptom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RootCause {
    AssumptionEvolution {
        assumption: String,
        param: String,
        current: i64,
        sustainability: Sustainability,
    },
    Patch {
        record: VulnerabilityRecord,
        sustainability: Sustainability,
    },
    /// No known fix; an engineer is asked for advice.
    Advice { device: String },
}

/// Summary of one evaluated candidate, kept for the audit trail.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub constraint: String,
    pub template: String,
    pub specificity: u32,
    pub eliminates: usize,
    pub breaks: Vec<String>,
    pub enactable: bool,
}

impl From<&ControlCandidate> for CandidateSummary {
    fn from(c: &ControlCandidate) -> Self {
        CandidateSummary {
            constraint: c.text(),
            template: c.template.clone(),
            specificity: c.specificity,
            eliminates: c.eliminates.len(),
            breaks: c.breaks.iter().cloned().collect(),
            enactable: c.enactable,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Pending,
    Executed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub id: String,
    pub anomaly: String,
    /// Assumption put in question, for plans that follow a suspect outcome.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suspect: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub short_term: Option<ControlCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_cause: Option<RootCause>,
    /// Assumptions to deactivate on execution.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deactivate: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<CandidateSummary>,
    /// Candidates offered to an engineer when learning found no clear winner.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<ControlCandidate>,
    pub interventions: Vec<String>,
    pub status: PlanStatus,
}
