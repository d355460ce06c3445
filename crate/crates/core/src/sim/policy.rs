//! Scripted human answers for headless runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::orchestrator::{Answer, InterventionRequest};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyEntry {
    Delayed { answer: Answer, delay: u64 },
    Now(Answer),
}

impl PolicyEntry {
    pub fn answer(&self) -> &Answer {
        match self {
            PolicyEntry::Delayed { answer, .. } | PolicyEntry::Now(answer) => answer,
        }
    }

    pub fn delay(&self) -> u64 {
        match self {
            PolicyEntry::Delayed { delay, .. } => *delay,
            PolicyEntry::Now(_) => 0,
        }
    }
}

/// Answers keyed by intervention key (`device_trust:d1`) or by topic
/// (`device_trust`); the full key wins.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HumanPolicy {
    pub answers: BTreeMap<String, PolicyEntry>,
}

impl HumanPolicy {
    pub fn from_json(src: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(src)
    }

    pub fn lookup(&self, req: &InterventionRequest) -> Option<&PolicyEntry> {
        self.answers.get(&req.key).or_else(|| self.answers.get(req.topic()))
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}
