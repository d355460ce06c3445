//! Known-vulnerability lookup.

use serde::{Deserialize, Serialize};

use crate::fixtures;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnerabilityRecord {
    pub cve_id: String,
    pub device: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fix: Option<String>,
    pub disclosed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VulnerabilityDb {
    records: Vec<VulnerabilityRecord>,
}

impl VulnerabilityDb {
    pub fn new(records: Vec<VulnerabilityRecord>) -> Self {
        VulnerabilityDb { records }
    }

    pub fn from_json(src: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(src)
    }

    /// The bundled database.
    pub fn bundled() -> Self {
        Self::from_json(fixtures::VULNERABILITIES).expect("bundled vulnerability database parses")
    }

    pub fn records(&self) -> &[VulnerabilityRecord] {
        &self.records
    }

    /// Disclosed records for `device`, ordered by id.
    pub fn lookup(&self, device: &str) -> Vec<&VulnerabilityRecord> {
        let mut out: Vec<_> = self.records.iter().filter(|r| r.device == device && r.disclosed).collect();
        out.sort_by(|a, b| a.cve_id.cmp(&b.cve_id));
        out
    }
}
