//! Search problems stored as JSON fixtures over the bundled smart home.

use serde::{Deserialize, Serialize};

use crate::expr::Constraint;
use crate::fixtures;
use crate::orchestrator::DeviceSpec;
use crate::search::{RuleSource, SearchError, SearchProblem};
use crate::term::{text_list, Fluent};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
    /// Facts added to the initial state; `connected(..)` for connected devices is implied.
    #[serde(default, with = "text_list")]
    pub add: Vec<Fluent>,
    #[serde(default, with = "text_list")]
    pub remove: Vec<Fluent>,
    /// Assumptions left out of the rule set.
    #[serde(default)]
    pub without: Vec<String>,
    #[serde(default)]
    pub controls: Vec<Constraint>,
    pub horizon: u32,
}

impl ProblemSpec {
    pub fn from_json(src: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(src)
    }

    pub fn build(&self) -> Result<SearchProblem, SearchError> {
        let mut domain = fixtures::smart_home_domain();
        let mut init = domain.initial_state();
        for d in &self.devices {
            domain.add_device(&d.id, d.trust, d.attrs.clone());
            if d.connected {
                init = init.with_fact(Fluent::new("connected", [d.id.as_str()]));
            }
        }
        for f in &self.remove {
            init = init.without_fact(f);
        }
        for f in &self.add {
            init = init.with_fact(f.clone());
        }
        let mut p = SearchProblem::from_model(domain, &fixtures::smart_home_goals(), init)?;
        for a in &self.without {
            p = p.without(&RuleSource::Assumption(a.clone()));
        }
        for c in &self.controls {
            p = p.with_rule(RuleSource::Control(format!("extra:{c}")), c.clone());
        }
        Ok(p.with_horizon(self.horizon))
    }
}
