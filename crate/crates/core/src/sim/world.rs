//! The simulated home: the real state that controls are enforced on.

use serde::{Deserialize, Serialize};

use crate::domain::{ActionDomain, AgentKind, Trust};
use crate::expr::{Constraint, Guard, Params};
use crate::goal_model::GoalModel;
use crate::search::{Blocker, RuleSet, RuleSource, SearchError};
use crate::term::{Action, Fluent};
use crate::State;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum WorldOutcome {
    Applied,
    Refused { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldEntry {
    pub time: u64,
    pub action: String,
    #[serde(flatten)]
    pub outcome: WorldOutcome,
}

#[derive(Clone, Debug)]
pub struct World {
    domain: ActionDomain,
    state: State,
    laws: Vec<String>,
    requirement: Option<Guard>,
    log: Vec<WorldEntry>,
    violations: Vec<u64>,
}

impl World {
    pub fn new(domain: ActionDomain, state: State, laws: Vec<String>, model: &GoalModel) -> Self {
        let requirement = match model.requirement() {
            Some(Constraint::Never(g)) => Some(g.clone()),
            _ => None,
        };
        World {
            domain,
            state,
            laws,
            requirement,
            log: Vec::new(),
            violations: Vec::new(),
        }
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn log(&self) -> &[WorldEntry] {
        &self.log
    }

    /// Minutes at which the world state violated the requirement.
    pub fn violations(&self) -> &[u64] {
        &self.violations
    }

    pub fn knows(&self, agent: &str) -> bool {
        self.domain.agent(agent).is_some()
    }

    pub fn add_device(&mut self, id: &str, attrs: std::collections::BTreeMap<String, String>) {
        self.domain.add_device(id, Trust::Unknown, attrs);
    }

    /// Copies trust marks the system has learned onto the world's roster.
    pub fn sync_trust(&mut self, known: &ActionDomain) {
        let updates: Vec<(String, Trust)> = self
            .domain
            .agents()
            .values()
            .filter(|a| a.kind == AgentKind::NetDevice)
            .filter_map(|a| known.agent(&a.id).filter(|k| k.trust != a.trust).map(|k| (a.id.clone(), k.trust)))
            .collect();
        for (id, trust) in updates {
            let _ = self.domain.set_trust(&id, trust);
        }
    }

    pub fn set_fact(&mut self, name: &str, fact: Fluent) {
        self.state.facts.retain(|f| f.name != name);
        self.state.facts.insert(fact);
    }

    /// Enacted controls plus the world laws, without time bounds.
    fn rules(&self, model: &GoalModel) -> RuleSet {
        let mut rs = RuleSet::new();
        for c in model.enacted_controls() {
            rs.push(RuleSource::Control(c.id.clone()), c.constraint.clone(), Params::new());
        }
        for id in &self.laws {
            if let Some(a) = model.assumption(id) {
                rs.push(RuleSource::Law(id.clone()), a.formal.clone(), a.params.clone());
            }
        }
        rs.without_time_bounds()
    }

    /// Attempts `action` at minute `time`. Refusals are logged, not errors.
    pub fn act(&mut self, time: u64, action: &Action, model: &GoalModel) -> Result<bool, SearchError> {
        let outcome = match self.rules(model).blocker(&self.domain, &self.state, action)? {
            None => {
                self.state = self.domain.apply(&self.state, action)?;
                if let Some(g) = &self.requirement {
                    if self.domain.holds(&self.state, g)? {
                        self.violations.push(time);
                    }
                }
                WorldOutcome::Applied
            }
            Some(Blocker::Precondition) => WorldOutcome::Refused {
                reason: "precondition".into(),
            },
            Some(Blocker::Rule(src)) => WorldOutcome::Refused { reason: src.to_string() },
        };
        let applied = outcome == WorldOutcome::Applied;
        self.log.push(WorldEntry {
            time,
            action: action.to_string(),
            outcome,
        });
        Ok(applied)
    }
}
