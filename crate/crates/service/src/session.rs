//! The single simulation session behind the HTTP interface.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use sas_core::expr::Constraint;
use sas_core::orchestrator::{
    Answer, AnswerError, InterventionRequest, InterventionState, OrchestratorError, Resumption, SessionView,
    StreamMessage, WhatIf,
};
use sas_core::search::TraceExplanation;
use sas_core::sim::{bundled_scenario, RunReport, SimError, Simulation};

use crate::config::ServiceConfig;
use crate::store::{Command, Store, StoreError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("no scenario is running")]
    NoScenario,
    #[error("unknown scenario {0}")]
    UnknownScenario(String),
    #[error("unknown intervention {0}")]
    UnknownIntervention(String),
    #[error("unknown trace {0}")]
    UnknownTrace(String),
    #[error("unknown plan {0}")]
    UnknownPlan(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(SimError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("replaying {command}: {source}")]
    Replay { command: String, source: Box<ServiceError> },
}

impl From<SimError> for ServiceError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::UnknownScenario(n) => ServiceError::UnknownScenario(n),
            SimError::Orchestrator(OrchestratorError::Answer(a)) => match a {
                AnswerError::Unknown(id) => ServiceError::UnknownIntervention(id),
                AnswerError::SchemaMismatch { .. } => ServiceError::Invalid(a.to_string()),
                AnswerError::AlreadyAnswered(_) | AnswerError::Expired(_) => ServiceError::Conflict(a.to_string()),
            },
            other => ServiceError::Sim(other),
        }
    }
}

/// `GET /state`: the loop snapshot plus what the service knows about the run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StateView {
    pub scenario: Option<String>,
    pub interactive: bool,
    pub finished: bool,
    /// Bumped on every scenario start; stream sequence numbers restart with it.
    pub generation: u64,
    pub state_hash: Option<String>,
    #[serde(flatten)]
    pub view: Option<SessionView>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhatIfReport {
    #[serde(flatten)]
    pub result: WhatIf,
    pub eliminates_count: usize,
    pub breaks_count: usize,
}

struct Running {
    name: String,
    interactive: bool,
    sim: Simulation,
    answered: BTreeMap<String, (Answer, Resumption)>,
}

pub struct Session {
    config: ServiceConfig,
    store: Option<Store>,
    run: Option<Running>,
    generation: u64,
}

impl Session {
    /// Opens the journal in `config.data_dir`, if any, and replays it.
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        let store = config.data_dir.as_deref().map(Store::open).transpose()?;
        let commands = store.as_ref().map(Store::commands).transpose()?.unwrap_or_default();
        let mut s = Session {
            config,
            store: None,
            run: None,
            generation: 0,
        };
        for cmd in commands {
            s.exec(cmd.clone()).map_err(|e| ServiceError::Replay {
                command: serde_json::to_string(&cmd).unwrap_or_default(),
                source: Box::new(e),
            })?;
        }
        s.store = store;
        if let (Some(store), Some(run)) = (&mut s.store, &s.run) {
            store.sync(&run.sim)?;
        }
        Ok(s)
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    fn running(&self) -> Result<&Running, ServiceError> {
        self.run.as_ref().ok_or(ServiceError::NoScenario)
    }

    pub fn simulation(&self) -> Option<&Simulation> {
        self.run.as_ref().map(|r| &r.sim)
    }

    pub fn start(&mut self, name: &str, interactive: bool, seed: Option<u64>) -> Result<StateView, ServiceError> {
        self.apply(Command::Start {
            name: name.to_string(),
            interactive,
            seed,
        })?;
        Ok(self.state())
    }

    pub fn advance(&mut self, minutes: u64) -> Result<StateView, ServiceError> {
        self.apply(Command::Advance { minutes })?;
        Ok(self.state())
    }

    /// Answers are idempotent per intervention: repeating the accepted
    /// answer returns the original resumption, any other answer conflicts.
    pub fn answer(&mut self, id: &str, answer: Answer) -> Result<Resumption, ServiceError> {
        if let Some((prev, r)) = self.running()?.answered.get(id) {
            if *prev == answer {
                return Ok(r.clone());
            }
        }
        self.apply(Command::Answer {
            id: id.to_string(),
            answer,
        })?;
        let run = self.running()?;
        Ok(run.answered[id].1.clone())
    }

    fn apply(&mut self, cmd: Command) -> Result<(), ServiceError> {
        self.exec(cmd.clone())?;
        let run = self.run.as_ref().expect("a successful command leaves a running scenario");
        if let Some(store) = &mut self.store {
            if matches!(cmd, Command::Start { .. }) {
                store.reset()?;
            }
            store.record(&cmd)?;
            store.sync(&run.sim)?;
        }
        Ok(())
    }

    fn exec(&mut self, cmd: Command) -> Result<(), ServiceError> {
        match cmd {
            Command::Start { name, interactive, seed } => {
                let scenario = bundled_scenario(&name)?;
                let policy = (!interactive).then(|| scenario.policy.clone());
                let sim = Simulation::new(scenario, self.config.core.clone(), policy, seed)?;
                self.run = Some(Running {
                    name,
                    interactive,
                    sim,
                    answered: BTreeMap::new(),
                });
                self.generation += 1;
            }
            Command::Advance { minutes } => {
                let run = self.run.as_mut().ok_or(ServiceError::NoScenario)?;
                run.sim.advance(minutes)?;
            }
            Command::Answer { id, answer } => {
                let run = self.run.as_mut().ok_or(ServiceError::NoScenario)?;
                let r = run.sim.answer(&id, answer.clone())?;
                run.answered.insert(id, (answer, r));
            }
        }
        Ok(())
    }

    pub fn state(&self) -> StateView {
        match &self.run {
            None => StateView {
                scenario: None,
                interactive: false,
                finished: false,
                generation: self.generation,
                state_hash: None,
                view: None,
            },
            Some(r) => StateView {
                scenario: Some(r.name.clone()),
                interactive: r.interactive,
                finished: r.sim.finished(),
                generation: self.generation,
                state_hash: Some(r.sim.orchestrator().state_hash()),
                view: Some(r.sim.orchestrator().view()),
            },
        }
    }

    /// Stream messages with `seq > since` in the current generation.
    pub fn stream_since(&self, since: u64) -> Vec<StreamMessage> {
        self.simulation()
            .map(|s| s.orchestrator().stream_since(since).to_vec())
            .unwrap_or_default()
    }

    pub fn interventions(&self, state: Option<InterventionState>) -> Result<Vec<InterventionRequest>, ServiceError> {
        Ok(self
            .running()?
            .sim
            .orchestrator()
            .interventions()
            .iter()
            .filter(|r| state.is_none_or(|s| r.state == s))
            .cloned()
            .collect())
    }

    pub fn trace(&self, id: &str) -> Result<TraceExplanation, ServiceError> {
        self.running()?
            .sim
            .orchestrator()
            .trace(id)
            .map(|t| t.explain())
            .ok_or_else(|| ServiceError::UnknownTrace(id.to_string()))
    }

    pub fn plan(&self, id: &str) -> Result<serde_json::Value, ServiceError> {
        let plan = self
            .running()?
            .sim
            .orchestrator()
            .plan(id)
            .ok_or_else(|| ServiceError::UnknownPlan(id.to_string()))?;
        Ok(serde_json::to_value(plan).expect("plans serialize"))
    }

    pub fn whatif(&self, constraint: &str) -> Result<WhatIfReport, ServiceError> {
        let c: Constraint = constraint.parse().map_err(|e| ServiceError::Invalid(format!("{e}")))?;
        let result = self
            .running()?
            .sim
            .orchestrator()
            .whatif(&c)
            .map_err(|e| ServiceError::Sim(SimError::Orchestrator(e)))?;
        Ok(WhatIfReport {
            eliminates_count: result.eliminates.len(),
            breaks_count: result.breaks.len(),
            result,
        })
    }

    pub fn report(&self) -> Result<RunReport, ServiceError> {
        Ok(self.running()?.sim.report())
    }
}
