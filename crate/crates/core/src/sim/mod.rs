//! Discrete-event smart-home simulator and scenario runner.

mod policy;
mod scenario;
mod world;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use policy::{HumanPolicy, PolicyEntry};
pub use scenario::{Directive, Expectation, Scenario, ScenarioError, Warmup};
pub use world::{World, WorldEntry, WorldOutcome};

use crate::config::Config;
use crate::domain::AgentKind;
use crate::expr::ParamValue;
use crate::fixtures;
use crate::goal_model::{EvolutionRecord, Sustainability};
use crate::monitor::{Event, EventKind};
use crate::orchestrator::{
    Answer, AnswerError, AnomalyRecord, AuditRecord, Effect, InterventionRequest, Orchestrator, OrchestratorError,
    Resumption, Setup,
};
use crate::search::SearchError;
use crate::term::Action;

/// Upper bound on events per run; the shipped scenarios stay far below it.
pub const MAX_EVENTS: u64 = 10_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cannot move the clock back from minute {now} to {to}")]
    TimeRegression { now: u64, to: u64 },
    #[error("headless run left interventions unanswered: {}", keys.join(", "))]
    Unanswered { keys: Vec<String> },
    #[error("run exceeded {MAX_EVENTS} events")]
    TooManyEvents,
    #[error("no bundled scenario named {0}")]
    UnknownScenario(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Search(#[from] SearchError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: Expectation,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// Everything a run produced. Contains no wall-clock data, so equal inputs
/// give byte-identical reports.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub final_time: u64,
    pub events: Vec<Event>,
    pub anomalies: Vec<AnomalyRecord>,
    pub interventions: Vec<InterventionRequest>,
    pub audit: Vec<AuditRecord>,
    pub world_log: Vec<WorldEntry>,
    pub world_violations: Vec<u64>,
    pub model_version: u32,
    pub model: String,
    pub evolution: Vec<EvolutionRecord>,
    pub quiescent: bool,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Scheduled {
    due: u64,
    intervention: String,
    answer: Answer,
}

/// Names of the bundled scenarios.
pub const SCENARIOS: [&str; 4] = ["untrusted_device", "trusted_speaker", "frequent_devices", "mitm_cve"];

pub fn bundled_scenario(name: &str) -> Result<Scenario, SimError> {
    let src = fixtures::scenario_source(name).ok_or_else(|| SimError::UnknownScenario(name.to_string()))?;
    Ok(Scenario::from_json(src)?)
}

pub struct Simulation {
    scenario: Scenario,
    seed: u64,
    orchestrator: Orchestrator,
    world: World,
    timeline: Vec<Directive>,
    cursor: usize,
    now: u64,
    policy: Option<HumanPolicy>,
    scheduled: Vec<Scheduled>,
    asked: BTreeSet<String>,
    events: Vec<Event>,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Warm-up samples and tenant routines expanded into plain directives,
/// ordered by time with ties kept in script order.
fn expand(scenario: &Scenario, seed: u64) -> Vec<Directive> {
    let mut out = Vec::new();
    if let Some(w) = &scenario.warmup {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..u64::from(w.samples) {
            let jitter = if w.jitter_ms > 0.0 {
                rng.random_range(-w.jitter_ms..=w.jitter_ms)
            } else {
                0.0
            };
            out.push(Directive::Latency {
                at: w.start + i * w.interval,
                device: w.device.clone(),
                ms: round2(w.mean_ms + jitter),
            });
        }
    }
    let act = |at, s: &str| Directive::Act {
        at,
        action: s.parse().expect("routine action parses"),
    };
    for d in &scenario.script {
        match d {
            Directive::TenantAway { at, minutes, lock } => {
                out.push(act(*at, "exit(tenant,home)"));
                if *lock {
                    out.push(act(*at, "close(sl)"));
                }
                out.push(act(at + minutes, "enter(tenant,home)"));
                out.push(act(at + minutes, "open(sl)"));
            }
            other => out.push(other.clone()),
        }
    }
    out.sort_by_key(Directive::at);
    out
}

impl Simulation {
    /// `policy = None` runs interactively: answers come from outside.
    pub fn new(scenario: Scenario, config: Config, policy: Option<HumanPolicy>, seed: Option<u64>) -> Result<Self, SimError> {
        scenario.validate()?;
        let seed = seed.unwrap_or(scenario.seed);
        let mut setup = Setup::smart_home();
        setup.devices = scenario.devices.clone();
        if !scenario.positives.is_empty() {
            setup.positives = scenario.positives.clone();
        }
        let orchestrator = Orchestrator::new(config, setup);
        let world = World::new(
            orchestrator.domain().clone(),
            orchestrator.analysis_state(),
            scenario.world_laws.clone(),
            orchestrator.model(),
        );
        let timeline = expand(&scenario, seed);
        Ok(Simulation {
            scenario,
            seed,
            orchestrator,
            world,
            timeline,
            cursor: 0,
            now: 0,
            policy,
            scheduled: Vec::new(),
            asked: BTreeSet::new(),
            events: Vec::new(),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        &self.orchestrator
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// The script has been played to the end and no answer is scheduled.
    pub fn finished(&self) -> bool {
        self.cursor >= self.timeline.len() && self.scheduled.is_empty()
    }

    pub fn advance(&mut self, minutes: u64) -> Result<(), SimError> {
        self.advance_to(self.now + minutes)
    }

    /// Plays every directive and scheduled answer due at or before `to`.
    pub fn advance_to(&mut self, to: u64) -> Result<(), SimError> {
        if to < self.now {
            return Err(SimError::TimeRegression { now: self.now, to });
        }
        loop {
            let next_answer = self.scheduled.iter().map(|s| s.due).min().filter(|&d| d <= to);
            let next_directive = self.timeline.get(self.cursor).map(Directive::at).filter(|&d| d <= to);
            match (next_answer, next_directive) {
                (Some(a), d) if d.is_none_or(|d| a <= d) => {
                    self.clock(a)?;
                    self.deliver_due(a)?;
                }
                (_, Some(d)) => {
                    self.clock(d)?;
                    let directive = self.timeline[self.cursor].clone();
                    self.cursor += 1;
                    self.apply(&directive)?;
                }
                _ => break,
            }
        }
        self.clock(to)
    }

    /// Plays the whole script and every scheduled answer. A headless run
    /// that ends with questions nobody answered is an error.
    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        while !self.finished() {
            let next = self
                .scheduled
                .iter()
                .map(|s| s.due)
                .chain(self.timeline.get(self.cursor).map(Directive::at))
                .min()
                .unwrap_or(self.now);
            self.advance_to(next.max(self.now))?;
        }
        if self.policy.is_some() {
            let keys: Vec<String> = self.orchestrator.pending_interventions().map(|r| r.key.clone()).collect();
            if !keys.is_empty() {
                return Err(SimError::Unanswered { keys });
            }
        }
        Ok(())
    }

    /// Answers an intervention on behalf of a human.
    pub fn answer(&mut self, id: &str, answer: Answer) -> Result<Resumption, SimError> {
        let r = self.orchestrator.answer(id, answer)?;
        self.sync_world();
        self.auto_answer()?;
        Ok(r)
    }

    fn clock(&mut self, t: u64) -> Result<(), SimError> {
        self.now = self.now.max(t);
        if !self.orchestrator.tick(self.now)?.is_empty() {
            self.auto_answer()?;
        }
        Ok(())
    }

    fn deliver_due(&mut self, t: u64) -> Result<(), SimError> {
        let (due, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.scheduled).into_iter().partition(|s| s.due <= t);
        self.scheduled = rest;
        for s in due {
            match self.orchestrator.answer(&s.intervention, s.answer) {
                Ok(_) => {}
                Err(OrchestratorError::Answer(AnswerError::Expired(_) | AnswerError::AlreadyAnswered(_))) => {}
                Err(e) => return Err(e.into()),
            }
            self.sync_world();
        }
        self.auto_answer()
    }

    /// Schedules policy answers for newly pending interventions and
    /// delivers the immediate ones.
    fn auto_answer(&mut self) -> Result<(), SimError> {
        let Some(policy) = self.policy.clone() else { return Ok(()) };
        loop {
            let fresh: Vec<(String, u64, Answer)> = self
                .orchestrator
                .pending_interventions()
                .filter(|r| !self.asked.contains(&r.id))
                .filter_map(|r| policy.lookup(r).map(|e| (r.id.clone(), e.delay(), e.answer().clone())))
                .collect();
            if fresh.is_empty() {
                return Ok(());
            }
            for (id, delay, answer) in fresh {
                self.asked.insert(id.clone());
                if delay == 0 {
                    self.orchestrator.answer(&id, answer)?;
                    self.sync_world();
                } else {
                    self.scheduled.push(Scheduled {
                        due: self.now + delay,
                        intervention: id,
                        answer,
                    });
                }
            }
        }
    }

    fn sync_world(&mut self) {
        self.world.sync_trust(self.orchestrator.domain());
        if let Some(f) = self.orchestrator.domain().initial_state().facts.iter().find(|f| f.name == "password_chars") {
            if !self.world.state().contains(f) {
                self.world.set_fact("password_chars", f.clone());
            }
        }
    }

    fn emit(&mut self, kind: EventKind, subject: &str, attrs: Vec<(&str, serde_json::Value)>) -> Result<(), SimError> {
        if self.events.len() as u64 >= MAX_EVENTS {
            return Err(SimError::TooManyEvents);
        }
        let mut e = Event::new(self.events.len() as u64 + 1, self.now, kind, subject);
        for (k, v) in attrs {
            e = e.with_attr(k, v);
        }
        self.events.push(e.clone());
        self.orchestrator.ingest(e)?;
        self.sync_world();
        self.auto_answer()
    }

    fn apply(&mut self, d: &Directive) -> Result<(), SimError> {
        let now = self.now;
        match d {
            Directive::Connect { device, attrs, .. } => {
                if !self.world.knows(device) {
                    self.world.add_device(device, attrs.clone());
                }
                if self.world.act(now, &Action::new("connect", [device.as_str()]), self.orchestrator.model())? {
                    let attrs = attrs.iter().map(|(k, v)| (k.as_str(), serde_json::Value::from(v.as_str()))).collect();
                    self.emit(EventKind::DeviceConnected, device, attrs)?;
                }
            }
            Directive::Disconnect { device, .. } => {
                if self.world.act(now, &Action::new("disconnect", [device.as_str()]), self.orchestrator.model())? {
                    self.emit(EventKind::DeviceDisconnected, device, vec![])?;
                }
            }
            Directive::Act { action, .. } => {
                if self.world.act(now, action, self.orchestrator.model())? {
                    let by_device = action
                        .args
                        .first()
                        .and_then(|t| t.as_sym())
                        .and_then(|a| self.orchestrator.domain().agent(a))
                        .filter(|a| a.kind == AgentKind::NetDevice)
                        .map(|a| a.id.clone());
                    if let Some(dev) = by_device {
                        self.emit(EventKind::Command, &dev, vec![("action", action.to_string().into())])?;
                    }
                    if action.name == "open" || action.name == "close" {
                        if let Some(lock) = action.args.last().and_then(|t| t.as_sym()) {
                            let state = if action.name == "open" { "unlocked" } else { "locked" };
                            self.emit(EventKind::DoorState, lock, vec![("state", state.into())])?;
                        }
                    }
                }
            }
            Directive::Latency { device, ms, .. } => {
                self.emit(EventKind::LatencySample, device, vec![("latency_ms", (*ms).into())])?;
            }
            Directive::TenantAway { .. } => unreachable!("expanded before the run"),
        }
        Ok(())
    }

    fn check(&self, e: &Expectation) -> CheckResult {
        let o = &self.orchestrator;
        let (passed, detail) = match e {
            Expectation::TraceFound { trace } => {
                let found: Vec<String> = o
                    .audit()
                    .iter()
                    .filter_map(|r| r.outcome.as_ref().and_then(|x| x.trace()).map(|t| t.render()))
                    .collect();
                (found.iter().any(|t| t == trace), found.join(" | "))
            }
            Expectation::ControlEnacted { constraint } => {
                let enacted: Vec<String> = o.model().enacted_controls().map(|c| c.constraint.to_string()).collect();
                (enacted.contains(constraint), enacted.join(" | "))
            }
            Expectation::CandidateRejected { constraint } => {
                let hit = o
                    .plans()
                    .iter()
                    .flat_map(|p| &p.candidates)
                    .find(|c| &c.constraint == constraint);
                let enacted = o.model().enacted_controls().any(|c| &c.constraint.to_string() == constraint);
                match hit {
                    Some(c) => (!c.breaks.is_empty() && !enacted, format!("breaks {:?}", c.breaks)),
                    None => (false, "never evaluated".into()),
                }
            }
            Expectation::ShortTermControl { constraint } => {
                let hit = o.plans().iter().filter_map(|p| p.short_term.as_ref()).find(|c| &c.text() == constraint);
                match hit {
                    Some(c) => (c.sustainability == Sustainability::ShortTerm, c.sustainability.as_str().to_string()),
                    None => (false, "no such short-term control".into()),
                }
            }
            Expectation::PatchScheduled { cve } => {
                let hit = o
                    .audit()
                    .iter()
                    .flat_map(|r| &r.effects)
                    .any(|e| matches!(e, Effect::PatchScheduled { cve: c, .. } if c == cve));
                (hit, String::new())
            }
            Expectation::WorldRefused { action } => {
                let hit = self
                    .world
                    .log()
                    .iter()
                    .find(|w| &w.action == action && w.outcome != WorldOutcome::Applied);
                (hit.is_some(), hit.map(|w| format!("{:?}", w.outcome)).unwrap_or_default())
            }
            Expectation::AnomalyCount { kind, count } => {
                let n = o.anomalies().filter(|r| &r.anomaly.kind.to_string() == kind).count();
                (n == *count, format!("{n} {kind}"))
            }
            Expectation::AssumptionActive { assumption, active } => match o.model().assumption(assumption) {
                Some(a) => (a.active == *active, format!("active = {}", a.active)),
                None => (false, "unknown assumption".into()),
            },
            Expectation::ParamEquals { assumption, param, value } => {
                let v = o.model().assumption(assumption).and_then(|a| a.params.get(param)).cloned();
                (v == Some(ParamValue::Int(*value)), format!("{v:?}"))
            }
            Expectation::ExplanationComplete { key } => {
                let reqs: Vec<&InterventionRequest> = o.interventions().iter().filter(|r| r.key.starts_with(key.as_str())).collect();
                let missing: Vec<String> = reqs
                    .iter()
                    .filter(|r| !r.missing_explanation().is_empty())
                    .map(|r| format!("{} lacks {:?}", r.id, r.missing_explanation()))
                    .collect();
                (!reqs.is_empty() && missing.is_empty(), missing.join("; "))
            }
            Expectation::NotBlocked { device } => {
                let label = format!("device:{device}");
                match (o.positives().iter().find(|p| p.label == label), o.problem()) {
                    (Some(spec), Ok(p)) => match o.positive_trace(&p, spec) {
                        Ok(t) => (true, t.render()),
                        Err(e) => (false, e.to_string()),
                    },
                    (None, _) => (false, "device was never granted access".into()),
                    (_, Err(e)) => (false, e.to_string()),
                }
            }
            Expectation::AuditChain { kind, steps } => {
                let chains: Vec<Vec<&str>> = o
                    .anomalies()
                    .filter(|r| &r.anomaly.kind.to_string() == kind)
                    .map(|r| {
                        o.audit()
                            .iter()
                            .filter(|a| a.anomaly == r.anomaly.id)
                            .map(|a| a.step.as_str())
                            .collect()
                    })
                    .collect();
                let ok = chains.iter().any(|chain| {
                    let mut it = chain.iter();
                    steps.iter().all(|s| it.any(|c| c == s))
                });
                (ok, format!("{chains:?}"))
            }
            Expectation::Quiescent => {
                let pending = o.pending_interventions().count();
                (o.is_quiescent() && pending == 0, format!("{pending} pending"))
            }
            Expectation::NoViolation => (self.world.violations().is_empty(), format!("{:?}", self.world.violations())),
        };
        CheckResult {
            check: e.clone(),
            passed,
            detail,
        }
    }

    pub fn report(&self) -> RunReport {
        let o = &self.orchestrator;
        let checks: Vec<CheckResult> = self.scenario.expect.iter().map(|e| self.check(e)).collect();
        RunReport {
            scenario: self.scenario.name.clone(),
            seed: self.seed,
            final_time: self.now,
            events: self.events.clone(),
            anomalies: o.anomalies().cloned().collect(),
            interventions: o.interventions().to_vec(),
            audit: o.audit().to_vec(),
            world_log: self.world.log().to_vec(),
            world_violations: self.world.violations().to_vec(),
            model_version: o.model().version,
            model: o.model().to_string(),
            evolution: o.history().records().to_vec(),
            quiescent: o.is_quiescent() && o.pending_interventions().count() == 0,
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }
}

/// Runs a scenario headless. `policy` defaults to the scenario's own.
pub fn run_scenario(
    scenario: Scenario,
    config: Config,
    policy: Option<HumanPolicy>,
    seed: Option<u64>,
) -> Result<RunReport, SimError> {
    let policy = policy.unwrap_or_else(|| scenario.policy.clone());
    let mut sim = Simulation::new(scenario, config, Some(policy), seed)?;
    sim.run_to_end()?;
    Ok(sim.report())
}
