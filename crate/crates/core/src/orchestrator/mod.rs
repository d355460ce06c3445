//! The MAPE loop: monitor events, analyse anomalies, plan mitigations,
//! ask humans when needed and execute what they approve.

mod audit;
mod intervention;
mod plan;
mod vuln;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use audit::{Approval, AuditRecord, Effect, StreamMessage, StreamPayload};
pub use intervention::{Answer, AnswerError, AnswerSchema, Explanation, InterventionRequest, InterventionState};
pub use plan::{AnalysisOutcome, CandidateSummary, Plan, PlanStatus, RootCause};
pub use vuln::{VulnerabilityDb, VulnerabilityRecord};

use crate::config::Config;
use crate::domain::{ActionDomain, DomainError, Trust};
use crate::expr::{Constraint, ParamValue, Params};
use crate::fixtures;
use crate::goal_model::{GoalModel, GoalModelError, ModelHistory, Role, SecurityControl, VulnAnnotation};
use crate::learner::{
    self, classify_sustainability, default_deny_connections, default_templates, ConstraintTemplate, ControlCandidate,
    LearnError, Mitigation,
};
use crate::monitor::{Anomaly, AnomalyDetail, AnomalyKind, Event, EventKind, Monitor, MonitorError};
use crate::search::{RuleSource, SearchError, SearchProblem, Trace, Verdict};
use crate::term::{text_list, Action, Fluent, Term};
use crate::State;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Answer(#[from] AnswerError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Model(#[from] GoalModelError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("control `{0}` has no actuator and cannot be enacted")]
    NotEnactable(String),
    #[error("no anomaly {0}")]
    UnknownAnomaly(String),
}

/// A device known before the run starts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: String,
    pub trust: Trust,
    #[serde(default)]
    pub attrs: BTreeMap<String, String>,
    #[serde(default)]
    pub connected: bool,
}

/// Behaviour that must stay possible, replayed from the analysis state
/// with `add` and `remove` applied.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositiveSpec {
    pub label: String,
    #[serde(default, with = "text_list")]
    pub add: Vec<Fluent>,
    #[serde(default, with = "text_list")]
    pub remove: Vec<Fluent>,
    #[serde(with = "text_list")]
    pub actions: Vec<Action>,
}

#[derive(Clone, Debug)]
pub struct Setup {
    pub domain: ActionDomain,
    pub model: GoalModel,
    pub devices: Vec<DeviceSpec>,
    pub positives: Vec<PositiveSpec>,
    pub vulns: VulnerabilityDb,
}

impl Setup {
    /// The bundled smart home with no extra devices.
    pub fn smart_home() -> Self {
        Setup {
            domain: fixtures::smart_home_domain(),
            model: fixtures::smart_home_goals(),
            devices: Vec::new(),
            positives: vec![PositiveSpec {
                label: "tenant_leaves".into(),
                add: Vec::new(),
                remove: Vec::new(),
                actions: vec!["exit(tenant,home)".parse().unwrap(), "close(sl)".parse().unwrap()],
            }],
            vulns: VulnerabilityDb::bundled(),
        }
    }
}

/// One input to the loop. Inputs are what gets persisted and replayed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "input", rename_all = "snake_case")]
pub enum Input {
    Event { event: Event },
    Answer { intervention: String, answer: Answer },
    Tick { time: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyStatus {
    Suspended,
    Planned,
    Resolved,
    /// Handled but nothing was enacted.
    Unmitigated,
    /// Folded into an earlier anomaly with the same suspect.
    Merged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRecord {
    pub anomaly: Anomaly,
    pub status: AnomalyStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<AnalysisOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<String>,
    /// How many times analysis ran for this anomaly.
    pub analyses: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Wait {
    DeviceTrust { anomaly: String, device: String },
    Plan { plan: String },
}

/// What answering an intervention set in motion.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Resumption {
    pub intervention: String,
    pub anomaly: String,
    pub effects: Vec<Effect>,
    pub new_interventions: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Monitoring,
    AwaitingHuman,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceView {
    pub id: String,
    pub trust: Trust,
    pub connected: bool,
}

/// Snapshot served to the operator console.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionView {
    pub time: u64,
    pub phase: Phase,
    pub model_version: u32,
    pub open_anomalies: Vec<AnomalyRecord>,
    pub pending_interventions: Vec<InterventionRequest>,
    pub enacted_controls: Vec<SecurityControl>,
    pub active_assumptions: Vec<String>,
    pub devices: Vec<DeviceView>,
    pub stream_seq: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhatIf {
    pub constraint: String,
    pub eliminates: Vec<String>,
    pub breaks: Vec<String>,
}

pub struct Orchestrator {
    config: Config,
    domain: ActionDomain,
    history: ModelHistory,
    monitor: Monitor,
    vulns: VulnerabilityDb,
    templates: Vec<ConstraintTemplate>,
    positives: Vec<PositiveSpec>,
    connected: BTreeSet<String>,
    now: u64,
    anomalies: BTreeMap<String, AnomalyRecord>,
    anomaly_order: Vec<String>,
    plans: Vec<Plan>,
    interventions: Vec<InterventionRequest>,
    waits: BTreeMap<String, Wait>,
    traces: BTreeMap<String, Trace>,
    stream: Vec<StreamMessage>,
    audit: Vec<AuditRecord>,
}

fn clock(minutes: u64) -> String {
    format!("day {} {:02}:{:02}", minutes / 1440, (minutes % 1440) / 60, minutes % 60)
}

impl Orchestrator {
    pub fn new(config: Config, setup: Setup) -> Self {
        let Setup {
            mut domain,
            model,
            devices,
            positives,
            vulns,
        } = setup;
        let mut connected = BTreeSet::new();
        for d in &devices {
            domain.add_device(&d.id, d.trust, d.attrs.clone());
            if d.connected {
                connected.insert(d.id.clone());
            }
        }
        let monitor = Monitor::new(config.monitor.clone(), devices.iter().map(|d| d.id.clone()));
        Orchestrator {
            config,
            domain,
            history: ModelHistory::new(model),
            monitor,
            vulns,
            templates: default_templates(),
            positives,
            connected,
            now: 0,
            anomalies: BTreeMap::new(),
            anomaly_order: Vec::new(),
            plans: Vec::new(),
            interventions: Vec::new(),
            waits: BTreeMap::new(),
            traces: BTreeMap::new(),
            stream: Vec::new(),
            audit: Vec::new(),
        }
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn domain(&self) -> &ActionDomain {
        &self.domain
    }

    pub fn model(&self) -> &GoalModel {
        self.history.current()
    }

    pub fn history(&self) -> &ModelHistory {
        &self.history
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn stream(&self) -> &[StreamMessage] {
        &self.stream
    }

    /// Messages with `seq > since`.
    pub fn stream_since(&self, since: u64) -> &[StreamMessage] {
        let start = self.stream.partition_point(|m| m.seq <= since);
        &self.stream[start..]
    }

    pub fn audit(&self) -> &[AuditRecord] {
        &self.audit
    }

    pub fn interventions(&self) -> &[InterventionRequest] {
        &self.interventions
    }

    pub fn intervention(&self, id: &str) -> Option<&InterventionRequest> {
        self.interventions.iter().find(|r| r.id == id)
    }

    pub fn pending_interventions(&self) -> impl Iterator<Item = &InterventionRequest> {
        self.interventions.iter().filter(|r| r.state == InterventionState::Pending)
    }

    pub fn plans(&self) -> &[Plan] {
        &self.plans
    }

    pub fn plan(&self, id: &str) -> Option<&Plan> {
        self.plans.iter().find(|p| p.id == id)
    }

    /// Anomaly records in detection order.
    pub fn anomalies(&self) -> impl Iterator<Item = &AnomalyRecord> {
        self.anomaly_order.iter().map(|id| &self.anomalies[id])
    }

    pub fn anomaly(&self, id: &str) -> Option<&AnomalyRecord> {
        self.anomalies.get(id)
    }

    pub fn trace(&self, id: &str) -> Option<&Trace> {
        self.traces.get(id)
    }

    pub fn positives(&self) -> &[PositiveSpec] {
        &self.positives
    }

    pub fn connected_devices(&self) -> &BTreeSet<String> {
        &self.connected
    }

    /// No anomaly waits for analysis, a human or execution.
    pub fn is_quiescent(&self) -> bool {
        self.waits.is_empty()
            && self
                .anomalies
                .values()
                .all(|r| !matches!(r.status, AnomalyStatus::Suspended | AnomalyStatus::Planned))
    }

    pub fn view(&self) -> SessionView {
        let pending: Vec<InterventionRequest> = self.pending_interventions().cloned().collect();
        SessionView {
            time: self.now,
            phase: if pending.is_empty() {
                Phase::Monitoring
            } else {
                Phase::AwaitingHuman
            },
            model_version: self.model().version,
            open_anomalies: self
                .anomalies()
                .filter(|r| matches!(r.status, AnomalyStatus::Suspended | AnomalyStatus::Planned | AnomalyStatus::Unmitigated))
                .cloned()
                .collect(),
            pending_interventions: pending,
            enacted_controls: self.model().enacted_controls().cloned().collect(),
            active_assumptions: self.model().active_assumptions().map(|a| a.id.clone()).collect(),
            devices: self
                .domain
                .agents()
                .values()
                .filter(|a| a.kind == crate::domain::AgentKind::NetDevice)
                .map(|a| DeviceView {
                    id: a.id.clone(),
                    trust: a.trust,
                    connected: self.connected.contains(&a.id),
                })
                .collect(),
            stream_seq: self.stream.last().map_or(0, |m| m.seq),
        }
    }

    /// Digest of everything a read-only request must leave untouched.
    pub fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.view()).unwrap_or_default());
        h.update(self.model().to_string().as_bytes());
        h.update(serde_json::to_vec(&self.interventions).unwrap_or_default());
        h.update(serde_json::to_vec(&self.plans).unwrap_or_default());
        h.update(serde_json::to_vec(&self.audit).unwrap_or_default());
        h.update(self.monitor.snapshot().as_bytes());
        h.update(serde_json::to_vec(&self.positives).unwrap_or_default());
        h.update(self.traces.keys().cloned().collect::<Vec<_>>().join(",").as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    // -----------------------------------------------------------------------
    // inputs

    pub fn handle(&mut self, input: Input) -> Result<Option<Resumption>, OrchestratorError> {
        match input {
            Input::Event { event } => self.ingest(event).map(|_| None),
            Input::Answer { intervention, answer } => self.answer(&intervention, answer).map(Some),
            Input::Tick { time } => self.tick(time).map(|_| None),
        }
    }

    /// Feeds one event through the monitor and handles any anomalies.
    /// Returns the ids of the anomalies raised.
    pub fn ingest(&mut self, event: Event) -> Result<Vec<String>, OrchestratorError> {
        let anomalies = self.monitor.ingest(&event)?;
        self.now = self.now.max(event.time);
        match event.kind {
            EventKind::DeviceConnected => {
                if self.domain.agent(&event.subject).is_none() {
                    let attrs = event
                        .attrs
                        .iter()
                        .map(|(k, v)| (k.clone(), v.as_str().map_or_else(|| v.to_string(), str::to_string)))
                        .collect();
                    self.domain.add_device(&event.subject, Trust::Unknown, attrs);
                }
                self.connected.insert(event.subject.clone());
            }
            EventKind::DeviceDisconnected => {
                self.connected.remove(&event.subject);
            }
            _ => {}
        }
        self.publish(StreamPayload::Event(event));
        let mut ids = Vec::new();
        for a in anomalies {
            ids.push(a.id.clone());
            self.publish(StreamPayload::Anomaly(a.clone()));
            self.anomaly_order.push(a.id.clone());
            self.anomalies.insert(
                a.id.clone(),
                AnomalyRecord {
                    anomaly: a.clone(),
                    status: AnomalyStatus::Suspended,
                    outcome: None,
                    plan: None,
                    analyses: 0,
                },
            );
            self.analyse_and_plan(&a.id)?;
        }
        Ok(ids)
    }

    pub fn answer(&mut self, id: &str, answer: Answer) -> Result<Resumption, OrchestratorError> {
        let now = self.now;
        let req = self
            .interventions
            .iter_mut()
            .find(|r| r.id == id)
            .ok_or_else(|| AnswerError::Unknown(id.to_string()))?;
        match req.state {
            InterventionState::Answered => return Err(AnswerError::AlreadyAnswered(id.to_string()).into()),
            InterventionState::Expired => return Err(AnswerError::Expired(id.to_string()).into()),
            InterventionState::Pending => {}
        }
        req.answer_schema
            .accepts(&answer)
            .map_err(|reason| AnswerError::SchemaMismatch {
                id: id.to_string(),
                reason,
            })?;
        req.state = InterventionState::Answered;
        req.answer = Some(answer.clone());
        req.answered_at = Some(now);
        let req = req.clone();
        self.publish(StreamPayload::Intervention(req.clone()));
        let before = self.interventions.len();
        let mut effects = Vec::new();
        match self.waits.remove(id) {
            Some(Wait::DeviceTrust { anomaly, device }) => {
                let trust = if answer.as_bool() == Some(true) {
                    Trust::Trusted
                } else {
                    Trust::Untrusted
                };
                self.domain.set_trust(&device, trust)?;
                let eff = vec![Effect::TrustRecorded { device, trust }];
                self.record(&anomaly, "answer", None, None, vec![], vec![(id.to_string(), answer)], eff.clone());
                effects.extend(eff);
                effects.extend(self.analyse_and_plan(&anomaly)?);
            }
            Some(Wait::Plan { plan }) => {
                self.record(&req.anomaly, "answer", None, None, vec![], vec![(id.to_string(), answer)], vec![]);
                if self.plan_ready(&plan) {
                    effects.extend(self.execute(&plan)?);
                }
            }
            None => {}
        }
        Ok(Resumption {
            intervention: id.to_string(),
            anomaly: req.anomaly,
            effects,
            new_interventions: self.interventions[before..].iter().map(|r| r.id.clone()).collect(),
        })
    }

    /// Advances the clock, expiring and re-queueing stale interventions.
    pub fn tick(&mut self, time: u64) -> Result<Vec<String>, OrchestratorError> {
        self.now = self.now.max(time);
        let now = self.now;
        let stale: Vec<usize> = (0..self.interventions.len())
            .filter(|&i| {
                let r = &self.interventions[i];
                r.state == InterventionState::Pending && r.expires_at <= now
            })
            .collect();
        let mut replacements = Vec::new();
        for i in stale {
            self.interventions[i].state = InterventionState::Expired;
            let old = self.interventions[i].clone();
            self.publish(StreamPayload::Intervention(old.clone()));
            let mut fresh = old.clone();
            fresh.id = format!("iv-{}", self.interventions.len() + 1);
            fresh.state = InterventionState::Pending;
            fresh.created_at = now;
            fresh.expires_at = now + self.config.expiry_minutes;
            fresh.answer = None;
            fresh.answered_at = None;
            if let Some(w) = self.waits.remove(&old.id) {
                if let Wait::Plan { plan } = &w {
                    if let Some(p) = self.plans.iter_mut().find(|p| &p.id == plan) {
                        for iv in &mut p.interventions {
                            if *iv == old.id {
                                iv.clone_from(&fresh.id);
                            }
                        }
                    }
                }
                self.waits.insert(fresh.id.clone(), w);
            }
            self.interventions.push(fresh.clone());
            self.publish(StreamPayload::Intervention(fresh.clone()));
            self.record(
                &old.anomaly,
                "requeue",
                None,
                None,
                vec![fresh.id.clone()],
                vec![],
                vec![Effect::Requeued {
                    expired: old.id,
                    replacement: fresh.id.clone(),
                }],
            );
            replacements.push(fresh.id);
        }
        Ok(replacements)
    }

    // -----------------------------------------------------------------------
    // analysis

    /// Facts analysis starts from: the domain's initial state plus the
    /// devices currently on the network.
    pub fn analysis_state(&self) -> State {
        let mut s = self.domain.initial_state();
        for d in &self.connected {
            s = s.with_fact(Fluent::new("connected", [d.as_str()]));
        }
        s
    }

    fn bounded(&self, p: SearchProblem, horizon: u32) -> SearchProblem {
        let mut p = p.with_horizon(horizon);
        p.max_horizon = self.config.max_horizon;
        p
    }

    /// The current model as a search problem.
    pub fn problem(&self) -> Result<SearchProblem, OrchestratorError> {
        let p = SearchProblem::from_model(self.domain.clone(), self.model(), self.analysis_state())?;
        Ok(self.bounded(p, self.config.horizon))
    }

    /// Replays one positive spec under `p`.
    pub fn positive_trace(&self, p: &SearchProblem, spec: &PositiveSpec) -> Result<Trace, SearchError> {
        let mut init = self.analysis_state();
        for f in &spec.remove {
            init = init.without_fact(f);
        }
        for f in &spec.add {
            init = init.with_fact(f.clone());
        }
        p.replay_from(&init, &spec.actions)
    }

    /// Positive traces replayed under `p`; specs that no longer replay
    /// are left out.
    pub fn positive_traces(&self, p: &SearchProblem) -> Vec<Trace> {
        self.positives
            .iter()
            .filter_map(|spec| self.positive_trace(p, spec).ok())
            .filter(|t| t.verdict == Verdict::Satisfying)
            .collect()
    }

    fn suspect_for(&self, kind: AnomalyKind) -> Option<String> {
        self.config
            .suspects
            .get(&kind.to_string())
            .filter(|id| self.model().assumption(id).is_some_and(|a| a.active))
            .cloned()
    }

    /// The problem with the suspect assumption removed. Network suspects
    /// are probed with a hypothetical unknown device that still has to
    /// join, one step beyond the usual horizon.
    fn suspect_problem(&self, kind: AnomalyKind, assumption: &str) -> Result<SearchProblem, OrchestratorError> {
        let without = RuleSource::Assumption(assumption.to_string());
        if kind == AnomalyKind::FrequentNewDevices {
            let mut domain = self.domain.clone();
            domain.add_device(&self.config.probe_device, Trust::Unknown, BTreeMap::new());
            let mut init = domain.initial_state();
            for d in &self.connected {
                if domain.agent(d).is_some_and(|a| a.trust == Trust::Trusted) {
                    init = init.with_fact(Fluent::new("connected", [d.as_str()]));
                }
            }
            let p = SearchProblem::from_model(domain, self.model(), init)?.without(&without);
            let h = (self.config.horizon + 1).min(self.config.max_horizon);
            return Ok(self.bounded(p, h));
        }
        let p = SearchProblem::from_model(self.domain.clone(), self.model(), self.analysis_state())?.without(&without);
        Ok(self.bounded(p, self.config.horizon))
    }

    pub fn analyse(&self, anomaly: &Anomaly) -> Result<AnalysisOutcome, OrchestratorError> {
        match &anomaly.detail {
            AnomalyDetail::NewDevice { device, .. } => {
                let trust = self.domain.agent(device).map_or(Trust::Unknown, |a| a.trust);
                match trust {
                    Trust::Unknown => Ok(AnalysisOutcome::NeedFact {
                        fact: anomaly.needs_human_fact.clone().unwrap_or_else(|| "device_trust".into()),
                        device: device.clone(),
                    }),
                    Trust::Trusted => Ok(AnalysisOutcome::Benign {
                        reason: format!("{device} is trusted by the tenant"),
                    }),
                    Trust::Untrusted => match self.problem()?.find_violating_trace()? {
                        Some(trace) => Ok(AnalysisOutcome::ThreatConfirmed {
                            device: Some(device.clone()),
                            trace,
                        }),
                        None => Ok(AnalysisOutcome::Benign {
                            reason: format!("no violating trace within {} steps", self.config.horizon),
                        }),
                    },
                }
            }
            AnomalyDetail::Frequency { .. } | AnomalyDetail::Latency { .. } => {
                let Some(assumption) = self.suspect_for(anomaly.kind) else {
                    return Ok(AnalysisOutcome::Benign {
                        reason: format!("no active assumption is configured as suspect for {}", anomaly.kind),
                    });
                };
                let p = self.suspect_problem(anomaly.kind, &assumption)?;
                match p.find_violating_trace()? {
                    Some(trace) => Ok(AnalysisOutcome::AssumptionSuspect {
                        assumption,
                        horizon: p.horizon,
                        trace,
                    }),
                    None => Ok(AnalysisOutcome::Benign {
                        reason: format!("no violating trace within {} steps even without {assumption}", p.horizon),
                    }),
                }
            }
        }
    }

    fn analyse_and_plan(&mut self, anomaly_id: &str) -> Result<Vec<Effect>, OrchestratorError> {
        let anomaly = self
            .anomalies
            .get(anomaly_id)
            .ok_or_else(|| OrchestratorError::UnknownAnomaly(anomaly_id.to_string()))?
            .anomaly
            .clone();
        let outcome = self.analyse(&anomaly)?;
        if let Some(t) = outcome.trace() {
            self.traces.insert(t.id.clone(), t.clone());
        }
        {
            let rec = self.anomalies.get_mut(anomaly_id).expect("checked above");
            rec.outcome = Some(outcome.clone());
            rec.analyses += 1;
        }
        match &outcome {
            AnalysisOutcome::NeedFact { device, .. } => {
                let iv = self.ask_device_trust(&anomaly, device);
                self.set_status(anomaly_id, AnomalyStatus::Suspended);
                self.record(anomaly_id, "analyse", Some(outcome), None, vec![iv], vec![], vec![]);
                Ok(vec![])
            }
            AnalysisOutcome::Benign { .. } => {
                let mut effects = Vec::new();
                if let AnomalyDetail::NewDevice { device, .. } = &anomaly.detail {
                    if self.domain.agent(device).is_some_and(|a| a.trust == Trust::Trusted) {
                        self.grant_access(device);
                        effects.push(Effect::AccessGranted { device: device.clone() });
                    }
                }
                self.set_status(anomaly_id, AnomalyStatus::Resolved);
                self.record(anomaly_id, "analyse", Some(outcome), None, vec![], vec![], effects.clone());
                Ok(effects)
            }
            AnalysisOutcome::AssumptionSuspect { assumption, .. }
                if self.plans.iter().any(|p| p.suspect.as_deref() == Some(assumption)) =>
            {
                self.set_status(anomaly_id, AnomalyStatus::Merged);
                self.record(anomaly_id, "merged", Some(outcome), None, vec![], vec![], vec![]);
                Ok(vec![])
            }
            AnalysisOutcome::ThreatConfirmed { .. } | AnalysisOutcome::AssumptionSuspect { .. } => {
                let plan = self.make_plan(&anomaly, &outcome)?;
                let plan_id = plan.id.clone();
                let ivs = plan.interventions.clone();
                self.plans.push(plan.clone());
                if let Some(rec) = self.anomalies.get_mut(anomaly_id) {
                    rec.plan = Some(plan_id.clone());
                }
                self.set_status(anomaly_id, AnomalyStatus::Planned);
                self.record(anomaly_id, "plan", Some(outcome), Some(plan), ivs, vec![], vec![]);
                if self.plan_ready(&plan_id) {
                    return self.execute(&plan_id);
                }
                Ok(vec![])
            }
        }
    }

    fn grant_access(&mut self, device: &str) {
        let label = format!("device:{device}");
        if self.positives.iter().any(|p| p.label == label) {
            return;
        }
        let mut actions = Vec::new();
        for l in self.domain.locks() {
            actions.push(Action::new("close", [device, l.as_str()]));
            actions.push(Action::new("open", [device, l.as_str()]));
        }
        self.positives.push(PositiveSpec {
            label,
            add: vec![Fluent::new("connected", [device])],
            remove: Vec::new(),
            actions,
        });
    }

    // -----------------------------------------------------------------------
    // planning

    fn make_plan(&mut self, anomaly: &Anomaly, outcome: &AnalysisOutcome) -> Result<Plan, OrchestratorError> {
        let mut plan = Plan {
            id: format!("plan-{}", self.plans.len() + 1),
            anomaly: anomaly.id.clone(),
            suspect: None,
            short_term: None,
            root_cause: None,
            deactivate: Vec::new(),
            candidates: Vec::new(),
            options: Vec::new(),
            interventions: Vec::new(),
            status: PlanStatus::Pending,
        };
        let tags: Vec<&str> = anomaly.tags.iter().map(String::as_str).collect();
        match (outcome, &anomaly.detail) {
            (AnalysisOutcome::ThreatConfirmed { trace, device }, _) => {
                let p = self.problem()?;
                self.plan_learned_control(&mut plan, anomaly, &p, trace, device.as_deref())?;
            }
            (AnalysisOutcome::AssumptionSuspect { assumption, trace, .. }, AnomalyDetail::Frequency { devices, .. }) => {
                plan.suspect = Some(assumption.clone());
                let p = self.suspect_problem(anomaly.kind, assumption)?;
                let positives = self.positive_traces(&p);
                let mut c = ControlCandidate::new(default_deny_connections(), "connect-by-default", 1);
                if let Ok(schema) = self.domain.schema("connect", 1) {
                    c.enactable = schema.controllable;
                    c.visible = schema.visible;
                }
                c.learned_from = vec![trace.id.clone()];
                c.tags = anomaly.tags.clone();
                let guarded = p.clone().with_rule(RuleSource::Candidate, c.constraint.clone());
                if guarded.replay_from(trace.initial(), &trace.ground_actions()).is_err() {
                    c.eliminates.insert(trace.id.clone());
                }
                for t in &positives {
                    if guarded.replay_from(t.initial(), &t.ground_actions()).is_err() {
                        c.breaks.insert(t.id.clone());
                    }
                }
                c.sustainability = classify_sustainability(&Mitigation::Control(c.clone()), self.model(), tags.iter().copied());
                plan.candidates.push(CandidateSummary::from(&c));
                let window_h = self.config.monitor.window_minutes / 60;
                let iv = self.ask(
                    anomaly,
                    Some(&plan.id),
                    "default_deny_new_devices".into(),
                    Role::Tenant,
                    "Keep every new device off the WiFi network until you have said you trust it?".into(),
                    AnswerSchema::Boolean,
                    Explanation {
                        observability: format!(
                            "{} devices you have not seen before joined the WiFi network within {window_h} hours: {}.",
                            devices.len(),
                            devices.join(", ")
                        ),
                        transparency: format!(
                            "So many unknown devices suggest the WiFi password no longer keeps strangers out. If one of them can reach the smart lock, an outsider could get in while you are away ({}). Answering yes refuses unknown devices from now on; devices you already trust keep working.",
                            trace.render()
                        ),
                        feedforward: None,
                        intelligibility: None,
                    },
                    None,
                    true,
                    vec![trace.id.clone()],
                );
                plan.interventions.push(iv);
                plan.short_term = Some(c);

                let a = self.model().assumption(assumption).cloned();
                if let Some((param, current)) = a.as_ref().and_then(|a| {
                    a.params.iter().find_map(|(k, v)| match v {
                        ParamValue::Int(i) => Some((k.clone(), *i)),
                        _ => None,
                    })
                }) {
                    let sustainability = classify_sustainability(
                        &Mitigation::AssumptionEvolution {
                            assumption: assumption.clone(),
                        },
                        self.model(),
                        tags.iter().copied(),
                    );
                    let iv = self.ask(
                        anomaly,
                        Some(&plan.id),
                        format!("evolve:{assumption}:{param}"),
                        Role::Engineer,
                        format!("Which value of {param} should assumption {assumption} use from now on?"),
                        AnswerSchema::Integer {
                            min: current + 1,
                            max: 64,
                        },
                        Explanation {
                            observability: format!(
                                "{} unknown devices joined {} while {assumption} held with {param} = {current}.",
                                devices.len(),
                                self.config.monitor.network
                            ),
                            transparency: format!(
                                "With {assumption} removed, analysis finds a violating trace within {} steps: {}.",
                                trace.actions.len(),
                                trace.render()
                            ),
                            feedforward: None,
                            intelligibility: Some(format!(
                                "The answer becomes the new {param} of {assumption} and the network's password policy is raised to match. The default-deny control proposed with it stays in force until it is withdrawn."
                            )),
                        },
                        None,
                        true,
                        vec![trace.id.clone()],
                    );
                    plan.interventions.push(iv);
                    plan.root_cause = Some(RootCause::AssumptionEvolution {
                        assumption: assumption.clone(),
                        param,
                        current,
                        sustainability,
                    });
                }
            }
            (AnalysisOutcome::AssumptionSuspect { assumption, trace, .. }, detail) => {
                plan.suspect = Some(assumption.clone());
                plan.deactivate.push(assumption.clone());
                let device = match detail {
                    AnomalyDetail::Latency { device, .. } => device.clone(),
                    _ => anomaly.tags.first().cloned().unwrap_or_default(),
                };
                let p = self.suspect_problem(anomaly.kind, assumption)?;
                self.plan_learned_control(&mut plan, anomaly, &p, trace, None)?;
                self.plan_vulnerability(&mut plan, anomaly, &device, trace, &tags);
            }
            _ => {}
        }
        Ok(plan)
    }

    fn plan_learned_control(
        &mut self,
        plan: &mut Plan,
        anomaly: &Anomaly,
        p: &SearchProblem,
        trace: &Trace,
        device: Option<&str>,
    ) -> Result<(), OrchestratorError> {
        let positives = self.positive_traces(p);
        let report = match learner::learn_report(p, &positives, &self.templates) {
            Ok(r) => r,
            Err(LearnError::NoTemplateMatch(_)) => {
                let subject = device.unwrap_or("the system").to_string();
                let iv = self.ask_advice(anomaly, plan, &subject, trace);
                plan.root_cause = Some(RootCause::Advice { device: subject });
                plan.interventions.push(iv);
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        self.traces.insert(report.trace.id.clone(), report.trace.clone());
        plan.candidates = report.candidates.iter().map(CandidateSummary::from).collect();
        let tags: Vec<&str> = anomaly.tags.iter().map(String::as_str).collect();
        match report.best {
            Some(mut c) => {
                c.sustainability = classify_sustainability(&Mitigation::Control(c.clone()), self.model(), tags.iter().copied());
                let needs_approval = c.visible || !self.config.auto_enact;
                if needs_approval {
                    let who = device.map_or_else(|| "A device".to_string(), |d| format!("Device {d}"));
                    let observability = match &anomaly.detail {
                        AnomalyDetail::Latency {
                            device,
                            latency_ms,
                            baseline,
                            ..
                        } => format!(
                            "Traffic to {device} took {latency_ms:.0} ms, far above its usual {:.0} ms. Someone may be intercepting the commands sent to it.",
                            baseline.mean
                        ),
                        _ => format!("{who}, which you did not mark as trusted, can send commands to the smart lock."),
                    };
                    let iv = self.ask(
                        anomaly,
                        Some(&plan.id),
                        format!("approve_control:{}", c.control_id()),
                        Role::Tenant,
                        format!("Apply the control `{}`?", c.text()),
                        AnswerSchema::Boolean,
                        Explanation {
                            observability,
                            transparency: format!(
                                "Without it an outsider could get in while you are away: {}. With it, the actions it forbids are refused; it eliminates {} of {} such traces.",
                                trace.render(),
                                c.eliminates.len(),
                                report.total.len()
                            ),
                            feedforward: device.map(|d| self.device_details(d)),
                            intelligibility: None,
                        },
                        device,
                        true,
                        vec![trace.id.clone()],
                    );
                    plan.interventions.push(iv);
                }
                plan.short_term = Some(c);
            }
            None => {
                let options: Vec<ControlCandidate> = report.candidates.iter().filter(|c| c.enactable).cloned().collect();
                let mut texts: Vec<String> = options.iter().map(ControlCandidate::text).collect();
                texts.push("none".into());
                let listing: Vec<String> = options
                    .iter()
                    .map(|c| {
                        format!(
                            "`{}` eliminates {}/{} violating traces and breaks {} positive traces",
                            c.text(),
                            c.eliminates.len(),
                            report.total.len(),
                            c.breaks.len()
                        )
                    })
                    .collect();
                let iv = self.ask(
                    anomaly,
                    Some(&plan.id),
                    format!("choose_control:{}", anomaly.id),
                    Role::Engineer,
                    "No learned control removes every violation without breaking expected behaviour. Which one should be enacted?".into(),
                    AnswerSchema::Choice { options: texts },
                    Explanation {
                        observability: format!("Anomaly {} ({}) led to the violating trace {}.", anomaly.id, anomaly.kind, trace.render()),
                        transparency: listing.join("; "),
                        feedforward: device.map(|d| self.device_details(d)),
                        intelligibility: Some(
                            "The chosen constraint is added to the enacted controls and refuses every matching action from then on. Choosing none leaves the controls unchanged and the anomaly open.".into(),
                        ),
                    },
                    None,
                    true,
                    vec![trace.id.clone()],
                );
                plan.interventions.push(iv);
                plan.options = options;
            }
        }
        Ok(())
    }

    fn plan_vulnerability(&mut self, plan: &mut Plan, anomaly: &Anomaly, device: &str, trace: &Trace, tags: &[&str]) {
        let record = self.vulns.lookup(device).into_iter().find(|r| r.fix.is_some()).cloned();
        match record {
            Some(record) => {
                let sustainability = classify_sustainability(
                    &Mitigation::Patch {
                        cve: record.cve_id.clone(),
                        device: device.to_string(),
                    },
                    self.model(),
                    tags.iter().copied(),
                );
                let fix = record.fix.clone().unwrap_or_default();
                let block = plan.short_term.as_ref().map(|c| c.control_id());
                let iv = self.ask(
                    anomaly,
                    Some(&plan.id),
                    format!("patch_ack:{}", record.cve_id),
                    Role::Engineer,
                    format!("Acknowledge the patch task for {} on {device}.", record.cve_id),
                    AnswerSchema::Acknowledgement,
                    Explanation {
                        observability: format!("Anomaly {} on {device} matches known vulnerability {}: {}", anomaly.id, record.cve_id, record.description),
                        transparency: format!("Fix: {fix}. Until then the model no longer relies on trusted devices to keep the door shut, since analysis shows {}.", trace.render()),
                        feedforward: None,
                        intelligibility: Some(match block {
                            Some(id) => format!("Control {id} blocks device commands to {device} in the meantime; disable it once the patch is installed."),
                            None => format!("No control is enacted for {device}; the patch is the only mitigation."),
                        }),
                    },
                    None,
                    false,
                    vec![trace.id.clone()],
                );
                plan.interventions.push(iv);
                plan.root_cause = Some(RootCause::Patch { record, sustainability });
            }
            None => {
                let iv = self.ask_advice(anomaly, plan, device, trace);
                plan.interventions.push(iv);
                plan.root_cause = Some(RootCause::Advice { device: device.to_string() });
            }
        }
    }

    fn ask_advice(&mut self, anomaly: &Anomaly, plan: &Plan, subject: &str, trace: &Trace) -> String {
        self.ask(
            anomaly,
            Some(&plan.id),
            format!("advice:{subject}"),
            Role::Engineer,
            format!("No known fix matches anomaly {} on {subject}. How should it be handled?", anomaly.id),
            AnswerSchema::FreeText,
            Explanation {
                observability: format!("Anomaly {} ({}) on {subject}.", anomaly.id, anomaly.kind),
                transparency: format!("Analysis found the violating trace {} and the vulnerability database has no entry with a fix.", trace.render()),
                feedforward: None,
                intelligibility: None,
            },
            None,
            false,
            vec![trace.id.clone()],
        )
    }

    fn device_details(&self, device: &str) -> String {
        match self.domain.agent(device) {
            Some(a) if !a.attrs.is_empty() => {
                let attrs: Vec<String> = a.attrs.iter().map(|(k, v)| format!("{k}={v}")).collect();
                format!("{device} reports {}.", attrs.join(", "))
            }
            _ => format!("{device} reported no details about itself."),
        }
    }

    fn ask_device_trust(&mut self, anomaly: &Anomaly, device: &str) -> String {
        let id = self.ask(
            anomaly,
            None,
            format!("device_trust:{device}"),
            Role::Tenant,
            format!("A new device, {device}, joined the WiFi network. Do you trust it?"),
            AnswerSchema::Boolean,
            Explanation {
                observability: format!("{device} connected to the {} network at {}.", self.config.monitor.network, clock(anomaly.detected_at)),
                transparency: format!(
                    "Devices on the network can send commands to the smart lock. If you trust {device} it keeps that access; if not, the system looks for ways it could let someone in and proposes a control."
                ),
                feedforward: Some(self.device_details(device)),
                intelligibility: None,
            },
            Some(device),
            false,
            vec![],
        );
        self.waits.insert(
            id.clone(),
            Wait::DeviceTrust {
                anomaly: anomaly.id.clone(),
                device: device.to_string(),
            },
        );
        id
    }

    #[allow(clippy::too_many_arguments)]
    fn ask(
        &mut self,
        anomaly: &Anomaly,
        plan: Option<&str>,
        key: String,
        role: Role,
        question: String,
        answer_schema: AnswerSchema,
        explanation: Explanation,
        device: Option<&str>,
        modifies_controls: bool,
        traces: Vec<String>,
    ) -> String {
        let id = format!("iv-{}", self.interventions.len() + 1);
        let req = InterventionRequest {
            id: id.clone(),
            key,
            role,
            question,
            answer_schema,
            explanation,
            anomaly: anomaly.id.clone(),
            plan: plan.map(str::to_string),
            device: device.map(str::to_string),
            modifies_controls,
            traces,
            state: InterventionState::Pending,
            created_at: self.now,
            expires_at: self.now + self.config.expiry_minutes,
            answer: None,
            answered_at: None,
        };
        if let Some(p) = plan {
            self.waits.insert(id.clone(), Wait::Plan { plan: p.to_string() });
        }
        self.interventions.push(req.clone());
        self.publish(StreamPayload::Intervention(req));
        id
    }

    // -----------------------------------------------------------------------
    // execution

    fn plan_ready(&self, plan_id: &str) -> bool {
        self.plan(plan_id).is_some_and(|p| {
            p.status == PlanStatus::Pending
                && p.interventions
                    .iter()
                    .all(|iv| self.intervention(iv).is_some_and(|r| r.state == InterventionState::Answered))
        })
    }

    /// Adds `c` to the model as an enacted control.
    pub fn enact(&mut self, c: &ControlCandidate, rationale: &str, approval: Approval) -> Result<Effect, OrchestratorError> {
        if !c.enactable {
            return Err(OrchestratorError::NotEnactable(c.text()));
        }
        let next = self.model().with_control(c.to_control(rationale, true))?;
        self.history.commit(next);
        Ok(Effect::ControlEnacted {
            control: c.control_id(),
            constraint: c.text(),
            approval,
        })
    }

    fn execute(&mut self, plan_id: &str) -> Result<Vec<Effect>, OrchestratorError> {
        let plan = self.plan(plan_id).cloned().expect("plan exists");
        let mut effects = Vec::new();
        let mut answers = Vec::new();
        let mut mitigated = false;
        let mut short_term_decided = false;
        for iv in &plan.interventions {
            let req = self.intervention(iv).cloned().expect("plan intervention exists");
            let answer = req.answer.clone().expect("plan is ready");
            answers.push((req.id.clone(), answer.clone()));
            let approval = Approval::Intervention {
                id: req.id.clone(),
                role: req.role,
            };
            match req.topic() {
                "approve_control" | "default_deny_new_devices" => {
                    short_term_decided = true;
                    let Some(c) = &plan.short_term else { continue };
                    if answer.as_bool() == Some(true) {
                        let rationale = format!("Approved for anomaly {}", plan.anomaly);
                        effects.push(self.enact(c, &rationale, approval)?);
                        mitigated = true;
                    } else {
                        effects.push(Effect::ControlRejected {
                            constraint: c.text(),
                            reason: format!("{} declined", req.id),
                        });
                    }
                }
                "choose_control" => {
                    short_term_decided = true;
                    let choice = answer.as_text().unwrap_or("none");
                    match plan.options.iter().find(|c| c.text() == choice) {
                        Some(c) => {
                            let rationale = format!("Chosen by an engineer for anomaly {}", plan.anomaly);
                            effects.push(self.enact(c, &rationale, approval)?);
                            mitigated = true;
                        }
                        None => effects.push(Effect::ControlRejected {
                            constraint: "none".into(),
                            reason: format!("{} chose no candidate", req.id),
                        }),
                    }
                }
                "evolve" => {
                    if let (Some(RootCause::AssumptionEvolution { assumption, param, .. }), Some(v)) = (&plan.root_cause, answer.as_int()) {
                        let params: Params = [(param.clone(), ParamValue::Int(v))].into_iter().collect();
                        self.history
                            .evolve_assumption(assumption, &params, &plan.anomaly, Role::Engineer)?;
                        let rec = self.history.records().last().cloned().expect("evolution recorded");
                        effects.push(Effect::AssumptionEvolved {
                            assumption: rec.assumption,
                            old: rec.old,
                            new: rec.new,
                            version: rec.version,
                            approver: Role::Engineer,
                        });
                        let net = self.config.monitor.network.clone();
                        self.domain
                            .replace_initial("password_chars", Fluent::new("password_chars", [Term::sym(&net), Term::Int(v)]));
                        effects.push(Effect::PasswordPolicy { network: net, min_chars: v });
                        mitigated = true;
                    }
                }
                "patch_ack" => {
                    if let Some(RootCause::Patch { record, .. }) = &plan.root_cause {
                        let fix = record.fix.clone().unwrap_or_default();
                        let next = self.model().with_vulnerability(VulnAnnotation {
                            cve: record.cve_id.clone(),
                            device: record.device.clone(),
                            fix: record.fix.clone(),
                            status: "patch-scheduled".into(),
                        });
                        self.history.commit(next);
                        effects.push(Effect::PatchScheduled {
                            cve: record.cve_id.clone(),
                            device: record.device.clone(),
                            fix,
                        });
                        mitigated = true;
                    }
                }
                "advice" => {
                    if let Some(RootCause::Advice { device }) = &plan.root_cause {
                        effects.push(Effect::AdviceRecorded {
                            device: device.clone(),
                            text: answer.as_text().unwrap_or_default().to_string(),
                        });
                    }
                }
                _ => {}
            }
        }
        if !short_term_decided {
            if let Some(c) = &plan.short_term {
                let rationale = format!("Enacted without approval for anomaly {}", plan.anomaly);
                effects.push(self.enact(c, &rationale, Approval::AutoEnactPolicy)?);
                mitigated = true;
            }
        }
        for a in &plan.deactivate {
            if self.model().assumption(a).is_some_and(|x| x.active) {
                let params: Params = [("active".to_string(), ParamValue::Bool(false))].into_iter().collect();
                self.history.evolve_assumption(a, &params, &plan.anomaly, Role::System)?;
                let rec = self.history.records().last().cloned().expect("evolution recorded");
                effects.push(Effect::AssumptionEvolved {
                    assumption: rec.assumption,
                    old: rec.old,
                    new: rec.new,
                    version: rec.version,
                    approver: Role::System,
                });
            }
        }
        if let Some(p) = self.plans.iter_mut().find(|p| p.id == plan_id) {
            p.status = PlanStatus::Executed;
        }
        let status = if mitigated {
            AnomalyStatus::Resolved
        } else {
            AnomalyStatus::Unmitigated
        };
        self.set_status(&plan.anomaly, status);
        let executed = self.plan(plan_id).cloned();
        self.record(&plan.anomaly, "execute", None, executed, vec![], answers, effects.clone());
        Ok(effects)
    }

    /// Evaluates a constraint against the current model without changing
    /// anything.
    pub fn whatif(&self, constraint: &Constraint) -> Result<WhatIf, OrchestratorError> {
        let p = self.problem()?;
        let positives = self.positive_traces(&p);
        let c = ControlCandidate::new(constraint.clone(), "whatif", 0);
        let e = learner::evaluate_candidate(&c, &p, &positives)?;
        Ok(WhatIf {
            constraint: constraint.to_string(),
            eliminates: e.eliminates.into_iter().collect(),
            breaks: e.breaks.into_iter().collect(),
        })
    }

    // -----------------------------------------------------------------------
    // bookkeeping

    fn set_status(&mut self, anomaly: &str, status: AnomalyStatus) {
        if let Some(r) = self.anomalies.get_mut(anomaly) {
            r.status = status;
        }
    }

    fn publish(&mut self, payload: StreamPayload) -> u64 {
        let seq = self.stream.len() as u64 + 1;
        self.stream.push(StreamMessage {
            seq,
            time: self.now,
            payload,
        });
        seq
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        anomaly: &str,
        step: &str,
        outcome: Option<AnalysisOutcome>,
        plan: Option<Plan>,
        interventions: Vec<String>,
        answers: Vec<(String, Answer)>,
        effects: Vec<Effect>,
    ) {
        let rec = AuditRecord {
            seq: self.stream.len() as u64 + 1,
            time: self.now,
            anomaly: anomaly.to_string(),
            step: step.to_string(),
            outcome,
            plan,
            interventions,
            answers,
            effects,
        };
        self.audit.push(rec.clone());
        self.publish(StreamPayload::Decision(rec));
    }
}
