use sas_core::config::Config;
use sas_core::monitor::{Event, EventKind};
use sas_core::orchestrator::{
    AnalysisOutcome, Answer, AnswerError, AnswerSchema, Approval, DeviceSpec, Effect, InterventionState, Orchestrator,
    OrchestratorError, RootCause, Setup, StreamPayload,
};
use sas_core::goal_model::{Role, Sustainability};
use sas_core::domain::Trust;

fn connect(id: u64, time: u64, dev: &str) -> Event {
    Event::new(id, time, EventKind::DeviceConnected, dev).with_attr("type", "camera")
}

fn phone() -> DeviceSpec {
    DeviceSpec {
        id: "phone".into(),
        trust: Trust::Trusted,
        attrs: Default::default(),
        connected: true,
    }
}

fn orchestrator(devices: Vec<DeviceSpec>) -> Orchestrator {
    let mut setup = Setup::smart_home();
    setup.devices = devices;
    Orchestrator::new(Config::default(), setup)
}

fn pending_key(o: &Orchestrator, key: &str) -> String {
    o.pending_interventions()
        .find(|r| r.key == key)
        .unwrap_or_else(|| panic!("no pending {key}: {:?}", o.pending_interventions().map(|r| &r.key).collect::<Vec<_>>()))
        .id
        .clone()
}

#[test]
fn untrusted_device_leads_to_an_approved_control() {
    let mut o = orchestrator(vec![phone()]);
    let an = o.ingest(connect(1, 60, "d1")).unwrap();
    assert_eq!(an.len(), 1);
    let iv = pending_key(&o, "device_trust:d1");
    let req = o.intervention(&iv).unwrap();
    assert_eq!(req.role, Role::Tenant);
    assert_eq!(req.answer_schema, AnswerSchema::Boolean);
    assert!(req.missing_explanation().is_empty());
    assert!(!o.is_quiescent());

    let r = o.answer(&iv, Answer::Bool(false)).unwrap();
    assert_eq!(r.new_interventions.len(), 1);
    let rec = o.anomaly(&an[0]).unwrap().clone();
    assert_eq!(rec.analyses, 2);
    let Some(AnalysisOutcome::ThreatConfirmed { trace, .. }) = &rec.outcome else { panic!("{:?}", rec.outcome) };
    assert_eq!(trace.render(), "exit(tenant,home)@1, close(sl)@2, open(d1,sl)@3, enter(outsider,home)@4");
    let plan = o.plan(rec.plan.as_ref().unwrap()).unwrap().clone();
    let c = plan.short_term.as_ref().unwrap();
    assert_eq!(c.text(), "forbid open(X,sl) when net_device(X) & X = d1");
    assert_eq!(c.sustainability, Sustainability::ShortTerm);

    let approve = pending_key(&o, &format!("approve_control:{}", c.control_id()));
    let r = o.answer(&approve, Answer::Bool(true)).unwrap();
    assert!(matches!(&r.effects[0], Effect::ControlEnacted { approval: Approval::Intervention { role: Role::Tenant, .. }, .. }));
    assert!(o.model().control(&c.control_id()).unwrap().enacted);
    assert!(o.is_quiescent());
    assert!(o.problem().unwrap().find_violating_trace().unwrap().is_none());

    let err = o.answer(&approve, Answer::Bool(true)).unwrap_err();
    assert!(matches!(err, OrchestratorError::Answer(AnswerError::AlreadyAnswered(_))));
}

#[test]
fn trusted_speaker_is_granted_and_keeps_working() {
    let mut o = orchestrator(vec![]);
    o.ingest(connect(1, 10, "speaker")).unwrap();
    let iv = pending_key(&o, "device_trust:speaker");
    let req = o.intervention(&iv).unwrap();
    assert!(req.explanation.feedforward.as_deref().unwrap().contains("camera"));
    let r = o.answer(&iv, Answer::Bool(true)).unwrap();
    assert!(r.effects.contains(&Effect::AccessGranted { device: "speaker".into() }));
    let wi = o.whatif(&"forbid open(X,sl) when net_device(X)".parse().unwrap()).unwrap();
    assert!(!wi.breaks.is_empty());

    o.ingest(connect(2, 20, "d1")).unwrap();
    let iv = pending_key(&o, "device_trust:d1");
    o.answer(&iv, Answer::Bool(false)).unwrap();
    let plan = o.plans().last().unwrap().clone();
    let general = plan.candidates.iter().find(|c| c.constraint == "forbid open(X,sl) when net_device(X)").unwrap();
    assert!(!general.breaks.is_empty());
    assert_eq!(plan.short_term.unwrap().text(), "forbid open(X,sl) when net_device(X) & X = d1");
}

#[test]
fn schema_mismatch_and_expiry() {
    let mut o = orchestrator(vec![]);
    o.ingest(connect(1, 0, "d1")).unwrap();
    let iv = pending_key(&o, "device_trust:d1");
    let err = o.answer(&iv, Answer::Int(3)).unwrap_err();
    assert!(matches!(err, OrchestratorError::Answer(AnswerError::SchemaMismatch { .. })));
    let fresh = o.tick(7 * 24 * 60).unwrap();
    assert_eq!(fresh.len(), 1);
    assert_eq!(o.intervention(&iv).unwrap().state, InterventionState::Expired);
    let err = o.answer(&iv, Answer::Bool(true)).unwrap_err();
    assert!(matches!(err, OrchestratorError::Answer(AnswerError::Expired(_))));
    assert_eq!(o.intervention(&fresh[0]).unwrap().key, "device_trust:d1");
    o.answer(&fresh[0], Answer::Bool(true)).unwrap();
    assert!(o.is_quiescent());
}

#[test]
fn frequent_devices_suspect_the_password_assumption() {
    let mut o = orchestrator(vec![phone()]);
    for (i, d) in ["d2", "d3", "d4"].iter().enumerate() {
        o.ingest(connect(i as u64 + 1, 60 * (i as u64 + 1), d)).unwrap();
    }
    let rec = o.anomalies().find(|r| r.anomaly.kind.to_string() == "frequent_new_devices").unwrap().clone();
    let Some(AnalysisOutcome::AssumptionSuspect { assumption, trace, horizon }) = &rec.outcome else { panic!("{:?}", rec.outcome) };
    assert_eq!(assumption, "password_strength");
    assert_eq!(*horizon, 5);
    let r = trace.render();
    assert!(r.starts_with("connect(d2)@1") && r.ends_with("enter(outsider,home)@5"), "{r}");
    let plan = o.plan(rec.plan.as_ref().unwrap()).unwrap().clone();
    assert_eq!(plan.short_term.as_ref().unwrap().text(), "forbid connect(X) when !trusted(X)");
    assert_eq!(plan.short_term.as_ref().unwrap().sustainability, Sustainability::ShortTerm);
    assert!(matches!(plan.root_cause, Some(RootCause::AssumptionEvolution { sustainability: Sustainability::RootCause, .. })));
    let dd = pending_key(&o, "default_deny_new_devices");
    let ev = pending_key(&o, "evolve:password_strength:min_password_chars");
    assert!(o.intervention(&ev).unwrap().missing_explanation().is_empty());
    o.answer(&dd, Answer::Bool(true)).unwrap();
    let r = o.answer(&ev, Answer::Int(12)).unwrap();
    assert!(r.effects.iter().any(|e| matches!(e, Effect::PasswordPolicy { min_chars: 12, .. })));
    assert_eq!(o.history().records().len(), 1);
}

#[test]
fn latency_spike_suspects_trusted_devices_and_finds_the_cve() {
    let mut setup = Setup::smart_home();
    let mut speaker = phone();
    speaker.id = "speaker".into();
    setup.devices = vec![phone(), speaker];
    let mut o = Orchestrator::new(Config::default(), setup);
    for i in 0..12u64 {
        let l = 10.0 + (i % 3) as f64;
        o.ingest(Event::new(i + 1, i, EventKind::LatencySample, "sl").with_attr("latency_ms", l)).unwrap();
    }
    let an = o.ingest(Event::new(100, 30, EventKind::LatencySample, "sl").with_attr("latency_ms", 90.0)).unwrap();
    assert_eq!(an.len(), 1);
    let rec = o.anomaly(&an[0]).unwrap().clone();
    let Some(AnalysisOutcome::AssumptionSuspect { assumption, trace, .. }) = &rec.outcome else { panic!("{:?}", rec.outcome) };
    assert_eq!(assumption, "trusted_devices");
    assert!(trace.render().contains("open(phone,sl)"));
    let plan = o.plan(rec.plan.as_ref().unwrap()).unwrap().clone();
    assert_eq!(plan.short_term.as_ref().unwrap().text(), "forbid open(X,sl) when net_device(X)");
    assert!(matches!(&plan.root_cause, Some(RootCause::Patch { record, sustainability: Sustainability::RootCause }) if record.cve_id == "CVE-2022-32509"));
    let ack = pending_key(&o, "patch_ack:CVE-2022-32509");
    assert!(o.intervention(&ack).unwrap().missing_explanation().is_empty());
    let ok = pending_key(&o, &format!("approve_control:{}", plan.short_term.as_ref().unwrap().control_id()));
    o.answer(&ok, Answer::Bool(true)).unwrap();
    o.answer(&ack, Answer::Bool(true)).unwrap();
    assert!(!o.model().assumption("trusted_devices").unwrap().active);
    assert!(o.is_quiescent());
    let decisions = o.stream().iter().filter(|m| matches!(m.payload, StreamPayload::Decision(_))).count();
    assert_eq!(decisions, o.audit().len());
}

#[test]
fn suspended_anomaly_resumes_exactly_once() {
    let mut o = orchestrator(vec![phone()]);
    let an = o.ingest(connect(1, 60, "d1")).unwrap();
    let rec = o.anomaly(&an[0]).unwrap();
    assert_eq!(rec.analyses, 1);
    assert!(matches!(rec.outcome, Some(AnalysisOutcome::NeedFact { .. })));
    let iv = pending_key(&o, "device_trust:d1");
    o.answer(&iv, Answer::Bool(false)).unwrap();
    let plans = o.plans().len();
    let audit = o.audit().len();
    assert_eq!(o.anomaly(&an[0]).unwrap().analyses, 2);
    assert!(o.answer(&iv, Answer::Bool(false)).is_err());
    assert!(o.answer(&iv, Answer::Bool(true)).is_err());
    assert_eq!(o.anomaly(&an[0]).unwrap().analyses, 2);
    assert_eq!(o.plans().len(), plans);
    assert_eq!(o.audit().len(), audit);
    let resumed = o
        .audit()
        .iter()
        .filter(|r| r.anomaly == an[0] && ["analyse", "plan", "merged"].contains(&r.step.as_str()))
        .count();
    assert_eq!(resumed, 2);
}

#[test]
fn whatif_leaves_state_untouched() {
    let mut o = orchestrator(vec![phone()]);
    o.ingest(connect(1, 60, "d1")).unwrap();
    let before = o.state_hash();
    for c in ["forbid open(X,sl) when net_device(X)", "forbid close(sl)", "forbid connect(X) when unknown_trust(X)"] {
        o.whatif(&c.parse().unwrap()).unwrap();
    }
    assert_eq!(o.state_hash(), before);
}

#[test]
fn every_decision_is_streamed_once() {
    let mut o = orchestrator(vec![phone()]);
    o.ingest(connect(1, 60, "d1")).unwrap();
    let iv = pending_key(&o, "device_trust:d1");
    o.answer(&iv, Answer::Bool(false)).unwrap();
    let streamed: Vec<u64> = o
        .stream()
        .iter()
        .filter_map(|m| match &m.payload {
            StreamPayload::Decision(r) => Some(r.seq),
            _ => None,
        })
        .collect();
    let audited: Vec<u64> = o.audit().iter().map(|r| r.seq).collect();
    assert_eq!(streamed, audited);
    assert!(o.stream().windows(2).all(|w| w[0].seq < w[1].seq));
}
