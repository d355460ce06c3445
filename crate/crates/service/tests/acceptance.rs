//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on failure.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use sas_core::config::Config;
use sas_core::domain::Trust;
use sas_core::expr::ParamValue;
use sas_core::fixtures::{self, UNTRUSTED_TRACE_GOLDEN, PROBLEMS};
use sas_core::goal_model::{GoalModel, Role, Sustainability};
use sas_core::learner::{default_templates, learn_control};
use sas_core::monitor::{AnomalyKind, Event, EventKind, Monitor, MonitorConfig};
use sas_core::orchestrator::{
    AnalysisOutcome, Answer, AnomalyStatus, DeviceSpec, Orchestrator, RootCause, Setup,
};
use sas_core::problem::ProblemSpec;
use sas_core::search::{RuleSet, RuleSource, SearchProblem, TraceFilter};
use sas_core::sim::{bundled_scenario, Simulation, SCENARIOS};
use sas_core::Action;

type Check = Result<(), String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn act(s: &str) -> Action {
    s.parse().unwrap()
}

fn untrusted_problem() -> SearchProblem {
    ProblemSpec::from_json(PROBLEMS[0].1).unwrap().build().unwrap()
}

fn within(start: Instant, limit: Duration) -> Check {
    let took = start.elapsed();
    ensure!(took < limit, "took {took:?}, limit {limit:?}");
    Ok(())
}

fn untrusted_trace() -> Check {
    let start = Instant::now();
    let t = untrusted_problem().find_violating_trace().map_err(|e| e.to_string())?.ok_or("no trace")?;
    within(start, Duration::from_secs(1))?;
    let json = serde_json::to_string(&t.explain()).unwrap();
    ensure!(json == UNTRUSTED_TRACE_GOLDEN.trim_end(), "golden mismatch: {json}");
    ensure!(t.violated_at == Some(4), "violated at {:?}", t.violated_at);
    ensure!(t.states[4].contains(&"in(outsider,home)".parse().unwrap()), "no in(outsider,home) at 4");
    Ok(())
}

fn learned_rule() -> Check {
    let start = Instant::now();
    let p = untrusted_problem();
    let c = learn_control(&p, &[], &default_templates()).map_err(|e| e.to_string())?;
    let guarded = p.clone().with_rule(RuleSource::Candidate, c.constraint.clone());
    ensure!(guarded.find_violating_trace().unwrap().is_none(), "re-search still finds a trace");
    let mut oracle = BTreeSet::new();
    for t in p.enumerate_traces(TraceFilter::All).unwrap() {
        for s in t.states.iter().filter(|s| s.time < p.horizon) {
            if p.permits(s, &act("open(d1,sl)")).unwrap() {
                oracle.insert((s.time + 1, act("open(d1,sl)")));
            }
        }
    }
    let mut extra = RuleSet::new();
    extra.push(RuleSource::Candidate, c.constraint.clone(), BTreeMap::new());
    let forbidden = p.forbidden_actions(&extra).unwrap();
    ensure!(forbidden == oracle, "{} forbids {forbidden:?}, oracle {oracle:?}", c.text());
    within(start, Duration::from_secs(5))
}

fn oracle_equivalence() -> Check {
    let start = Instant::now();
    for (name, src) in PROBLEMS {
        let spec = ProblemSpec::from_json(src).map_err(|e| e.to_string())?;
        for h in 1..=5 {
            let p = spec.build().unwrap().with_horizon(h);
            let set = p.enumerate_traces(TraceFilter::Violating).unwrap();
            match p.find_violating_trace().unwrap() {
                Some(t) => ensure!(set.iter().any(|v| v.actions == t.actions), "{name}@{h}: trace not in set"),
                None => ensure!(set.is_empty(), "{name}@{h}: search missed {} traces", set.len()),
            }
        }
    }
    within(start, Duration::from_secs(60))
}

fn headless(name: &str) -> Result<Simulation, String> {
    let scenario = bundled_scenario(name).map_err(|e| e.to_string())?;
    let policy = scenario.policy.clone();
    let mut sim = Simulation::new(scenario, Config::default(), Some(policy), None).map_err(|e| e.to_string())?;
    sim.run_to_end().map_err(|e| e.to_string())?;
    Ok(sim)
}

fn trusted_speaker() -> Check {
    let sim = headless("trusted_speaker")?;
    let o = sim.orchestrator();
    let req = o
        .interventions()
        .iter()
        .find(|r| r.key == "device_trust:speaker")
        .ok_or("no trust question for the speaker")?;
    ensure!(req.role == Role::Tenant, "asked {}", req.role);
    let e = &req.explanation;
    ensure!(!e.observability.is_empty(), "empty observability");
    ensure!(!e.transparency.is_empty(), "empty transparency");
    ensure!(e.feedforward.as_deref().is_some_and(|f| !f.is_empty()), "no feedforward");
    ensure!(req.answer == Some(Answer::Bool(true)), "speaker answer {:?}", req.answer);

    let general = "forbid open(X,sl) when net_device(X)";
    let rejected = o
        .plans()
        .iter()
        .flat_map(|p| &p.candidates)
        .any(|c| c.constraint == general && !c.breaks.is_empty());
    ensure!(rejected, "general forbid was not rejected for breaking a positive trace");
    ensure!(o.model().enacted_controls().all(|c| c.constraint.to_string() != general), "general forbid enacted");
    let w = o.whatif(&general.parse().unwrap()).map_err(|e| e.to_string())?;
    ensure!(!w.breaks.is_empty(), "whatif shows no breaks");

    let mut controls = RuleSet::new();
    for c in o.model().enacted_controls() {
        controls.push(RuleSource::Control(c.id.clone()), c.constraint.clone(), BTreeMap::new());
    }
    let d = o.domain();
    let mut s = o.analysis_state();
    for a in ["exit(tenant,home)", "close(sl)"] {
        s = d.step(&s, &act(a)).map_err(|e| e.to_string())?;
    }
    ensure!(d.applicable(&s, &act("open(speaker,sl)")).unwrap(), "open(speaker,sl) inapplicable");
    ensure!(
        controls.permits(d, &s, &act("open(speaker,sl)")).map_err(|e| e.to_string())?,
        "an enacted control blocks open(speaker,sl)"
    );
    ensure!(
        !controls.permits(d, &s, &act("open(d1,sl)")).map_err(|e| e.to_string())?,
        "d1 is not blocked"
    );
    Ok(())
}

fn frequent(events: &[Event]) -> usize {
    let mut m = Monitor::new(MonitorConfig::default(), ["phone".to_string()]);
    events
        .iter()
        .flat_map(|e| m.ingest(e).unwrap())
        .filter(|a| a.kind == AnomalyKind::FrequentNewDevices)
        .count()
}

fn frequent_devices() -> Check {
    let connect = |id: u64, t: u64, d: &str| Event::new(id, t, EventKind::DeviceConnected, d);
    let two = [connect(1, 0, "d2"), connect(2, 300, "d3")];
    let three = [connect(1, 0, "d2"), connect(2, 300, "d3"), connect(3, 600, "d4")];
    ensure!(frequent(&two) == 0, "fired with two new devices");
    ensure!(frequent(&three) == 1, "three new devices gave {}", frequent(&three));

    let sim = headless("frequent_devices")?;
    let o = sim.orchestrator();
    let fired: Vec<_> = o.anomalies().filter(|a| a.anomaly.kind == AnomalyKind::FrequentNewDevices).collect();
    ensure!(fired.len() == 1, "{} frequency anomalies", fired.len());
    let devices: Vec<String> = match &fired[0].anomaly.detail {
        sas_core::monitor::AnomalyDetail::Frequency { devices, .. } => devices.clone(),
        other => return Err(format!("detail {other:?}")),
    };
    ensure!(devices == ["d2", "d3", "d4"], "fired on {devices:?}");
    let plan = o.plan(fired[0].plan.as_deref().ok_or("no plan")?).ok_or("plan missing")?;
    ensure!(
        matches!(&plan.root_cause, Some(RootCause::AssumptionEvolution { assumption, param, .. })
            if assumption == "password_strength" && param == "min_password_chars"),
        "root cause {:?}",
        plan.root_cause
    );
    let req = o
        .interventions()
        .iter()
        .find(|r| r.key == "evolve:password_strength:min_password_chars")
        .ok_or("no evolution question")?;
    ensure!(req.role == Role::Engineer, "evolution asked of {}", req.role);
    let Some(Answer::Int(n)) = req.answer else { return Err(format!("answer {:?}", req.answer)) };
    let now = o.model().assumption("password_strength").unwrap().params.get("min_password_chars").cloned();
    ensure!(now == Some(ParamValue::Int(n)), "param is {now:?}, answer {n}");
    let rec = o.history().records().iter().find(|r| r.assumption == "password_strength");
    ensure!(
        rec.is_some_and(|r| r.new.get("min_password_chars") == Some(&ParamValue::Int(n)) && r.approver == Role::Engineer),
        "no evolution record"
    );
    Ok(())
}

fn mitm() -> Check {
    let sim = headless("mitm_cve")?;
    let o = sim.orchestrator();
    let spikes: Vec<_> = o.anomalies().filter(|a| a.anomaly.kind == AnomalyKind::LatencySpike).collect();
    ensure!(spikes.len() == 1, "{} latency spikes", spikes.len());
    let rec = spikes[0];
    let Some(AnalysisOutcome::AssumptionSuspect { assumption, trace, .. }) = &rec.outcome else {
        return Err(format!("outcome {:?}", rec.outcome));
    };
    ensure!(assumption == "trusted_devices", "suspected {assumption}");
    let trusted: BTreeSet<&str> = o
        .domain()
        .agents()
        .values()
        .filter(|a| a.trust == Trust::Trusted)
        .map(|a| a.id.as_str())
        .collect();
    let opener = trace
        .actions
        .iter()
        .find(|s| s.name == "open" && s.args.len() == 2)
        .and_then(|s| s.args[0].as_sym())
        .ok_or("no device opens the lock in the trace")?;
    ensure!(trusted.contains(opener), "{opener} is not trusted");
    ensure!(trace.violated_at.is_some(), "trace does not violate");
    ensure!(!o.model().assumption("trusted_devices").unwrap().active, "assumption still active");

    let plan = o.plan(rec.plan.as_deref().ok_or("no plan")?).ok_or("plan missing")?;
    let st = plan.short_term.as_ref().ok_or("no short-term control")?;
    ensure!(st.text() == "forbid open(X,sl) when net_device(X)", "short-term {}", st.text());
    ensure!(st.sustainability == Sustainability::ShortTerm, "classified {:?}", st.sustainability);
    let Some(RootCause::Patch { record, sustainability }) = &plan.root_cause else {
        return Err(format!("root cause {:?}", plan.root_cause));
    };
    ensure!(record.cve_id == "CVE-2022-32509", "patch for {}", record.cve_id);
    ensure!(*sustainability == Sustainability::RootCause, "patch classified {sustainability:?}");
    let steps: Vec<&str> = o
        .audit()
        .iter()
        .filter(|r| r.anomaly == rec.anomaly.id)
        .map(|r| r.step.as_str())
        .collect();
    for s in ["plan", "answer", "execute"] {
        ensure!(steps.contains(&s), "audit chain {steps:?} lacks {s}");
    }
    ensure!(rec.status == AnomalyStatus::Resolved, "status {:?}", rec.status);
    Ok(())
}

fn determinism() -> Check {
    for name in SCENARIOS {
        let a = headless(name)?.report();
        let b = headless(name)?.report();
        ensure!(a.passed, "{name}: checklist failed");
        ensure!(a.to_json() == b.to_json(), "{name}: reports differ");
    }
    Ok(())
}

fn invariants() -> Check {
    let m = fixtures::smart_home_goals();
    let back = GoalModel::parse(&m.to_string()).map_err(|e| e.to_string())?;
    ensure!(back == m, "goal model round trip");

    let p = untrusted_problem().with_horizon(4);
    for t in p.enumerate_traces(TraceFilter::All).unwrap() {
        for (w, step) in t.states.windows(2).zip(&t.actions) {
            let schema = p.domain.schema_for(&step.action()).unwrap();
            let touched: BTreeSet<&str> = schema.add.iter().chain(&schema.del).map(|p| p.name.as_str()).collect();
            let keep = |s: &sas_core::State| -> Vec<_> { s.facts.iter().filter(|f| !touched.contains(f.name.as_str())).cloned().collect() };
            ensure!(keep(&w[0]) == keep(&w[1]), "frame property broken by {}", step.action());
        }
    }

    let mut mon = Monitor::new(MonitorConfig::default(), []);
    let e = Event::new(1, 0, EventKind::DeviceConnected, "d1");
    ensure!(mon.ingest(&e).unwrap().len() == 1 && mon.ingest(&e).unwrap().is_empty(), "duplicate anomaly");

    let mut setup = Setup::smart_home();
    setup.devices = vec![DeviceSpec {
        id: "phone".into(),
        trust: Trust::Trusted,
        attrs: Default::default(),
        connected: true,
    }];
    let mut o = Orchestrator::new(Config::default(), setup);
    let an = o.ingest(Event::new(1, 60, EventKind::DeviceConnected, "d1")).unwrap();
    let iv = o.pending_interventions().next().ok_or("no trust question")?.id.clone();
    o.answer(&iv, Answer::Bool(false)).unwrap();
    let audit = o.audit().len();
    ensure!(o.answer(&iv, Answer::Bool(false)).is_err(), "second answer accepted");
    ensure!(o.audit().len() == audit, "second answer changed the audit");
    ensure!(o.anomaly(&an[0]).unwrap().analyses == 2, "resumed analysis ran {} times", o.anomaly(&an[0]).unwrap().analyses);

    whatif_purity()
}

fn whatif_purity() -> Check {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    rt.block_on(async {
        let app = sas_service::router(sas_service::AppState::open(Default::default()).map_err(|e| e.to_string())?);
        let call = |method: &str, uri: &str, body: Option<Value>| {
            let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
            let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
            let app = app.clone();
            async move {
                let resp = app.oneshot(req).await.unwrap();
                let status = resp.status();
                let bytes = resp.into_body().collect().await.unwrap().to_bytes();
                (status, serde_json::from_slice::<Value>(&bytes).unwrap_or(Value::Null))
            }
        };
        call("POST", "/scenario/start", Some(json!({"name": "trusted_speaker"}))).await;
        call("POST", "/scenario/advance", Some(json!({"minutes": 100}))).await;
        let before = call("GET", "/state", None).await.1;
        let (status, w) = call("POST", "/whatif", Some(json!({"constraint": "forbid open(X,sl) when net_device(X)"}))).await;
        ensure!(status.is_success(), "whatif returned {status}: {w}");
        let after = call("GET", "/state", None).await.1;
        ensure!(before["state_hash"].is_string() && before == after, "state changed across /whatif");
        Ok(())
    })
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("untrusted-device trace reproduction", untrusted_trace),
        ("learned rule reproduction", learned_rule),
        ("oracle equivalence", oracle_equivalence),
        ("trusted speaker scenario", trusted_speaker),
        ("frequent devices scenario", frequent_devices),
        ("mitm scenario", mitm),
        ("determinism", determinism),
        ("invariant suites", invariants),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let ms = start.elapsed().as_millis();
        match outcome {
            Ok(()) => println!("PASS {name} ({ms} ms)"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({ms} ms): {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
