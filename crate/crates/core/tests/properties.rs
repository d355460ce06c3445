use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::sample::{select, subsequence};

use sas_core::domain::Trust;
use sas_core::expr::ParamValue;
use sas_core::fixtures;
use sas_core::goal_model::{GoalModel, Origin, SecurityControl, Sustainability, VulnAnnotation};
use sas_core::search::{RuleSource, SearchProblem, TraceFilter};
use sas_core::Fluent;

const CONSTRAINTS: [&str; 5] = [
    "forbid open(X,sl) when net_device(X) & X = d1",
    "forbid connect(X) when unknown_trust(X)",
    "forbid open(X,sl) when untrusted(X)",
    "require close(sl) after exit(tenant,home)",
    "forbid enter(outsider,home) when locked(sl)",
];

const ASSUMPTIONS: [&str; 5] = [
    "trusted_devices",
    "lock_tamper_proof",
    "outsider_entry",
    "tenant_locks",
    "password_strength",
];

const TAGS: [&str; 8] = ["sl", "door", "wifi", "tenant", "outsider", "d1", "phone", "speaker"];

#[derive(Debug, Clone)]
struct Edit {
    min_chars: i64,
    inactive: Vec<&'static str>,
    controls: Vec<(usize, String, bool, bool)>,
    vuln: Option<(String, bool)>,
}

fn edits() -> impl Strategy<Value = Edit> {
    (
        1i64..64,
        subsequence(ASSUMPTIONS.to_vec(), 0..=5),
        prop::collection::vec((0..CONSTRAINTS.len(), "[a-zA-Z \"=#]{0,24}", any::<bool>(), any::<bool>()), 0..4),
        prop::option::of(("[a-z ]{1,20}", any::<bool>())),
    )
        .prop_map(|(min_chars, inactive, controls, vuln)| Edit {
            min_chars,
            inactive,
            controls,
            vuln,
        })
}

fn apply(edit: &Edit) -> GoalModel {
    let mut m = fixtures::smart_home_goals();
    let params = BTreeMap::from([("min_password_chars".to_string(), ParamValue::Int(edit.min_chars))]);
    m = m.evolve_assumption("password_strength", &params).unwrap();
    for a in &edit.inactive {
        let off = BTreeMap::from([("active".to_string(), ParamValue::Bool(false))]);
        m = m.evolve_assumption(a, &off).unwrap();
    }
    for (i, (c, rationale, learned, enacted)) in edit.controls.iter().enumerate() {
        m = m
            .with_control(SecurityControl {
                id: format!("extra_{i}"),
                constraint: CONSTRAINTS[*c].parse().unwrap(),
                origin: if *learned { Origin::Learned } else { Origin::Designed },
                sustainability: if *learned { Sustainability::ShortTerm } else { Sustainability::Unknown },
                enacted: *enacted,
                rationale: rationale.trim().to_string(),
                learned_from: if *learned { vec!["tr-000000000000".into()] } else { vec![] },
                tags: vec!["sl".into()],
            })
            .unwrap();
    }
    if let Some((fix, present)) = &edit.vuln {
        m = m.with_vulnerability(VulnAnnotation {
            cve: "CVE-2022-32509".into(),
            device: "sl".into(),
            fix: present.then(|| fix.clone()),
            status: "disclosed".into(),
        });
    }
    m
}

fn untrusted_problem(h: u32) -> SearchProblem {
    let mut d = fixtures::smart_home_domain();
    d.add_device("d1", Trust::Untrusted, BTreeMap::new());
    let init = d.initial_state().with_fact("connected(d1)".parse().unwrap());
    SearchProblem::from_model(d, &fixtures::smart_home_goals(), init).unwrap().with_horizon(h)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn goal_model_round_trips(edit in edits()) {
        let m = apply(&edit);
        m.validate().unwrap();
        let text = m.to_string();
        let back = GoalModel::parse(&text).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.to_string(), text);
    }

    #[test]
    fn affected_parts_is_monotone(small in subsequence(TAGS.to_vec(), 0..=8), more in subsequence(TAGS.to_vec(), 0..=8)) {
        let m = fixtures::smart_home_goals();
        let all: BTreeSet<String> = m
            .nodes
            .keys()
            .chain(m.assumptions.keys())
            .chain(m.controls.keys())
            .cloned()
            .collect();
        let a = m.affected_parts(small.iter().copied());
        let b = m.affected_parts(small.iter().chain(more.iter()).copied());
        prop_assert!(a.is_subset(&b));
        for part in &b {
            let id = match part {
                sas_core::goal_model::ModelPart::Goal(id)
                | sas_core::goal_model::ModelPart::Assumption(id)
                | sas_core::goal_model::ModelPart::Control(id) => id,
            };
            prop_assert!(all.contains(id));
        }
    }

    #[test]
    fn steps_preserve_unmentioned_facts(picks in prop::collection::vec(any::<prop::sample::Index>(), 1..12)) {
        let mut d = fixtures::smart_home_domain();
        d.add_device("d1", Trust::Untrusted, BTreeMap::new());
        d.add_device("speaker", Trust::Trusted, BTreeMap::new());
        let mut s = d.initial_state().with_fact("connected(d1)".parse().unwrap());
        for pick in picks {
            let applicable: Vec<_> =
                d.ground_actions().iter().filter(|a| d.applicable(&s, a).unwrap()).cloned().collect();
            if applicable.is_empty() {
                break;
            }
            let a = pick.get(&applicable);
            let schema = d.schema_for(a).unwrap();
            let touched: BTreeSet<&str> =
                schema.add.iter().chain(schema.del.iter()).map(|p| p.name.as_str()).collect();
            let next = d.step(&s, a).unwrap();
            let kept = |st: &sas_core::State| -> BTreeSet<Fluent> {
                st.facts.iter().filter(|f| !touched.contains(f.name.as_str())).cloned().collect()
            };
            prop_assert_eq!(kept(&s), kept(&next));
            prop_assert_eq!(next.time, s.time + 1);
            d.check_state(&next).unwrap();
            prop_assert!(!(next.contains(&"locked(sl)".parse().unwrap()) && next.contains(&"unlocked(sl)".parse().unwrap())));
            s = next;
        }
    }

    #[test]
    fn search_agrees_with_enumeration(
        h in 1u32..=5,
        dropped in subsequence(ASSUMPTIONS.to_vec(), 0..=3),
        extra in prop::option::of(select(CONSTRAINTS.to_vec())),
    ) {
        let mut p = untrusted_problem(h);
        for a in &dropped {
            p = p.without(&RuleSource::Assumption(a.to_string()));
        }
        if let Some(c) = extra {
            p = p.with_rule(RuleSource::Candidate, c.parse().unwrap());
        }
        let violating = p.enumerate_traces(TraceFilter::Violating).unwrap();
        match p.find_violating_trace().unwrap() {
            Some(t) => {
                prop_assert!(violating.iter().any(|v| v.actions == t.actions));
                prop_assert_eq!(p.check_trace(&t.ground_actions()).unwrap().states, t.states);
            }
            None => prop_assert!(violating.is_empty()),
        }
    }
}
