//! Learning security controls from violating and satisfying traces.
//!
//! Candidates are template instantiations over the actions of a violating
//! trace. Each is scored by replaying the bounded violating traces and the
//! positive suite under it; the best-ranked one that removes every
//! violation without breaking a positive trace is selected.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{ActionDomain, ParamType};
use crate::expr::{Constraint, Guard, Operand, PTerm, Pattern};
use crate::goal_model::{GoalModel, ModelPart, Origin, SecurityControl, Sustainability};
use crate::search::{RuleSource, SearchError, SearchProblem, Trace, TraceFilter, Verdict};
use crate::term::{Action, Term};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearnError {
    #[error("trace {0} does not violate the requirement")]
    NotViolating(String),
    #[error("no template applies to any action of trace {0}")]
    NoTemplateMatch(String),
    #[error("the problem has no violating trace within the horizon")]
    NoViolation,
    #[error("no candidate removes every violation without breaking a positive trace")]
    InterventionRequired { candidates: Vec<ControlCandidate> },
    #[error("positive trace {0} is not satisfying")]
    PositiveViolates(String),
    #[error(transparent)]
    Search(#[from] SearchError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    /// `forbid cmd(X,..) when <kind>(X) & X = <subject>`
    CommandBySubject,
    /// `forbid cmd(X,..) when <kind>(X)`
    CommandByAgentKind,
    /// `forbid cmd(X,..) when trusted(X)` or `... when !trusted(X)`
    CommandByTrust,
    /// `forbid connect(X) when !trusted(X)`
    ConnectByDefault,
    /// Forbids exactly the ground action.
    ExactAction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConstraintTemplate {
    pub kind: TemplateKind,
    /// Adds an occurrence-time variable bounded to `0..horizon`.
    pub timed: bool,
}

impl ConstraintTemplate {
    pub fn name(&self) -> String {
        let base = match self.kind {
            TemplateKind::CommandBySubject => "forbid-command-by-subject",
            TemplateKind::CommandByAgentKind => "forbid-command-by-agent-kind",
            TemplateKind::CommandByTrust => "forbid-command-by-trust",
            TemplateKind::ConnectByDefault => "forbid-connect-by-default",
            TemplateKind::ExactAction => "forbid-exact-action",
        };
        if self.timed {
            format!("{base}/timed")
        } else {
            base.to_string()
        }
    }

    /// Instantiates the template for `action`; `None` if it does not apply.
    /// Returns the constraint and its specificity (number of guards on the
    /// subject; a time range does not count).
    pub fn instantiate(&self, action: &Action, domain: &ActionDomain, horizon: u32) -> Option<(Constraint, u32)> {
        let schema = domain.schema_for(action).ok()?;
        let subject_is_device = schema.params.first().is_some_and(|(_, t)| *t == ParamType::Device);
        let x = || PTerm::Var("X".into());
        let subject = action.args.first()?.as_sym()?;
        let agent = domain.agent(subject);
        let command_pattern = || {
            let mut args = vec![x()];
            args.extend(action.args[1..].iter().cloned().map(PTerm::Const));
            Pattern::new(&action.name, args)
        };
        let (pattern, guards, specificity) = match self.kind {
            TemplateKind::CommandBySubject if subject_is_device => {
                let kind = agent?.kind.as_str();
                (
                    command_pattern(),
                    vec![Guard::fact(kind, vec![x()]), Guard::var_eq("X", Term::sym(subject))],
                    2,
                )
            }
            TemplateKind::CommandByAgentKind if subject_is_device => {
                let kind = agent?.kind.as_str();
                (command_pattern(), vec![Guard::fact(kind, vec![x()])], 1)
            }
            TemplateKind::CommandByTrust if subject_is_device => {
                let trusted = Guard::fact("trusted", vec![x()]);
                let g = if agent?.trust == crate::domain::Trust::Trusted {
                    trusted
                } else {
                    Guard::not(trusted)
                };
                (command_pattern(), vec![g], 1)
            }
            TemplateKind::ConnectByDefault if action.name == "connect" && subject_is_device => (
                Pattern::new("connect", vec![x()]),
                vec![Guard::not(Guard::fact("trusted", vec![x()]))],
                1,
            ),
            TemplateKind::ExactAction => {
                let n = action.args.len() as u32;
                (Pattern::exact(action), Vec::new(), n)
            }
            _ => return None,
        };
        let mut guards = guards;
        let time = if self.timed {
            guards.push(Guard::Range {
                value: Operand::Term(PTerm::Var("T".into())),
                lo: 0,
                hi: i64::from(horizon),
            });
            Some("T".to_string())
        } else {
            None
        };
        Some((
            Constraint::Forbid {
                action: pattern,
                time,
                guard: Guard::and(guards),
            },
            specificity,
        ))
    }
}

/// The shipped template library: four kinds, each with and without a time
/// range.
pub fn default_templates() -> Vec<ConstraintTemplate> {
    let kinds = [
        TemplateKind::CommandBySubject,
        TemplateKind::CommandByAgentKind,
        TemplateKind::CommandByTrust,
        TemplateKind::ConnectByDefault,
    ];
    kinds
        .into_iter()
        .flat_map(|kind| [false, true].map(|timed| ConstraintTemplate { kind, timed }))
        .collect()
}

/// The default-deny rule for new network connections.
pub fn default_deny_connections() -> Constraint {
    Constraint::forbid(
        Pattern::new("connect", vec![PTerm::Var("X".into())]),
        Guard::not(Guard::fact("trusted", vec![PTerm::Var("X".into())])),
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlCandidate {
    pub constraint: Constraint,
    pub template: String,
    pub specificity: u32,
    pub eliminates: BTreeSet<String>,
    pub breaks: BTreeSet<String>,
    pub sustainability: Sustainability,
    /// The system has an actuator for the forbidden action.
    pub enactable: bool,
    /// Enacting it restricts something the tenant notices.
    pub visible: bool,
    pub learned_from: Vec<String>,
    /// Existing control this candidate replaces, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modifies: Option<String>,
    pub tags: Vec<String>,
    /// Whether `eliminates`/`breaks` have been computed.
    pub evaluated: bool,
}

impl ControlCandidate {
    pub fn new(constraint: Constraint, template: impl Into<String>, specificity: u32) -> Self {
        ControlCandidate {
            constraint,
            template: template.into(),
            specificity,
            eliminates: BTreeSet::new(),
            breaks: BTreeSet::new(),
            sustainability: Sustainability::Unknown,
            enactable: true,
            visible: false,
            learned_from: Vec::new(),
            modifies: None,
            tags: Vec::new(),
            evaluated: false,
        }
    }

    pub fn text(&self) -> String {
        self.constraint.to_string()
    }

    /// Stable id derived from the constraint text.
    pub fn control_id(&self) -> String {
        let digest = Sha256::digest(self.text().as_bytes());
        let mut out = String::from("ctl-");
        for b in digest.iter().take(4) {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    pub fn to_control(&self, rationale: &str, enacted: bool) -> SecurityControl {
        SecurityControl {
            id: self.control_id(),
            constraint: self.constraint.clone(),
            origin: if self.learned_from.is_empty() {
                Origin::HumanEdited
            } else {
                Origin::Learned
            },
            sustainability: self.sustainability,
            enacted,
            rationale: rationale.to_string(),
            learned_from: self.learned_from.clone(),
            tags: self.tags.clone(),
        }
    }
}

/// Ranking: no broken positives, most eliminated violations, most specific,
/// then constraint text ascending.
pub fn rank(a: &ControlCandidate, b: &ControlCandidate) -> Ordering {
    b.breaks
        .is_empty()
        .cmp(&a.breaks.is_empty())
        .then(b.eliminates.len().cmp(&a.eliminates.len()))
        .then(b.specificity.cmp(&a.specificity))
        .then_with(|| a.text().cmp(&b.text()))
}

fn action_tags(action: &Action) -> Vec<String> {
    let mut tags: Vec<String> = action.args.iter().filter_map(Term::as_sym).map(str::to_string).collect();
    tags.sort();
    tags.dedup();
    tags
}

/// Instantiates every template over the actions up to the violation.
pub fn generate_candidates(
    violating: &Trace,
    templates: &[ConstraintTemplate],
    domain: &ActionDomain,
    horizon: u32,
) -> Result<Vec<ControlCandidate>, LearnError> {
    if violating.verdict != Verdict::Violating {
        return Err(LearnError::NotViolating(violating.id.clone()));
    }
    let upto = violating.violated_at.unwrap_or(u32::MAX);
    let mut out: Vec<ControlCandidate> = Vec::new();
    let mut seen = BTreeSet::new();
    for step in violating.actions.iter().filter(|s| s.t <= upto) {
        let action = step.action();
        let Ok(schema) = domain.schema_for(&action) else { continue };
        for tpl in templates {
            let Some((constraint, specificity)) = tpl.instantiate(&action, domain, horizon) else {
                continue;
            };
            if !seen.insert(constraint.to_string()) {
                continue;
            }
            let mut c = ControlCandidate::new(constraint, tpl.name(), specificity);
            c.enactable = schema.controllable;
            c.visible = schema.visible;
            c.learned_from = vec![violating.id.clone()];
            c.tags = match tpl.kind {
                TemplateKind::CommandBySubject | TemplateKind::ExactAction => action_tags(&action),
                _ => action_tags(&action)
                    .into_iter()
                    .filter(|t| Some(t.as_str()) != action.args[0].as_sym())
                    .collect(),
            };
            if c.tags.is_empty() {
                c.tags = action_tags(&action);
            }
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(LearnError::NoTemplateMatch(violating.id.clone()));
    }
    out.sort_by(|a, b| b.specificity.cmp(&a.specificity).then_with(|| a.text().cmp(&b.text())));
    Ok(out)
}

fn with_candidate(p: &SearchProblem, c: &ControlCandidate) -> SearchProblem {
    p.clone().with_rule(RuleSource::Candidate, c.constraint.clone())
}

/// Fills in `eliminates` (bounded violating traces the candidate makes
/// impossible) and `breaks` (positive traces it makes impossible).
pub fn evaluate_candidate(
    c: &ControlCandidate,
    p: &SearchProblem,
    positives: &[Trace],
) -> Result<ControlCandidate, LearnError> {
    if let Some(bad) = positives.iter().find(|t| t.verdict != Verdict::Satisfying) {
        return Err(LearnError::PositiveViolates(bad.id.clone()));
    }
    let guarded = with_candidate(p, c);
    let mut out = c.clone();
    out.eliminates.clear();
    out.breaks.clear();
    for t in p.enumerate_traces(TraceFilter::Violating)? {
        if guarded.replay_from(t.initial(), &t.ground_actions()).is_err() {
            out.eliminates.insert(t.id.clone());
        }
    }
    for t in positives {
        match guarded.replay_from(t.initial(), &t.ground_actions()) {
            Ok(_) => {}
            Err(SearchError::Inapplicable { .. }) => {
                out.breaks.insert(t.id.clone());
            }
            Err(e) => return Err(e.into()),
        }
    }
    out.evaluated = true;
    Ok(out)
}

/// Everything learning looked at: the trace it started from, the bounded
/// violating set, every evaluated candidate in rank order and the winner.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LearnReport {
    pub trace: Trace,
    pub total: BTreeSet<String>,
    pub candidates: Vec<ControlCandidate>,
    pub best: Option<ControlCandidate>,
}

pub fn learn_report(
    problem: &SearchProblem,
    positives: &[Trace],
    templates: &[ConstraintTemplate],
) -> Result<LearnReport, LearnError> {
    let trace = problem.find_violating_trace()?.ok_or(LearnError::NoViolation)?;
    let total: BTreeSet<String> = problem
        .enumerate_traces(TraceFilter::Violating)?
        .into_iter()
        .map(|t| t.id)
        .collect();
    let mut candidates = Vec::new();
    for c in generate_candidates(&trace, templates, &problem.domain, problem.horizon)? {
        candidates.push(evaluate_candidate(&c, problem, positives)?);
    }
    candidates.sort_by(rank);
    let best = candidates
        .iter()
        .find(|c| c.enactable && c.breaks.is_empty() && c.eliminates == total)
        .cloned();
    Ok(LearnReport {
        trace,
        total,
        candidates,
        best,
    })
}

/// Learns the best control for `problem`.
pub fn learn_control(
    problem: &SearchProblem,
    positives: &[Trace],
    templates: &[ConstraintTemplate],
) -> Result<ControlCandidate, LearnError> {
    let report = learn_report(problem, positives, templates)?;
    match report.best {
        Some(c) => Ok(c),
        None => Err(LearnError::InterventionRequired {
            candidates: report.candidates,
        }),
    }
}

/// A mitigation proposed by planning, for sustainability classification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mitigation {
    Control(ControlCandidate),
    AssumptionEvolution { assumption: String },
    Patch { cve: String, device: String },
}

/// Root-cause iff the mitigation changes a model part the anomaly affects
/// at the assumption or authentication level; new controls bolted on next
/// to the model are short-term.
pub fn classify_sustainability<'a>(
    m: &Mitigation,
    model: &GoalModel,
    anomaly_tags: impl IntoIterator<Item = &'a str>,
) -> Sustainability {
    let affected = model.affected_parts(anomaly_tags);
    let root = match m {
        Mitigation::Control(c) => c
            .modifies
            .as_ref()
            .is_some_and(|id| affected.contains(&ModelPart::Control(id.clone()))),
        Mitigation::AssumptionEvolution { assumption } => affected.contains(&ModelPart::Assumption(assumption.clone())),
        Mitigation::Patch { device, .. } => affected.iter().any(|p| match p {
            ModelPart::Assumption(id) | ModelPart::Control(id) => {
                model.assumption(id).is_some_and(|a| a.tags.contains(device))
                    || model.control(id).is_some_and(|c| c.tags.contains(device))
            }
            ModelPart::Goal(_) => false,
        }),
    };
    if root {
        Sustainability::RootCause
    } else {
        Sustainability::ShortTerm
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::domain::Trust;
    use crate::fixtures;

    fn problem(trust: Trust) -> SearchProblem {
        let mut d = fixtures::smart_home_domain();
        d.add_device("d1", trust, BTreeMap::new());
        let init = d.initial_state().with_fact("connected(d1)".parse().unwrap());
        SearchProblem::from_model(d, &fixtures::smart_home_goals(), init).unwrap()
    }

    #[test]
    fn rejects_satisfying_trace() {
        let p = problem(Trust::Untrusted);
        let t = p.check_trace(&[]).unwrap();
        assert!(matches!(
            generate_candidates(&t, &default_templates(), &p.domain, 4),
            Err(LearnError::NotViolating(_))
        ));
    }

    #[test]
    fn generates_specific_and_general_forms() {
        let p = problem(Trust::Untrusted);
        let t = p.find_violating_trace().unwrap().unwrap();
        let cs = generate_candidates(&t, &default_templates(), &p.domain, 4).unwrap();
        let texts: Vec<String> = cs.iter().map(|c| c.text()).collect();
        assert!(texts.contains(&"forbid open(X,sl) when net_device(X) & X = d1".to_string()));
        assert!(texts.contains(&"forbid open(X,sl) when net_device(X)".to_string()));
        assert!(cs.windows(2).all(|w| w[0].specificity >= w[1].specificity));
    }

    #[test]
    fn learns_subject_specific_rule() {
        let p = problem(Trust::Untrusted);
        let c = learn_control(&p, &[], &default_templates()).unwrap();
        assert_eq!(c.text(), "forbid open(X,sl) when net_device(X) & X = d1");
        let after = p.with_rule(RuleSource::Candidate, c.constraint.clone());
        assert!(after.find_violating_trace().unwrap().is_none());
    }

    #[test]
    fn no_violation_is_a_precondition_failure() {
        let p = problem(Trust::Untrusted).with_horizon(3);
        assert!(matches!(learn_control(&p, &[], &default_templates()), Err(LearnError::NoViolation)));
    }

    #[test]
    fn empty_guard_false_eliminates_nothing() {
        let p = problem(Trust::Untrusted);
        let c = ControlCandidate::new(
            Constraint::forbid(Pattern::new("open", vec![PTerm::Var("X".into()), PTerm::Wild]), Guard::Bool(false)),
            "manual",
            0,
        );
        let e = evaluate_candidate(&c, &p, &[]).unwrap();
        assert!(e.eliminates.is_empty());
        assert!(e.breaks.is_empty());
    }

    #[test]
    fn ranking_is_total() {
        let mut a = ControlCandidate::new("forbid a".parse().unwrap(), "t", 1);
        let b = ControlCandidate::new("forbid b".parse().unwrap(), "t", 1);
        assert_eq!(rank(&a, &b), Ordering::Less);
        a.breaks.insert("x".into());
        assert_eq!(rank(&a, &b), Ordering::Greater);
    }
}
