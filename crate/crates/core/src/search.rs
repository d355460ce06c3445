//! Bounded search for traces that violate the security requirement.
//!
//! Active assumptions and enacted controls are compiled into a [`RuleSet`]
//! that prunes the transition relation: `forbid` rules block actions,
//! `require` rules constrain the action after a trigger and `never` rules
//! filter successor states. The requirement is a `never` constraint whose
//! guard is the violation condition.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{ActionDomain, DomainError, State};
use crate::expr::{Constraint, EvalCtx, EvalError, Guard, Params};
use crate::goal_model::GoalModel;
use crate::term::{text_list, Action, Fluent, Term};

pub const DEFAULT_HORIZON: u32 = 4;
pub const DEFAULT_MAX_HORIZON: u32 = 8;
/// Largest horizon accepted by [`SearchProblem::enumerate_traces`].
pub const MAX_EXHAUSTIVE_HORIZON: u32 = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SearchError {
    #[error("horizon {horizon} exceeds the configured maximum {max}")]
    HorizonTooLarge { horizon: u32, max: u32 },
    #[error("horizon {0} is too large for exhaustive enumeration (max {MAX_EXHAUSTIVE_HORIZON})")]
    ExhaustiveTooLarge(u32),
    #[error("action {action} is inapplicable at time {time}")]
    Inapplicable { time: u32, action: String },
    #[error("the requirement must be a `never` constraint, got `{0}`")]
    BadRequirement(String),
    #[error("goal model has no formal requirement")]
    NoRequirement,
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("rule {rule}: {source}")]
    Eval { rule: String, source: EvalError },
}

/// Where a compiled rule came from.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum RuleSource {
    Assumption(String),
    Control(String),
    Candidate,
    Law(String),
}

impl std::fmt::Display for RuleSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RuleSource::Assumption(id) => write!(f, "assumption {id}"),
            RuleSource::Control(id) => write!(f, "control {id}"),
            RuleSource::Candidate => f.write_str("candidate control"),
            RuleSource::Law(id) => write!(f, "world law {id}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rule {
    pub source: RuleSource,
    pub constraint: Constraint,
    pub params: Params,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

impl RuleSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, source: RuleSource, constraint: Constraint, params: Params) {
        self.rules.push(Rule {
            source,
            constraint,
            params,
        });
    }

    pub fn remove(&mut self, source: &RuleSource) {
        self.rules.retain(|r| &r.source != source);
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    /// Rules compiled from the model's active assumptions and enacted controls.
    pub fn from_model(model: &GoalModel) -> Self {
        let mut rs = RuleSet::new();
        for a in model.active_assumptions() {
            rs.push(RuleSource::Assumption(a.id.clone()), a.formal.clone(), a.params.clone());
        }
        for c in model.enacted_controls() {
            rs.push(RuleSource::Control(c.id.clone()), c.constraint.clone(), Params::new());
        }
        rs
    }

    /// Same rules with occurrence-time bounds dropped, for enforcement in a
    /// world whose clock runs past any search horizon.
    pub fn without_time_bounds(&self) -> Self {
        RuleSet {
            rules: self
                .rules
                .iter()
                .map(|r| Rule {
                    constraint: r.constraint.without_time_bounds(),
                    ..r.clone()
                })
                .collect(),
        }
    }

    /// Returns the first rule that blocks `action` in `state`, or `None` if
    /// the schema preconditions hold and every rule permits it.
    pub fn blocker(
        &self,
        domain: &ActionDomain,
        state: &State,
        action: &Action,
    ) -> Result<Option<Blocker>, SearchError> {
        if !domain.applicable(state, action)? {
            return Ok(Some(Blocker::Precondition));
        }
        let mut next: Option<State> = None;
        for r in &self.rules {
            let ctx = EvalCtx {
                params: Some(&r.params),
                ..domain.eval_ctx(state)
            };
            let err = |source| SearchError::Eval {
                rule: r.constraint.to_string(),
                source,
            };
            let blocked = match &r.constraint {
                Constraint::Forbid {
                    action: pat,
                    time,
                    guard,
                } => match pat.matches_action(action) {
                    Some(mut env) => {
                        if let Some(t) = time {
                            env.insert(t.clone(), Term::Int(i64::from(state.time) + 1));
                        }
                        ctx.holds_in(guard, &env).map_err(err)?
                    }
                    None => false,
                },
                Constraint::Require {
                    action: pat,
                    after,
                    guard,
                } => match state.last.as_ref().and_then(|l| after.matches_action(l)) {
                    Some(env) if ctx.holds_in(guard, &env).map_err(err)? => {
                        pat.unify(&action.name, &action.args, &env).is_none()
                    }
                    _ => false,
                },
                Constraint::Never(guard) => {
                    let succ = match &next {
                        Some(s) => s,
                        None => next.insert(domain.apply(state, action)?),
                    };
                    let sctx = EvalCtx {
                        params: Some(&r.params),
                        ..domain.eval_ctx(succ)
                    };
                    sctx.holds(guard).map_err(err)?
                }
            };
            if blocked {
                return Ok(Some(Blocker::Rule(r.source.clone())));
            }
        }
        Ok(None)
    }

    pub fn permits(&self, domain: &ActionDomain, state: &State, action: &Action) -> Result<bool, SearchError> {
        Ok(self.blocker(domain, state, action)?.is_none())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "blocked_by", content = "rule", rename_all = "snake_case")]
pub enum Blocker {
    Precondition,
    Rule(RuleSource),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Satisfying,
    Violating,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceFilter {
    All,
    Violating,
    Satisfying,
}

/// An action occurrence at a time step.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub t: u32,
    pub name: String,
    pub args: Vec<Term>,
}

impl Step {
    pub fn action(&self) -> Action {
        Action {
            name: self.name.clone(),
            args: self.args.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub id: String,
    pub actions: Vec<Step>,
    pub verdict: Verdict,
    pub violated_at: Option<u32>,
    /// `states[0]` is the initial state and `states[i + 1]` follows action `i`.
    #[serde(skip)]
    pub states: Vec<State>,
}

/// Facts added and removed by one step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDiff {
    pub t: u32,
    pub action: String,
    #[serde(with = "text_list")]
    pub added: Vec<Fluent>,
    #[serde(with = "text_list")]
    pub removed: Vec<Fluent>,
}

/// A trace with its step-by-step state changes, as served to explainers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceExplanation {
    #[serde(flatten)]
    pub trace: Trace,
    pub rendered: String,
    #[serde(with = "text_list")]
    pub initial: Vec<Fluent>,
    pub steps: Vec<StepDiff>,
}

/// Content-derived trace id: `tr-` and the first 12 hex digits of the
/// SHA-256 of `a1@t1;a2@t2;...`.
pub fn trace_id(actions: &[Step]) -> String {
    let canon: Vec<String> = actions.iter().map(|s| format!("{}@{}", s.action(), s.t)).collect();
    let digest = Sha256::digest(canon.join(";").as_bytes());
    let mut out = String::from("tr-");
    for b in digest.iter().take(6) {
        let _ = write!(out, "{b:02x}");
    }
    out
}

impl Trace {
    pub fn initial(&self) -> &State {
        &self.states[0]
    }

    pub fn ground_actions(&self) -> Vec<Action> {
        self.actions.iter().map(Step::action).collect()
    }

    /// `a1@t1, a2@t2, ...`
    pub fn render(&self) -> String {
        self.actions
            .iter()
            .map(|s| format!("{}@{}", s.action(), s.t))
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }

    pub fn explain(&self) -> TraceExplanation {
        TraceExplanation {
            trace: self.clone(),
            rendered: self.render(),
            initial: self.states.first().map(|s| s.facts.iter().cloned().collect()).unwrap_or_default(),
            steps: self.diffs(),
        }
    }

    pub fn diffs(&self) -> Vec<StepDiff> {
        self.actions
            .iter()
            .zip(self.states.windows(2))
            .map(|(s, w)| StepDiff {
                t: s.t,
                action: s.action().to_string(),
                added: w[1].facts.difference(&w[0].facts).cloned().collect(),
                removed: w[0].facts.difference(&w[1].facts).cloned().collect(),
            })
            .collect()
    }

    fn build(states: Vec<State>, requirement: &Guard, domain: &ActionDomain) -> Result<Trace, SearchError> {
        let actions: Vec<Step> = states[1..]
            .iter()
            .map(|s| {
                let a = s.last.clone().expect("successor states record their action");
                Step {
                    t: s.time,
                    name: a.name,
                    args: a.args,
                }
            })
            .collect();
        let mut violated_at = None;
        for s in &states {
            if violates(domain, requirement, s)? {
                violated_at = Some(s.time);
                break;
            }
        }
        Ok(Trace {
            id: trace_id(&actions),
            verdict: if violated_at.is_some() {
                Verdict::Violating
            } else {
                Verdict::Satisfying
            },
            violated_at,
            actions,
            states,
        })
    }
}

fn violates(domain: &ActionDomain, requirement: &Guard, state: &State) -> Result<bool, SearchError> {
    domain.eval_ctx(state).holds(requirement).map_err(|source| SearchError::Eval {
        rule: format!("never {requirement}"),
        source,
    })
}

#[derive(Clone, Debug)]
pub struct SearchProblem {
    pub domain: ActionDomain,
    pub initial: State,
    pub rules: RuleSet,
    /// The violation condition of the requirement.
    pub requirement: Guard,
    pub horizon: u32,
    pub max_horizon: u32,
}

impl SearchProblem {
    pub fn new(domain: ActionDomain, initial: State, rules: RuleSet, requirement: &Constraint) -> Result<Self, SearchError> {
        let requirement = match requirement {
            Constraint::Never(g) => g.clone(),
            other => return Err(SearchError::BadRequirement(other.to_string())),
        };
        Ok(SearchProblem {
            domain,
            initial,
            rules,
            requirement,
            horizon: DEFAULT_HORIZON,
            max_horizon: DEFAULT_MAX_HORIZON,
        })
    }

    /// Problem over the model's active assumptions, enacted controls and
    /// top-level requirement, starting from `initial`.
    pub fn from_model(domain: ActionDomain, model: &GoalModel, initial: State) -> Result<Self, SearchError> {
        let req = model.requirement().ok_or(SearchError::NoRequirement)?;
        SearchProblem::new(domain, initial, RuleSet::from_model(model), req)
    }

    pub fn with_horizon(mut self, horizon: u32) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_rule(mut self, source: RuleSource, constraint: Constraint) -> Self {
        self.rules.push(source, constraint, Params::new());
        self
    }

    pub fn without(mut self, source: &RuleSource) -> Self {
        self.rules.remove(source);
        self
    }

    pub fn violates(&self, state: &State) -> Result<bool, SearchError> {
        violates(&self.domain, &self.requirement, state)
    }

    pub fn permits(&self, state: &State, action: &Action) -> Result<bool, SearchError> {
        self.rules.permits(&self.domain, state, action)
    }

    /// Permitted successors in ascending action order.
    pub fn successors(&self, state: &State) -> Result<Vec<State>, SearchError> {
        let mut out = Vec::new();
        for a in self.domain.ground_actions() {
            if self.permits(state, a)? {
                out.push(self.domain.apply(state, a)?);
            }
        }
        Ok(out)
    }

    fn check_horizon(&self) -> Result<(), SearchError> {
        if self.horizon > self.max_horizon {
            return Err(SearchError::HorizonTooLarge {
                horizon: self.horizon,
                max: self.max_horizon,
            });
        }
        Ok(())
    }

    /// Shortest violating trace within the horizon; ties go to the
    /// lexicographically least action sequence.
    pub fn find_violating_trace(&self) -> Result<Option<Trace>, SearchError> {
        self.check_horizon()?;
        // (state, budget) pairs known to reach no violation within budget
        let mut dead: HashSet<(State, u32)> = HashSet::new();
        for bound in 0..=self.horizon {
            let mut path = vec![self.initial.clone()];
            if self.dfs(&mut path, bound, &mut dead)? {
                return Trace::build(path, &self.requirement, &self.domain).map(Some);
            }
        }
        Ok(None)
    }

    fn dfs(&self, path: &mut Vec<State>, budget: u32, dead: &mut HashSet<(State, u32)>) -> Result<bool, SearchError> {
        let state = path.last().expect("path starts with the initial state").clone();
        if self.violates(&state)? {
            return Ok(true);
        }
        if budget == 0 {
            return Ok(false);
        }
        let key = (state, budget);
        if dead.contains(&key) {
            return Ok(false);
        }
        for next in self.successors(&key.0)? {
            path.push(next);
            if self.dfs(path, budget - 1, dead)? {
                return Ok(true);
            }
            path.pop();
        }
        dead.insert(key);
        Ok(false)
    }

    /// Every maximal trace within the horizon: extension stops at the first
    /// violation, at the horizon, or when nothing is permitted.
    pub fn enumerate_traces(&self, filter: TraceFilter) -> Result<Vec<Trace>, SearchError> {
        if self.horizon > MAX_EXHAUSTIVE_HORIZON {
            return Err(SearchError::ExhaustiveTooLarge(self.horizon));
        }
        let mut out = Vec::new();
        let mut path = vec![self.initial.clone()];
        self.collect(&mut path, filter, &mut out)?;
        Ok(out)
    }

    fn collect(&self, path: &mut Vec<State>, filter: TraceFilter, out: &mut Vec<Trace>) -> Result<(), SearchError> {
        let state = path.last().expect("non-empty path");
        let violating = self.violates(state)?;
        let succ = if violating || path.len() as u32 > self.horizon {
            Vec::new()
        } else {
            self.successors(state)?
        };
        if succ.is_empty() {
            let keep = match filter {
                TraceFilter::All => true,
                TraceFilter::Violating => violating,
                TraceFilter::Satisfying => !violating,
            };
            if keep {
                out.push(Trace::build(path.clone(), &self.requirement, &self.domain)?);
            }
            return Ok(());
        }
        for next in succ {
            path.push(next);
            self.collect(path, filter, out)?;
            path.pop();
        }
        Ok(())
    }

    /// Replays `actions` from the problem's initial state.
    pub fn check_trace(&self, actions: &[Action]) -> Result<Trace, SearchError> {
        self.replay_from(&self.initial, actions)
    }

    /// Replays `actions` from `initial` under the problem's rules.
    pub fn replay_from(&self, initial: &State, actions: &[Action]) -> Result<Trace, SearchError> {
        let mut states = vec![initial.clone()];
        for a in actions {
            let s = states.last().expect("non-empty");
            let time = s.time + 1;
            if !self.permits(s, a)? {
                return Err(SearchError::Inapplicable {
                    time,
                    action: a.to_string(),
                });
            }
            let next = self.domain.apply(s, a)?;
            states.push(next);
        }
        Trace::build(states, &self.requirement, &self.domain)
    }

    /// Ground actions the rules forbid somewhere along the enumerated
    /// traces although their schema preconditions hold.
    pub fn forbidden_actions(&self, extra: &RuleSet) -> Result<BTreeSet<(u32, Action)>, SearchError> {
        let all = self.enumerate_traces(TraceFilter::All)?;
        let mut out = BTreeSet::new();
        let mut seen: HashSet<State> = HashSet::new();
        for t in &all {
            for s in &t.states {
                if s.time >= self.horizon || !seen.insert(s.clone()) {
                    continue;
                }
                for a in self.domain.ground_actions() {
                    if self.permits(s, a)? && !extra.permits(&self.domain, s, a)? {
                        out.insert((s.time + 1, a.clone()));
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::domain::Trust;
    use crate::fixtures;

    fn act(s: &str) -> Action {
        s.parse().unwrap()
    }

    fn problem() -> SearchProblem {
        let mut d = fixtures::smart_home_domain();
        d.add_device("d1", Trust::Untrusted, BTreeMap::new());
        let init = d.initial_state().with_fact("connected(d1)".parse().unwrap());
        SearchProblem::from_model(d, &fixtures::smart_home_goals(), init).unwrap()
    }

    #[test]
    fn finds_the_four_step_trace() {
        let t = problem().find_violating_trace().unwrap().unwrap();
        assert_eq!(
            t.render(),
            "exit(tenant,home)@1, close(sl)@2, open(d1,sl)@3, enter(outsider,home)@4"
        );
        assert_eq!(t.violated_at, Some(4));
        assert!(t.states[4].contains(&"in(outsider,home)".parse().unwrap()));
    }

    #[test]
    fn horizon_guard() {
        let p = problem().with_horizon(9);
        assert_eq!(
            p.find_violating_trace().unwrap_err(),
            SearchError::HorizonTooLarge { horizon: 9, max: 8 }
        );
        assert_eq!(
            problem().with_horizon(7).enumerate_traces(TraceFilter::All).unwrap_err(),
            SearchError::ExhaustiveTooLarge(7)
        );
    }

    #[test]
    fn shorter_horizon_finds_nothing() {
        assert!(problem().with_horizon(3).find_violating_trace().unwrap().is_none());
    }

    #[test]
    fn empty_trace_is_satisfying() {
        let t = problem().check_trace(&[]).unwrap();
        assert_eq!(t.verdict, Verdict::Satisfying);
        assert_eq!(t.violated_at, None);
        assert!(t.actions.is_empty());
    }

    #[test]
    fn check_trace_reports_time_of_inapplicable_action() {
        let err = problem()
            .check_trace(&[act("exit(tenant,home)"), act("enter(outsider,home)")])
            .unwrap_err();
        assert_eq!(
            err,
            SearchError::Inapplicable {
                time: 2,
                action: "enter(outsider,home)".into()
            }
        );
    }

    #[test]
    fn assumption_c_blocks_entry_through_locked_door() {
        let p = problem();
        let s = p.initial.clone().without_fact(&"unlocked(sl)".parse().unwrap()).with_fact("locked(sl)".parse().unwrap());
        assert!(p.domain.applicable(&s, &act("enter(outsider,home)")).unwrap());
        assert!(!p.permits(&s, &act("enter(outsider,home)")).unwrap());
    }

    #[test]
    fn diffs_follow_states() {
        let t = problem().find_violating_trace().unwrap().unwrap();
        let d = t.diffs();
        assert_eq!(d.len(), 4);
        assert_eq!(d[3].added, vec!["in(outsider,home)".parse::<Fluent>().unwrap()]);
    }

    #[test]
    fn trace_json_field_order() {
        let t = problem().check_trace(&[act("exit(tenant,home)")]).unwrap();
        let json = t.to_json();
        assert!(json.starts_with("{\"id\":\"tr-"), "{json}");
        assert!(json.contains("\"actions\":[{\"t\":1,\"name\":\"exit\",\"args\":[\"tenant\",\"home\"]}],\"verdict\":\"satisfying\",\"violated_at\":null}"));
    }
}
