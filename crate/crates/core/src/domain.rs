//! The smart-home action theory: objects, agents, action schemas with
//! preconditions and add/delete effects, and the initial state.
//!
//! Effects follow STRIPS semantics, so every fluent not named in an effect
//! list carries over unchanged (the frame property).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{self, SyntaxError, Token};
use crate::expr::{Bindings, EvalCtx, EvalError, ExprError, Guard, PTerm, Pattern};
use crate::term::{Action, Fluent, Term};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("line {line}: {source}")]
    Expr { line: usize, source: ExprError },
    #[error("unknown action schema {0}")]
    UnknownSchema(String),
    #[error("{name} takes {expected} arguments, got {got}")]
    ArityMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("argument {arg} of {action} is not a {expected}")]
    BadArgument {
        action: String,
        arg: String,
        expected: ParamType,
    },
    #[error("{action} is not applicable at time {time}")]
    Inapplicable { action: String, time: u32 },
    #[error("unknown agent {0}")]
    UnknownAgent(String),
    #[error("duplicate declaration of {0}")]
    Duplicate(String),
    #[error("state invariant violated: {0}")]
    StateInvariant(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Tenant,
    Outsider,
    NetDevice,
    Engineer,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Tenant => "tenant",
            AgentKind::Outsider => "outsider",
            AgentKind::NetDevice => "net_device",
            AgentKind::Engineer => "engineer",
        }
    }

    pub fn is_person(self) -> bool {
        !matches!(self, AgentKind::NetDevice)
    }
}

impl FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "tenant" => AgentKind::Tenant,
            "outsider" => AgentKind::Outsider,
            "net_device" => AgentKind::NetDevice,
            "engineer" => AgentKind::Engineer,
            other => return Err(format!("unknown agent kind `{other}`")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trust {
    Trusted,
    Untrusted,
    Unknown,
}

impl Trust {
    /// Name of the rigid fact asserted for an agent with this trust mark.
    pub fn predicate(self) -> &'static str {
        match self {
            Trust::Trusted => "trusted",
            Trust::Untrusted => "untrusted",
            Trust::Unknown => "unknown_trust",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Trust::Trusted => "trusted",
            Trust::Untrusted => "untrusted",
            Trust::Unknown => "unknown",
        }
    }
}

impl FromStr for Trust {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "trusted" => Trust::Trusted,
            "untrusted" => Trust::Untrusted,
            "unknown" => Trust::Unknown,
            other => return Err(format!("unknown trust mark `{other}`")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agent {
    pub id: String,
    pub kind: AgentKind,
    pub trust: Trust,
    /// Descriptive attributes, e.g. the device type.
    pub attrs: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    Person,
    Device,
    Agent,
    Place,
    Lock,
    Network,
}

impl fmt::Display for ParamType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamType::Person => "person",
            ParamType::Device => "device",
            ParamType::Agent => "agent",
            ParamType::Place => "place",
            ParamType::Lock => "lock",
            ParamType::Network => "network",
        })
    }
}

impl FromStr for ParamType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "person" => ParamType::Person,
            "device" => ParamType::Device,
            "agent" => ParamType::Agent,
            "place" => ParamType::Place,
            "lock" => ParamType::Lock,
            "network" => ParamType::Network,
            other => return Err(format!("unknown parameter type `{other}`")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSchema {
    pub name: String,
    pub params: Vec<(String, ParamType)>,
    pub pre: Guard,
    pub add: Vec<Pattern>,
    pub del: Vec<Pattern>,
    /// The adaptive system has an actuator for this action.
    pub controllable: bool,
    /// Restricting this action is noticeable to the tenant.
    pub visible: bool,
    /// Observation-only: no effects, excluded from trace search.
    pub observe: bool,
}

impl ActionSchema {
    pub fn arity(&self) -> usize {
        self.params.len()
    }

    fn bind(&self, action: &Action) -> Bindings {
        self.params
            .iter()
            .map(|(v, _)| v.clone())
            .zip(action.args.iter().cloned())
            .collect()
    }
}

/// A world state. `last` is the action that produced it, which `did(..)`
/// literals and `require` rules inspect.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct State {
    pub time: u32,
    pub facts: BTreeSet<Fluent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last: Option<Action>,
}

impl State {
    pub fn new(facts: impl IntoIterator<Item = Fluent>) -> Self {
        State {
            time: 0,
            facts: facts.into_iter().collect(),
            last: None,
        }
    }

    pub fn contains(&self, f: &Fluent) -> bool {
        self.facts.contains(f)
    }

    pub fn with_fact(mut self, f: Fluent) -> Self {
        self.facts.insert(f);
        self
    }

    pub fn without_fact(mut self, f: &Fluent) -> Self {
        self.facts.remove(f);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ActionDomain {
    name: String,
    places: BTreeSet<String>,
    locks: BTreeSet<String>,
    networks: BTreeSet<String>,
    agents: BTreeMap<String, Agent>,
    schemas: Vec<ActionSchema>,
    initial: BTreeSet<Fluent>,
    #[serde(skip)]
    statics: BTreeSet<Fluent>,
    #[serde(skip)]
    grounded: Vec<Action>,
}

impl ActionDomain {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn agents(&self) -> &BTreeMap<String, Agent> {
        &self.agents
    }

    pub fn agent(&self, id: &str) -> Option<&Agent> {
        self.agents.get(id)
    }

    pub fn schemas(&self) -> &[ActionSchema] {
        &self.schemas
    }

    pub fn locks(&self) -> &BTreeSet<String> {
        &self.locks
    }

    /// Rigid facts derived from the roster: `<kind>(X)` and `<trust>(X)`.
    pub fn statics(&self) -> &BTreeSet<Fluent> {
        &self.statics
    }

    pub fn initial_state(&self) -> State {
        State::new(self.initial.iter().cloned())
    }

    pub fn set_initial_fact(&mut self, f: Fluent, present: bool) {
        if present {
            self.initial.insert(f);
        } else {
            self.initial.remove(&f);
        }
    }

    /// Replaces every initial fact named `name` with `f`.
    pub fn replace_initial(&mut self, name: &str, f: Fluent) {
        self.initial.retain(|g| g.name != name);
        self.initial.insert(f);
    }

    pub fn schema(&self, name: &str, arity: usize) -> Result<&ActionSchema, DomainError> {
        let mut seen = None;
        for s in &self.schemas {
            if s.name == name {
                if s.arity() == arity {
                    return Ok(s);
                }
                seen = Some(s.arity());
            }
        }
        match seen {
            Some(expected) => Err(DomainError::ArityMismatch {
                name: name.to_string(),
                expected,
                got: arity,
            }),
            None => Err(DomainError::UnknownSchema(name.to_string())),
        }
    }

    pub fn schema_for(&self, action: &Action) -> Result<&ActionSchema, DomainError> {
        self.schema(&action.name, action.arity())
    }

    /// Adds a network device to the roster (no-op if already present).
    pub fn add_device(&mut self, id: &str, trust: Trust, attrs: BTreeMap<String, String>) {
        self.agents.entry(id.to_string()).or_insert_with(|| Agent {
            id: id.to_string(),
            kind: AgentKind::NetDevice,
            trust,
            attrs,
        });
        self.rebuild();
    }

    pub fn set_trust(&mut self, id: &str, trust: Trust) -> Result<(), DomainError> {
        let agent = self
            .agents
            .get_mut(id)
            .ok_or_else(|| DomainError::UnknownAgent(id.to_string()))?;
        agent.trust = trust;
        self.rebuild();
        Ok(())
    }

    fn objects_of(&self, ty: ParamType) -> Vec<String> {
        let agents = |pred: &dyn Fn(AgentKind) -> bool| {
            self.agents
                .values()
                .filter(|a| pred(a.kind))
                .map(|a| a.id.clone())
                .collect::<Vec<_>>()
        };
        match ty {
            ParamType::Person => agents(&|k| k.is_person()),
            ParamType::Device => agents(&|k| k == AgentKind::NetDevice),
            ParamType::Agent => agents(&|_| true),
            ParamType::Place => self.places.iter().cloned().collect(),
            ParamType::Lock => self.locks.iter().cloned().collect(),
            ParamType::Network => self.networks.iter().cloned().collect(),
        }
    }

    fn is_of_type(&self, t: &Term, ty: ParamType) -> bool {
        let Some(s) = t.as_sym() else { return false };
        match ty {
            ParamType::Place => self.places.contains(s),
            ParamType::Lock => self.locks.contains(s),
            ParamType::Network => self.networks.contains(s),
            ParamType::Person => self.agents.get(s).is_some_and(|a| a.kind.is_person()),
            ParamType::Device => self
                .agents
                .get(s)
                .is_some_and(|a| a.kind == AgentKind::NetDevice),
            ParamType::Agent => self.agents.contains_key(s),
        }
    }

    fn rebuild(&mut self) {
        let mut statics = BTreeSet::new();
        for a in self.agents.values() {
            statics.insert(Fluent::new(a.kind.as_str(), [a.id.as_str()]));
            statics.insert(Fluent::new(a.trust.predicate(), [a.id.as_str()]));
        }
        self.statics = statics;

        let mut grounded = Vec::new();
        for s in self.schemas.iter().filter(|s| !s.observe) {
            let mut partial: Vec<Vec<Term>> = vec![Vec::new()];
            for (_, ty) in &s.params {
                let objs = self.objects_of(*ty);
                partial = partial
                    .into_iter()
                    .flat_map(|p| {
                        objs.iter().map(move |o| {
                            let mut q = p.clone();
                            q.push(Term::Sym(o.clone()));
                            q
                        })
                    })
                    .collect();
            }
            grounded.extend(partial.into_iter().map(|args| Action {
                name: s.name.clone(),
                args,
            }));
        }
        grounded.sort();
        self.grounded = grounded;
    }

    /// Every ground instance of a non-observation schema, sorted by name then
    /// arguments.
    pub fn ground_actions(&self) -> &[Action] {
        &self.grounded
    }

    fn check_args(&self, schema: &ActionSchema, action: &Action) -> Result<(), DomainError> {
        for ((_, ty), arg) in schema.params.iter().zip(&action.args) {
            if !self.is_of_type(arg, *ty) {
                return Err(DomainError::BadArgument {
                    action: action.to_string(),
                    arg: arg.to_string(),
                    expected: *ty,
                });
            }
        }
        Ok(())
    }

    pub fn eval_ctx<'a>(&'a self, state: &'a State) -> EvalCtx<'a> {
        EvalCtx {
            facts: &state.facts,
            statics: &self.statics,
            last: state.last.as_ref(),
            params: None,
        }
    }

    /// True iff the schema preconditions hold in `state`.
    pub fn applicable(&self, state: &State, action: &Action) -> Result<bool, DomainError> {
        let schema = self.schema_for(action)?;
        self.check_args(schema, action)?;
        let env = schema.bind(action);
        Ok(self.eval_ctx(state).holds_in(&schema.pre, &env)?)
    }

    /// Applies the action's effects; the frame property holds by construction.
    pub fn apply(&self, state: &State, action: &Action) -> Result<State, DomainError> {
        let schema = self.schema_for(action)?;
        let env = schema.bind(action);
        let mut facts = state.facts.clone();
        for d in &schema.del {
            if let Some(f) = d.ground(&env) {
                facts.remove(&f);
            }
        }
        for a in &schema.add {
            if let Some(f) = a.ground(&env) {
                facts.insert(f);
            }
        }
        Ok(State {
            time: state.time + 1,
            facts,
            last: Some(action.clone()),
        })
    }

    pub fn step(&self, state: &State, action: &Action) -> Result<State, DomainError> {
        if !self.applicable(state, action)? {
            return Err(DomainError::Inapplicable {
                action: action.to_string(),
                time: state.time + 1,
            });
        }
        self.apply(state, action)
    }

    pub fn holds(&self, state: &State, guard: &Guard) -> Result<bool, DomainError> {
        Ok(self.eval_ctx(state).holds(guard)?)
    }

    /// Lock status is exclusive per lock and agents are in at most one place.
    pub fn check_state(&self, state: &State) -> Result<(), DomainError> {
        for l in &self.locks {
            let locked = state.contains(&Fluent::new("locked", [l.as_str()]));
            let unlocked = state.contains(&Fluent::new("unlocked", [l.as_str()]));
            if locked && unlocked {
                return Err(DomainError::StateInvariant(format!(
                    "{l} is both locked and unlocked"
                )));
            }
        }
        let mut places: BTreeMap<&Term, usize> = BTreeMap::new();
        for f in state.facts.iter().filter(|f| f.name == "in" && f.args.len() == 2) {
            *places.entry(&f.args[0]).or_default() += 1;
        }
        if let Some((agent, _)) = places.into_iter().find(|(_, n)| *n > 1) {
            return Err(DomainError::StateInvariant(format!(
                "{agent} is in more than one place"
            )));
        }
        Ok(())
    }

    /// Parses the domain file format.
    pub fn parse(src: &str) -> Result<Self, DomainError> {
        let mut d = ActionDomain {
            name: String::new(),
            places: BTreeSet::new(),
            locks: BTreeSet::new(),
            networks: BTreeSet::new(),
            agents: BTreeMap::new(),
            schemas: Vec::new(),
            initial: BTreeSet::new(),
            statics: BTreeSet::new(),
            grounded: Vec::new(),
        };
        let lines = dsl::lines(src);
        let mut current: Option<ActionSchema> = None;
        let expr_err = |line: usize| move |source: ExprError| DomainError::Expr { line, source };
        for line in &lines {
            let (kw, rest) = line.keyword();
            if line.indent > 0 {
                let Some(schema) = current.as_mut() else {
                    return Err(line.error(1, "a top-level declaration", "indented line").into());
                };
                match kw {
                    "pre" => schema.pre = rest.parse().map_err(expr_err(line.number))?,
                    "add" | "del" => {
                        let p = rest
                            .parse::<Guard>()
                            .map_err(expr_err(line.number))
                            .and_then(|g| match g {
                                Guard::Fact(p) => Ok(p),
                                _ => Err(line.error(line.rest_col(), "a fluent pattern", rest).into()),
                            })?;
                        if let Some(PTerm::Var(v)) = p
                            .args
                            .iter()
                            .find(|a| matches!(a, PTerm::Var(v) if !schema.params.iter().any(|(p, _)| p == v)))
                        {
                            return Err(DomainError::Expr {
                                line: line.number,
                                source: ExprError::Unbound(v.clone()),
                            });
                        }
                        if kw == "add" {
                            schema.add.push(p);
                        } else {
                            schema.del.push(p);
                        }
                    }
                    other => return Err(line.error(line.indent + 1, "`pre`, `add` or `del`", other).into()),
                }
                continue;
            }
            if let Some(s) = current.take() {
                d.schemas.push(s);
            }
            match kw {
                "domain" => d.name = rest.to_string(),
                "place" | "lock" | "network" => {
                    let set = match kw {
                        "place" => &mut d.places,
                        "lock" => &mut d.locks,
                        _ => &mut d.networks,
                    };
                    for name in rest.split_whitespace() {
                        if !set.insert(name.to_string()) {
                            return Err(DomainError::Duplicate(name.to_string()));
                        }
                    }
                }
                "agent" | "device" => {
                    let agent = parse_agent(line, kw == "device")?;
                    if d.agents.insert(agent.id.clone(), agent.clone()).is_some() {
                        return Err(DomainError::Duplicate(agent.id));
                    }
                }
                "init" => {
                    let f: Fluent = rest.parse().map_err(expr_err(line.number))?;
                    d.initial.insert(f);
                }
                "action" => current = Some(parse_schema_header(line, rest)?),
                other => {
                    return Err(line
                        .error(1, "`domain`, `place`, `lock`, `network`, `agent`, `device`, `init` or `action`", other)
                        .into())
                }
            }
        }
        if let Some(s) = current.take() {
            d.schemas.push(s);
        }
        for s in &d.schemas {
            let c = crate::expr::Constraint::forbid(
                Pattern::new(&s.name, s.params.iter().map(|(v, _)| PTerm::Var(v.clone())).collect()),
                s.pre.clone(),
            );
            c.validate()
                .map_err(|source| DomainError::Expr { line: 0, source })?;
        }
        d.schemas.sort_by(|a, b| (&a.name, a.arity()).cmp(&(&b.name, b.arity())));
        d.rebuild();
        d.check_state(&d.initial_state())?;
        Ok(d)
    }
}

fn parse_agent(line: &dsl::Line<'_>, device: bool) -> Result<Agent, DomainError> {
    let toks = line.tokens()?;
    let mut it = toks.into_iter().skip(1);
    let id = match it.next() {
        Some(dsl::Spanned {
            tok: Token::Word(w), ..
        }) => w,
        Some(s) => return Err(line.error(s.col, "an agent id", format!("{:?}", s.tok)).into()),
        None => return Err(line.error(line.text.len() + 1, "an agent id", "end of line").into()),
    };
    let mut agent = Agent {
        id,
        kind: if device {
            AgentKind::NetDevice
        } else {
            AgentKind::Tenant
        },
        trust: Trust::Unknown,
        attrs: BTreeMap::new(),
    };
    for s in it {
        match s.tok {
            Token::KeyValue(k, v) if k == "kind" => {
                agent.kind = v.parse().map_err(|e: String| line.error(s.col, "an agent kind", e))?
            }
            Token::KeyValue(k, v) if k == "trust" => {
                agent.trust = v.parse().map_err(|e: String| line.error(s.col, "a trust mark", e))?
            }
            Token::KeyValue(k, v) => {
                agent.attrs.insert(k, v);
            }
            other => return Err(line.error(s.col, "key=value", format!("{other:?}")).into()),
        }
    }
    Ok(agent)
}

fn parse_schema_header(line: &dsl::Line<'_>, rest: &str) -> Result<ActionSchema, DomainError> {
    let col = line.rest_col();
    let (head, flags) = match rest.find(')') {
        Some(i) => (&rest[..=i], rest[i + 1..].trim()),
        None => match rest.find(char::is_whitespace) {
            Some(i) => (&rest[..i], rest[i..].trim()),
            None => (rest, ""),
        },
    };
    let (name, params_src) = match head.find('(') {
        Some(i) => (&head[..i], &head[i + 1..head.len() - 1]),
        None => (head, ""),
    };
    if name.is_empty() {
        return Err(line.error(col, "an action name", head).into());
    }
    let mut params = Vec::new();
    for p in params_src.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (v, ty) = p
            .split_once(':')
            .ok_or_else(|| line.error(col, "VAR:type", p))?;
        let ty: ParamType = ty.trim().parse().map_err(|e: String| line.error(col, "a parameter type", e))?;
        params.push((v.trim().to_string(), ty));
    }
    let mut schema = ActionSchema {
        name: name.to_string(),
        params,
        pre: Guard::Bool(true),
        add: Vec::new(),
        del: Vec::new(),
        controllable: false,
        visible: false,
        observe: false,
    };
    for flag in flags.split_whitespace() {
        match flag {
            "controllable" => schema.controllable = true,
            "visible" => schema.visible = true,
            "observe" => schema.observe = true,
            other => return Err(line.error(col, "`controllable`, `visible` or `observe`", other).into()),
        }
    }
    Ok(schema)
}
