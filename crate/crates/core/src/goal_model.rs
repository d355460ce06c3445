//! AND/OR goal refinement model with domain assumptions and security
//! controls as leaves.
//!
//! File format, one declaration per line, children indented two spaces
//! under their parent goal:
//!
//! ```text
//! goal root "Authorised access" AND formal="never did(enter(outsider,home))"
//!   control two_factor "Second factor" constraint="forbid open(X,sl) when !connected(X)" tags=sl
//!   assume a "Trusted devices behave" formal="forbid open(X,sl) when trusted(X)" tags=sl
//!   assume shared
//! assume shared "Declared once, placed by reference" formal="never false" tags=x
//! vuln CVE-2022-32509 device=sl fix="update firmware" status=open
//! ```
//!
//! `goal <id>`, `assume <id>` and `control <id>` without a statement (or
//! constraint) refer to a top-level declaration of the same id.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{self, quote, Line, Spanned, SyntaxError, Token};
use crate::expr::{Constraint, ExprError, ParamValue, Params};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GoalModelError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("line {line}: {source}")]
    Expr { line: usize, source: ExprError },
    #[error("line {line}: reference to undeclared {what} `{id}`")]
    DanglingReference {
        line: usize,
        what: &'static str,
        id: String,
    },
    #[error("refinement cycle through `{0}`")]
    Cycle(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("unknown assumption `{0}`")]
    UnknownAssumption(String),
    #[error("unknown control `{0}`")]
    UnknownControl(String),
    #[error("assumption `{assumption}` has no parameter `{param}`")]
    UnknownParam { assumption: String, param: String },
    #[error("parameter `{param}` expects {expected}, got {found}")]
    TypeMismatch {
        param: String,
        expected: &'static str,
        found: &'static str,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Goal,
    Requirement,
    ControlLeaf,
    AssumptionLeaf,
}

impl NodeKind {
    pub fn is_leaf(self) -> bool {
        self != NodeKind::Goal
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Refinement {
    #[serde(rename = "AND")]
    And,
    #[serde(rename = "OR")]
    Or,
    #[serde(rename = "none")]
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalNode {
    pub id: String,
    pub statement: String,
    pub kind: NodeKind,
    pub refinement: Refinement,
    pub children: Vec<String>,
    pub tags: Vec<String>,
    /// Formal reading of a goal or requirement; for the root, the violation
    /// condition searched for by analysis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formal: Option<Constraint>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainAssumption {
    pub id: String,
    pub statement: String,
    pub formal: Constraint,
    pub params: Params,
    pub active: bool,
    pub tags: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Designed,
    Learned,
    HumanEdited,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sustainability {
    ShortTerm,
    RootCause,
    Unknown,
}

impl Sustainability {
    pub fn as_str(self) -> &'static str {
        match self {
            Sustainability::ShortTerm => "short-term",
            Sustainability::RootCause => "root-cause",
            Sustainability::Unknown => "unknown",
        }
    }
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Designed => "designed",
            Origin::Learned => "learned",
            Origin::HumanEdited => "human-edited",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityControl {
    pub id: String,
    pub constraint: Constraint,
    pub origin: Origin,
    pub sustainability: Sustainability,
    pub enacted: bool,
    pub rationale: String,
    /// Trace ids a learned control was derived from.
    #[serde(default)]
    pub learned_from: Vec<String>,
    pub tags: Vec<String>,
}

impl SecurityControl {
    /// Renders the control as a model-file `control` line.
    pub fn to_line(&self) -> String {
        let mut out = format!("control {}", self.id);
        if !self.rationale.is_empty() {
            out.push(' ');
            out.push_str(&quote(&self.rationale));
        }
        out.push_str(" constraint=");
        out.push_str(&quote(&self.constraint.to_string()));
        if self.origin != Origin::Designed {
            out.push_str(" origin=");
            out.push_str(self.origin.as_str());
        }
        if self.sustainability != Sustainability::Unknown {
            out.push_str(" sustainability=");
            out.push_str(self.sustainability.as_str());
        }
        if !self.enacted {
            out.push_str(" enacted=false");
        }
        if !self.learned_from.is_empty() {
            out.push_str(" from=");
            out.push_str(&self.learned_from.join(","));
        }
        push_tags(&mut out, &self.tags);
        out
    }
}

/// A disclosed vulnerability recorded against the model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnAnnotation {
    pub cve: String,
    pub device: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fix: Option<String>,
    pub status: String,
}

/// A model element reported by [`GoalModel::affected_parts`].
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "id", rename_all = "snake_case")]
pub enum ModelPart {
    Goal(String),
    Assumption(String),
    Control(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Tenant,
    Engineer,
    System,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Tenant => "tenant",
            Role::Engineer => "engineer",
            Role::System => "system",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalModel {
    pub version: u32,
    pub root: String,
    pub nodes: BTreeMap<String, GoalNode>,
    pub assumptions: BTreeMap<String, DomainAssumption>,
    pub controls: BTreeMap<String, SecurityControl>,
    #[serde(default)]
    pub vulnerabilities: BTreeMap<String, VulnAnnotation>,
}

impl GoalModel {
    pub fn root(&self) -> &GoalNode {
        &self.nodes[&self.root]
    }

    pub fn node(&self, id: &str) -> Option<&GoalNode> {
        self.nodes.get(id)
    }

    pub fn assumption(&self, id: &str) -> Option<&DomainAssumption> {
        self.assumptions.get(id)
    }

    pub fn control(&self, id: &str) -> Option<&SecurityControl> {
        self.controls.get(id)
    }

    /// The top-level requirement: the root's formal reading, or failing that
    /// the first requirement leaf (depth-first) that has one.
    pub fn requirement(&self) -> Option<&Constraint> {
        let mut stack = vec![self.root.as_str()];
        while let Some(id) = stack.pop() {
            let n = &self.nodes[id];
            if let Some(f) = &n.formal {
                return Some(f);
            }
            stack.extend(n.children.iter().rev().map(String::as_str));
        }
        None
    }

    pub fn active_assumptions(&self) -> impl Iterator<Item = &DomainAssumption> {
        self.assumptions.values().filter(|a| a.active)
    }

    pub fn enacted_controls(&self) -> impl Iterator<Item = &SecurityControl> {
        self.controls.values().filter(|c| c.enacted)
    }

    /// Every model element whose tags intersect `tags`.
    pub fn affected_parts<'a>(&self, tags: impl IntoIterator<Item = &'a str>) -> BTreeSet<ModelPart> {
        let tags: BTreeSet<&str> = tags.into_iter().collect();
        let hit = |ts: &[String]| ts.iter().any(|t| tags.contains(t.as_str()));
        let mut out = BTreeSet::new();
        for n in self.nodes.values().filter(|n| hit(&n.tags)) {
            out.insert(match n.kind {
                NodeKind::AssumptionLeaf => ModelPart::Assumption(n.id.clone()),
                NodeKind::ControlLeaf => ModelPart::Control(n.id.clone()),
                _ => ModelPart::Goal(n.id.clone()),
            });
        }
        for a in self.assumptions.values().filter(|a| hit(&a.tags)) {
            out.insert(ModelPart::Assumption(a.id.clone()));
        }
        for c in self.controls.values().filter(|c| hit(&c.tags)) {
            out.insert(ModelPart::Control(c.id.clone()));
        }
        out
    }

    /// Returns a copy with updated assumption parameters. The key `active`
    /// (boolean) toggles the assumption itself.
    pub fn evolve_assumption(&self, id: &str, new_params: &Params) -> Result<GoalModel, GoalModelError> {
        let mut next = self.clone();
        let a = next
            .assumptions
            .get_mut(id)
            .ok_or_else(|| GoalModelError::UnknownAssumption(id.to_string()))?;
        for (k, v) in new_params {
            if k == "active" {
                match v {
                    ParamValue::Bool(b) => a.active = *b,
                    other => {
                        return Err(GoalModelError::TypeMismatch {
                            param: k.clone(),
                            expected: "boolean",
                            found: other.type_name(),
                        })
                    }
                }
                continue;
            }
            let old = a.params.get(k).ok_or_else(|| GoalModelError::UnknownParam {
                assumption: id.to_string(),
                param: k.clone(),
            })?;
            if !old.same_type(v) {
                return Err(GoalModelError::TypeMismatch {
                    param: k.clone(),
                    expected: old.type_name(),
                    found: v.type_name(),
                });
            }
            a.params.insert(k.clone(), v.clone());
        }
        next.version += 1;
        Ok(next)
    }

    /// Returns a copy with the control added (or replaced by id).
    pub fn with_control(&self, control: SecurityControl) -> Result<GoalModel, GoalModelError> {
        if self.nodes.contains_key(&control.id) && !self.controls.contains_key(&control.id) {
            return Err(GoalModelError::DuplicateId(control.id));
        }
        let mut next = self.clone();
        if let Some(n) = next.nodes.get_mut(&control.id) {
            n.statement = control.rationale.clone();
            n.tags = control.tags.clone();
        }
        next.controls.insert(control.id.clone(), control);
        next.version += 1;
        next.validate()?;
        Ok(next)
    }

    pub fn with_control_enacted(&self, id: &str, enacted: bool) -> Result<GoalModel, GoalModelError> {
        let mut c = self
            .controls
            .get(id)
            .cloned()
            .ok_or_else(|| GoalModelError::UnknownControl(id.to_string()))?;
        c.enacted = enacted;
        self.with_control(c)
    }

    pub fn with_vulnerability(&self, v: VulnAnnotation) -> GoalModel {
        let mut next = self.clone();
        next.vulnerabilities.insert(v.cve.clone(), v);
        next.version += 1;
        next
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), GoalModelError> {
        let root = self
            .nodes
            .get(&self.root)
            .ok_or_else(|| GoalModelError::Invalid(format!("root `{}` is not a node", self.root)))?;
        let _ = root;
        for n in self.nodes.values() {
            match (n.kind.is_leaf(), n.refinement) {
                (true, Refinement::None) if n.children.is_empty() => {}
                (true, _) => {
                    return Err(GoalModelError::Invalid(format!("leaf `{}` cannot be refined", n.id)))
                }
                (false, Refinement::None) => {
                    return Err(GoalModelError::Invalid(format!("goal `{}` needs AND or OR", n.id)))
                }
                (false, _) if n.children.is_empty() => {
                    return Err(GoalModelError::Invalid(format!("goal `{}` has no children", n.id)))
                }
                _ => {}
            }
            if n.kind.is_leaf() && n.tags.is_empty() {
                return Err(GoalModelError::Invalid(format!("leaf `{}` has no tags", n.id)));
            }
            match n.kind {
                NodeKind::AssumptionLeaf if !self.assumptions.contains_key(&n.id) => {
                    return Err(GoalModelError::DanglingReference {
                        line: 0,
                        what: "assumption",
                        id: n.id.clone(),
                    })
                }
                NodeKind::ControlLeaf if !self.controls.contains_key(&n.id) => {
                    return Err(GoalModelError::DanglingReference {
                        line: 0,
                        what: "control",
                        id: n.id.clone(),
                    })
                }
                _ => {}
            }
            for c in &n.children {
                if !self.nodes.contains_key(c) {
                    return Err(GoalModelError::DanglingReference {
                        line: 0,
                        what: "goal",
                        id: c.clone(),
                    });
                }
            }
        }
        self.check_tree()?;
        for a in self.assumptions.values() {
            for p in a.formal.params() {
                if !a.params.contains_key(&p) {
                    return Err(GoalModelError::UnknownParam {
                        assumption: a.id.clone(),
                        param: p,
                    });
                }
            }
        }
        for c in self.controls.values() {
            if c.origin == Origin::Learned && c.learned_from.is_empty() {
                return Err(GoalModelError::Invalid(format!(
                    "learned control `{}` records no source trace",
                    c.id
                )));
            }
            if !c.constraint.params().is_empty() {
                return Err(GoalModelError::Invalid(format!(
                    "control `{}` refers to parameters",
                    c.id
                )));
            }
        }
        Ok(())
    }

    fn check_tree(&self) -> Result<(), GoalModelError> {
        // colour-marking DFS over every node catches cycles unreachable from the root
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Open,
            Done,
        }
        fn visit<'a>(
            m: &'a GoalModel,
            id: &'a str,
            marks: &mut BTreeMap<&'a str, Mark>,
        ) -> Result<(), GoalModelError> {
            match marks.get(id) {
                Some(Mark::Open) => return Err(GoalModelError::Cycle(id.to_string())),
                Some(Mark::Done) => return Ok(()),
                None => {}
            }
            marks.insert(id, Mark::Open);
            for c in &m.nodes[id].children {
                visit(m, c, marks)?;
            }
            marks.insert(id, Mark::Done);
            Ok(())
        }
        let mut marks = BTreeMap::new();
        for id in self.nodes.keys() {
            visit(self, id, &mut marks)?;
        }
        let mut parents: BTreeMap<&str, usize> = BTreeMap::new();
        for n in self.nodes.values() {
            for c in &n.children {
                *parents.entry(c.as_str()).or_default() += 1;
            }
        }
        if parents.contains_key(self.root.as_str()) {
            return Err(GoalModelError::Cycle(self.root.clone()));
        }
        for id in self.nodes.keys() {
            match parents.get(id.as_str()).copied().unwrap_or(0) {
                0 if *id != self.root => {
                    return Err(GoalModelError::Invalid(format!("`{id}` is not reachable from the root")))
                }
                n if n > 1 => return Err(GoalModelError::Invalid(format!("`{id}` has {n} parents"))),
                _ => {}
            }
        }
        Ok(())
    }

    fn write_node(&self, out: &mut String, id: &str, depth: usize) {
        let n = &self.nodes[id];
        let indent = "  ".repeat(depth);
        out.push_str(&indent);
        match n.kind {
            NodeKind::Goal | NodeKind::Requirement => {
                out.push_str(if n.kind == NodeKind::Goal { "goal " } else { "req " });
                out.push_str(&n.id);
                out.push(' ');
                out.push_str(&quote(&n.statement));
                match n.refinement {
                    Refinement::And => out.push_str(" AND"),
                    Refinement::Or => out.push_str(" OR"),
                    Refinement::None => {}
                }
                if let Some(f) = &n.formal {
                    out.push_str(" formal=");
                    out.push_str(&quote(&f.to_string()));
                }
                push_tags(out, &n.tags);
            }
            NodeKind::AssumptionLeaf => out.push_str(&assumption_line(&self.assumptions[id])),
            NodeKind::ControlLeaf => out.push_str(&self.controls[id].to_line()),
        }
        out.push('\n');
        for c in &n.children {
            self.write_node(out, c, depth + 1);
        }
    }

    pub fn parse(src: &str) -> Result<Self, GoalModelError> {
        Parser::default().run(src)
    }
}

fn push_tags(out: &mut String, tags: &[String]) {
    if !tags.is_empty() {
        out.push_str(" tags=");
        out.push_str(&tags.join(","));
    }
}

fn assumption_line(a: &DomainAssumption) -> String {
    let mut out = format!("assume {} {} formal={}", a.id, quote(&a.statement), quote(&a.formal.to_string()));
    if !a.params.is_empty() {
        let ps: Vec<String> = a.params.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        out.push_str(" params=");
        out.push_str(&ps.join(","));
    }
    if !a.active {
        out.push_str(" active=false");
    }
    push_tags(&mut out, &a.tags);
    out
}

impl fmt::Display for GoalModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        if self.version > 0 {
            out.push_str(&format!("version {}\n", self.version));
        }
        self.write_node(&mut out, &self.root, 0);
        for a in self.assumptions.values().filter(|a| !self.nodes.contains_key(&a.id)) {
            out.push_str(&assumption_line(a));
            out.push('\n');
        }
        for c in self.controls.values().filter(|c| !self.nodes.contains_key(&c.id)) {
            out.push_str(&c.to_line());
            out.push('\n');
        }
        for v in self.vulnerabilities.values() {
            out.push_str(&format!("vuln {} device={}", v.cve, v.device));
            if let Some(fix) = &v.fix {
                out.push_str(" fix=");
                out.push_str(&quote(fix));
            }
            out.push_str(&format!(" status={}\n", v.status));
        }
        f.write_str(&out)
    }
}

impl FromStr for GoalModel {
    type Err = GoalModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GoalModel::parse(s)
    }
}

/// Version history with an append-only record of assumption evolutions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHistory {
    versions: Vec<GoalModel>,
    records: Vec<EvolutionRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvolutionRecord {
    /// Version the evolution produced.
    pub version: u32,
    pub assumption: String,
    pub old: Params,
    pub new: Params,
    pub trigger: String,
    pub approver: Role,
}

impl ModelHistory {
    pub fn new(mut model: GoalModel) -> Self {
        model.version = 0;
        ModelHistory {
            versions: vec![model],
            records: Vec::new(),
        }
    }

    pub fn current(&self) -> &GoalModel {
        self.versions.last().expect("history is never empty")
    }

    pub fn version(&self, v: u32) -> Option<&GoalModel> {
        self.versions.get(v as usize)
    }

    pub fn versions(&self) -> &[GoalModel] {
        &self.versions
    }

    pub fn records(&self) -> &[EvolutionRecord] {
        &self.records
    }

    /// Appends `model` as the next version.
    pub fn commit(&mut self, mut model: GoalModel) -> &GoalModel {
        model.version = self.versions.len() as u32;
        self.versions.push(model);
        self.current()
    }

    pub fn evolve_assumption(
        &mut self,
        id: &str,
        new_params: &Params,
        trigger: &str,
        approver: Role,
    ) -> Result<&GoalModel, GoalModelError> {
        let cur = self.current();
        let before = cur
            .assumption(id)
            .ok_or_else(|| GoalModelError::UnknownAssumption(id.to_string()))?;
        let snapshot = |a: &DomainAssumption| {
            new_params
                .keys()
                .map(|k| {
                    let v = if k == "active" {
                        ParamValue::Bool(a.active)
                    } else {
                        a.params.get(k).cloned().unwrap_or(ParamValue::Bool(false))
                    };
                    (k.clone(), v)
                })
                .collect::<Params>()
        };
        let next = cur.evolve_assumption(id, new_params)?;
        let old = snapshot(before);
        let new = snapshot(&next.assumptions[id]);
        let version = self.versions.len() as u32;
        self.records.push(EvolutionRecord {
            version,
            assumption: id.to_string(),
            old,
            new,
            trigger: trigger.to_string(),
            approver,
        });
        Ok(self.commit(next))
    }
}

// ---------------------------------------------------------------------------
// parsing

#[derive(Default)]
struct Parser {
    nodes: BTreeMap<String, GoalNode>,
    assumptions: BTreeMap<String, DomainAssumption>,
    controls: BTreeMap<String, SecurityControl>,
    vulnerabilities: BTreeMap<String, VulnAnnotation>,
    version: u32,
    root: Option<String>,
    top_goals: Vec<String>,
    /// (parent, slot, what, id, line) for references resolved at the end.
    refs: Vec<(String, usize, &'static str, String, usize)>,
}

struct Attrs {
    id: String,
    statement: Option<String>,
    refinement: Refinement,
    kv: BTreeMap<String, (usize, String)>,
}

fn parse_attrs(line: &Line<'_>, toks: Vec<Spanned>) -> Result<Attrs, GoalModelError> {
    let mut it = toks.into_iter().skip(1).peekable();
    let id = match it.next() {
        Some(Spanned {
            tok: Token::Word(w), ..
        }) => w,
        Some(s) => return Err(line.error(s.col, "an id", describe(&s.tok)).into()),
        None => return Err(line.error(line.indent + line.text.len() + 1, "an id", "end of line").into()),
    };
    let mut attrs = Attrs {
        id,
        statement: None,
        refinement: Refinement::None,
        kv: BTreeMap::new(),
    };
    for s in it {
        match s.tok {
            Token::Quoted(q) if attrs.statement.is_none() && attrs.kv.is_empty() => attrs.statement = Some(q),
            Token::Word(w) if w == "AND" && attrs.refinement == Refinement::None => attrs.refinement = Refinement::And,
            Token::Word(w) if w == "OR" && attrs.refinement == Refinement::None => attrs.refinement = Refinement::Or,
            Token::KeyValue(k, v) => {
                if attrs.kv.insert(k.clone(), (s.col, v)).is_some() {
                    return Err(line.error(s.col, "each key at most once", k).into());
                }
            }
            other => return Err(line.error(s.col, "key=value", describe(&other)).into()),
        }
    }
    Ok(attrs)
}

fn describe(t: &Token) -> String {
    match t {
        Token::Word(w) => format!("`{w}`"),
        Token::Quoted(q) => format!("\"{q}\""),
        Token::KeyValue(k, _) => format!("`{k}=`"),
    }
}

impl Attrs {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.kv.remove(key)
    }

    fn tags(&mut self) -> Vec<String> {
        self.take("tags")
            .map(|(_, v)| v.split(',').filter(|t| !t.is_empty()).map(str::to_string).collect())
            .unwrap_or_default()
    }

    fn finish(self, line: &Line<'_>) -> Result<(), GoalModelError> {
        match self.kv.into_iter().next() {
            Some((k, (col, _))) => Err(line.error(col, "a known key", format!("`{k}=`")).into()),
            None => Ok(()),
        }
    }

    fn is_reference(&self) -> bool {
        self.statement.is_none() && self.kv.is_empty() && self.refinement == Refinement::None
    }
}

fn parse_bool(line: &Line<'_>, col: usize, v: &str) -> Result<bool, GoalModelError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(line.error(col, "`true` or `false`", other).into()),
    }
}

fn parse_constraint(line: &Line<'_>, v: &str) -> Result<Constraint, GoalModelError> {
    v.parse().map_err(|source| GoalModelError::Expr {
        line: line.number,
        source,
    })
}

impl Parser {
    fn claim(&mut self, id: &str) -> Result<(), GoalModelError> {
        if self.nodes.contains_key(id) || self.assumptions.contains_key(id) || self.controls.contains_key(id) {
            return Err(GoalModelError::DuplicateId(id.to_string()));
        }
        Ok(())
    }

    fn run(mut self, src: &str) -> Result<GoalModel, GoalModelError> {
        // stack of (indent, goal id) for the current ancestry
        let mut stack: Vec<(usize, String)> = Vec::new();
        for line in dsl::lines(src) {
            if line.indent % 2 != 0 {
                return Err(line.error(1, "indentation in steps of two spaces", format!("{} spaces", line.indent)).into());
            }
            while stack.last().is_some_and(|(ind, _)| *ind >= line.indent) {
                stack.pop();
            }
            let parent = match stack.last() {
                Some((ind, id)) if ind + 2 == line.indent => Some(id.clone()),
                Some(_) => return Err(line.error(1, "a child indented two spaces under its parent", "deeper indentation").into()),
                None if line.indent > 0 => {
                    return Err(line.error(1, "a top-level declaration", "indented line").into())
                }
                None => None,
            };
            let toks = line.tokens()?;
            let kw = match toks.first() {
                Some(Spanned {
                    tok: Token::Word(w), ..
                }) => w.clone(),
                _ => return Err(line.error(line.indent + 1, "a keyword", line.text).into()),
            };
            if kw == "version" {
                if parent.is_some() {
                    return Err(line.error(line.indent + 1, "a declaration", "`version`").into());
                }
                let (_, rest) = line.keyword();
                self.version = rest
                    .parse()
                    .map_err(|_| line.error(line.rest_col(), "a version number", rest))?;
                continue;
            }
            let attrs = parse_attrs(&line, toks)?;
            let pushed = match kw.as_str() {
                "goal" | "req" => self.goal(&line, attrs, parent, kw == "req")?,
                "assume" => self.assume(&line, attrs, parent)?,
                "control" => self.control(&line, attrs, parent)?,
                "vuln" => {
                    if parent.is_some() {
                        return Err(line.error(line.indent + 1, "a goal, req, assume or control", "`vuln`").into());
                    }
                    self.vuln(&line, attrs)?;
                    None
                }
                other => {
                    return Err(line
                        .error(line.indent + 1, "`goal`, `req`, `assume`, `control`, `vuln` or `version`", format!("`{other}`"))
                        .into())
                }
            };
            if let Some(id) = pushed {
                stack.push((line.indent, id));
            }
        }
        self.resolve()
    }

    fn attach(&mut self, parent: &Option<String>, id: &str) {
        if let Some(p) = parent {
            self.nodes.get_mut(p).expect("parent exists").children.push(id.to_string());
        }
    }

    fn reference(&mut self, parent: Option<String>, what: &'static str, id: String, line: &Line<'_>) -> Result<(), GoalModelError> {
        let Some(p) = parent else {
            return Err(line.error(line.indent + 1, "a declaration at top level", format!("reference to `{id}`")).into());
        };
        let slot = self.nodes[&p].children.len();
        // placeholder, replaced during resolution
        self.nodes.get_mut(&p).expect("parent exists").children.push(String::new());
        self.refs.push((p, slot, what, id, line.number));
        Ok(())
    }

    fn goal(&mut self, line: &Line<'_>, mut a: Attrs, parent: Option<String>, req: bool) -> Result<Option<String>, GoalModelError> {
        if !req && a.is_reference() {
            self.reference(parent, "goal", a.id, line)?;
            return Ok(None);
        }
        let statement = a.statement.take().ok_or_else(|| line.error(line.indent + 1, "a quoted statement", "none"))?;
        self.claim(&a.id)?;
        let formal = match a.take("formal") {
            Some((_, v)) => Some(parse_constraint(line, &v)?),
            None => None,
        };
        let tags = a.tags();
        let id = a.id.clone();
        let refinement = a.refinement;
        a.finish(line)?;
        self.nodes.insert(
            id.clone(),
            GoalNode {
                id: id.clone(),
                statement,
                kind: if req { NodeKind::Requirement } else { NodeKind::Goal },
                refinement,
                children: Vec::new(),
                tags,
                formal,
            },
        );
        self.attach(&parent, &id);
        if parent.is_none() {
            if self.root.is_none() {
                self.root = Some(id.clone());
            } else {
                self.top_goals.push(id.clone());
            }
        }
        Ok(Some(id))
    }

    fn leaf(&mut self, id: &str, statement: String, kind: NodeKind, tags: Vec<String>) {
        self.nodes.insert(
            id.to_string(),
            GoalNode {
                id: id.to_string(),
                statement,
                kind,
                refinement: Refinement::None,
                children: Vec::new(),
                tags,
                formal: None,
            },
        );
    }

    fn assume(&mut self, line: &Line<'_>, mut a: Attrs, parent: Option<String>) -> Result<Option<String>, GoalModelError> {
        if a.is_reference() {
            self.reference(parent, "assumption", a.id, line)?;
            return Ok(None);
        }
        let statement = a.statement.take().ok_or_else(|| line.error(line.indent + 1, "a quoted statement", "none"))?;
        self.claim(&a.id)?;
        let formal = match a.take("formal") {
            Some((_, v)) => parse_constraint(line, &v)?,
            None => return Err(line.error(line.indent + line.text.len() + 1, "formal=\"...\"", "end of line").into()),
        };
        let mut params = Params::new();
        if let Some((col, v)) = a.take("params") {
            for kv in v.split(',').filter(|s| !s.is_empty()) {
                let (k, val) = kv.split_once(':').ok_or_else(|| line.error(col, "key:value", kv))?;
                params.insert(k.to_string(), ParamValue::parse_compact(val));
            }
        }
        let active = match a.take("active") {
            Some((col, v)) => parse_bool(line, col, &v)?,
            None => true,
        };
        let tags = a.tags();
        if a.refinement != Refinement::None {
            return Err(line.error(line.indent + 1, "an unrefined leaf", "AND/OR").into());
        }
        let id = a.id.clone();
        a.finish(line)?;
        if parent.is_some() {
            self.leaf(&id, statement.clone(), NodeKind::AssumptionLeaf, tags.clone());
            self.attach(&parent, &id);
        }
        self.assumptions.insert(
            id.clone(),
            DomainAssumption {
                id,
                statement,
                formal,
                params,
                active,
                tags,
            },
        );
        Ok(None)
    }

    fn control(&mut self, line: &Line<'_>, mut a: Attrs, parent: Option<String>) -> Result<Option<String>, GoalModelError> {
        if a.is_reference() {
            self.reference(parent, "control", a.id, line)?;
            return Ok(None);
        }
        self.claim(&a.id)?;
        let constraint = match a.take("constraint") {
            Some((_, v)) => parse_constraint(line, &v)?,
            None => return Err(line.error(line.indent + line.text.len() + 1, "constraint=\"...\"", "end of line").into()),
        };
        let origin = match a.take("origin") {
            None => Origin::Designed,
            Some((_, v)) if v == "designed" => Origin::Designed,
            Some((_, v)) if v == "learned" => Origin::Learned,
            Some((_, v)) if v == "human-edited" => Origin::HumanEdited,
            Some((col, v)) => return Err(line.error(col, "designed, learned or human-edited", v).into()),
        };
        let sustainability = match a.take("sustainability") {
            None => Sustainability::Unknown,
            Some((_, v)) if v == "unknown" => Sustainability::Unknown,
            Some((_, v)) if v == "short-term" => Sustainability::ShortTerm,
            Some((_, v)) if v == "root-cause" => Sustainability::RootCause,
            Some((col, v)) => return Err(line.error(col, "short-term, root-cause or unknown", v).into()),
        };
        let enacted = match a.take("enacted") {
            Some((col, v)) => parse_bool(line, col, &v)?,
            None => true,
        };
        let learned_from = a
            .take("from")
            .map(|(_, v)| v.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect())
            .unwrap_or_default();
        let tags = a.tags();
        if a.refinement != Refinement::None {
            return Err(line.error(line.indent + 1, "an unrefined leaf", "AND/OR").into());
        }
        let rationale = a.statement.take().unwrap_or_default();
        let id = a.id.clone();
        a.finish(line)?;
        if parent.is_some() {
            self.leaf(&id, rationale.clone(), NodeKind::ControlLeaf, tags.clone());
            self.attach(&parent, &id);
        }
        self.controls.insert(
            id.clone(),
            SecurityControl {
                id,
                constraint,
                origin,
                sustainability,
                enacted,
                rationale,
                learned_from,
                tags,
            },
        );
        Ok(None)
    }

    fn vuln(&mut self, line: &Line<'_>, mut a: Attrs) -> Result<(), GoalModelError> {
        let device = a
            .take("device")
            .map(|(_, v)| v)
            .ok_or_else(|| line.error(line.indent + line.text.len() + 1, "device=<id>", "end of line"))?;
        let fix = a.take("fix").map(|(_, v)| v);
        let status = a.take("status").map(|(_, v)| v).unwrap_or_else(|| "open".into());
        let cve = a.id.clone();
        a.finish(line)?;
        if self.vulnerabilities.contains_key(&cve) {
            return Err(GoalModelError::DuplicateId(cve));
        }
        self.vulnerabilities.insert(cve.clone(), VulnAnnotation { cve, device, fix, status });
        Ok(())
    }

    fn resolve(mut self) -> Result<GoalModel, GoalModelError> {
        let root = self
            .root
            .clone()
            .ok_or_else(|| GoalModelError::Invalid("no root goal or requirement".into()))?;
        for (parent, slot, what, id, line) in std::mem::take(&mut self.refs) {
            let known = match what {
                "goal" => self.top_goals.contains(&id) || id == root,
                "assumption" => self.assumptions.contains_key(&id),
                _ => self.controls.contains_key(&id),
            };
            if !known {
                return Err(GoalModelError::DanglingReference { line, what, id });
            }
            match what {
                "assumption" => {
                    let a = &self.assumptions[&id];
                    if self.nodes.contains_key(&id) {
                        return Err(GoalModelError::Invalid(format!("`{id}` is placed twice")));
                    }
                    let (s, t) = (a.statement.clone(), a.tags.clone());
                    self.leaf(&id, s, NodeKind::AssumptionLeaf, t);
                }
                "control" => {
                    let c = &self.controls[&id];
                    if self.nodes.contains_key(&id) {
                        return Err(GoalModelError::Invalid(format!("`{id}` is placed twice")));
                    }
                    let (s, t) = (c.rationale.clone(), c.tags.clone());
                    self.leaf(&id, s, NodeKind::ControlLeaf, t);
                }
                _ => {}
            }
            self.nodes.get_mut(&parent).expect("parent exists").children[slot] = id;
        }
        let model = GoalModel {
            version: self.version,
            root,
            nodes: self.nodes,
            assumptions: self.assumptions,
            controls: self.controls,
            vulnerabilities: self.vulnerabilities,
        };
        model.validate()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn fixture_has_expected_shape() {
        let m = fixtures::smart_home_goals();
        let root = m.root();
        assert_eq!(root.statement, "Authorised access to the smart home");
        assert_eq!(root.refinement, Refinement::And);
        assert_eq!(root.children, vec!["lock_access", "wifi_access"]);
        for id in ["trusted_devices", "lock_tamper_proof", "outsider_entry", "tenant_locks", "password_strength"] {
            assert!(m.assumption(id).unwrap().active, "{id}");
        }
        assert_eq!(
            m.assumption("password_strength").unwrap().params["min_password_chars"],
            ParamValue::Int(8)
        );
        assert!(m.requirement().is_some());
    }

    #[test]
    fn single_requirement_is_a_valid_model() {
        let m = GoalModel::parse("req r \"Nothing bad happens\" tags=x").unwrap();
        assert_eq!(m.nodes.len(), 1);
        assert_eq!(m.root().kind, NodeKind::Requirement);
    }

    #[test]
    fn dangling_reference() {
        let err = GoalModel::parse("goal g \"G\" AND\n  assume missing").unwrap_err();
        assert_eq!(
            err,
            GoalModelError::DanglingReference {
                line: 2,
                what: "assumption",
                id: "missing".into()
            }
        );
    }

    #[test]
    fn cycle_through_goal_references() {
        let src = "goal r \"R\" AND\n  goal a\ngoal a \"A\" AND\n  goal b\ngoal b \"B\" AND\n  goal a";
        assert!(matches!(GoalModel::parse(src), Err(GoalModelError::Cycle(_))));
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = GoalModel::parse("goal g \"G\" AND\n  assume a \"A\" formal=\"never x\" bogus").unwrap_err();
        match err {
            GoalModelError::Syntax(e) => {
                assert_eq!(e.line, 2);
                assert_eq!(e.col, 33);
                assert_eq!(e.expected, "key=value");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let src = "goal g \"G\" AND\n  assume g \"A\" formal=\"never x\" tags=t";
        assert_eq!(GoalModel::parse(src), Err(GoalModelError::DuplicateId("g".into())));
    }

    #[test]
    fn unknown_param_in_formal_rejected() {
        let src = "goal g \"G\" AND\n  assume a \"A\" formal=\"never n(N) & N > $k\" tags=t";
        assert!(matches!(GoalModel::parse(src), Err(GoalModelError::UnknownParam { .. })));
    }

    #[test]
    fn fixture_round_trips() {
        let m = fixtures::smart_home_goals();
        let text = m.to_string();
        assert_eq!(GoalModel::parse(&text).unwrap(), m);
    }

    #[test]
    fn evolution_is_copy_on_write() {
        let mut h = ModelHistory::new(fixtures::smart_home_goals());
        let mut p = Params::new();
        p.insert("min_password_chars".into(), ParamValue::Int(12));
        h.evolve_assumption("password_strength", &p, "frequent new-device anomaly", Role::Engineer)
            .unwrap();
        assert_eq!(h.current().version, 1);
        assert_eq!(
            h.version(0).unwrap().assumptions["password_strength"].params["min_password_chars"],
            ParamValue::Int(8)
        );
        assert_eq!(
            h.current().assumptions["password_strength"].params["min_password_chars"],
            ParamValue::Int(12)
        );
        let r = &h.records()[0];
        assert_eq!(r.old["min_password_chars"], ParamValue::Int(8));
        assert_eq!(r.new["min_password_chars"], ParamValue::Int(12));
        assert_eq!(r.approver, Role::Engineer);
    }

    #[test]
    fn no_op_evolution_still_recorded() {
        let mut h = ModelHistory::new(fixtures::smart_home_goals());
        let mut p = Params::new();
        p.insert("min_password_chars".into(), ParamValue::Int(8));
        h.evolve_assumption("password_strength", &p, "check", Role::Engineer).unwrap();
        let (v0, v1) = (h.version(0).unwrap(), h.version(1).unwrap());
        assert_eq!(v0.assumptions, v1.assumptions);
        assert_eq!(h.records().len(), 1);
    }

    #[test]
    fn deactivation_keeps_the_assumption() {
        let m = fixtures::smart_home_goals();
        let mut p = Params::new();
        p.insert("active".into(), ParamValue::Bool(false));
        let m2 = m.evolve_assumption("trusted_devices", &p).unwrap();
        assert!(!m2.assumptions["trusted_devices"].active);
        assert!(m2.active_assumptions().all(|a| a.id != "trusted_devices"));
    }

    #[test]
    fn evolution_errors() {
        let m = fixtures::smart_home_goals();
        let mut p = Params::new();
        p.insert("min_password_chars".into(), ParamValue::Text("long".into()));
        assert!(matches!(
            m.evolve_assumption("password_strength", &p),
            Err(GoalModelError::TypeMismatch { .. })
        ));
        assert!(matches!(
            m.evolve_assumption("nope", &Params::new()),
            Err(GoalModelError::UnknownAssumption(_))
        ));
        let mut q = Params::new();
        q.insert("max_len".into(), ParamValue::Int(1));
        assert!(matches!(
            m.evolve_assumption("password_strength", &q),
            Err(GoalModelError::UnknownParam { .. })
        ));
    }

    #[test]
    fn learned_control_needs_source_trace() {
        let src = "goal g \"G\" AND\n  control c constraint=\"forbid x\" origin=learned tags=t";
        assert!(matches!(GoalModel::parse(src), Err(GoalModelError::Invalid(_))));
        let ok = "goal g \"G\" AND\n  control c constraint=\"forbid x\" origin=learned from=tr-1 tags=t";
        assert!(GoalModel::parse(ok).is_ok());
    }
}
