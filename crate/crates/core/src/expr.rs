//! Constraint expressions: forbid/require rules, state filters and guards.
//!
//! Textual syntax:
//!
//! ```text
//! forbid open(X,sl)@T when net_device(X) & X = d1 & T in 0..4
//! require close(sl) after exit(tenant,home)
//! never did(enter(outsider,home)) & !in(tenant,home)
//! ```
//!
//! Identifiers starting with an uppercase letter are variables, `_` is a
//! wildcard, `$name` refers to a parameter of the owning domain assumption.
//! Guards combine fact literals, `did(..)` (the action just taken),
//! comparisons and integer ranges with `!`, `&` and `|` (in decreasing
//! precedence).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::term::{Action, Fluent, Term};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("syntax error at offset {pos}: expected {expected}, found {found}")]
    Syntax {
        pos: usize,
        expected: String,
        found: String,
    },
    #[error("variable {0} is not bound by the action pattern or a positive literal")]
    Unbound(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("unbound variable {0}")]
    Unbound(String),
    #[error("unknown parameter ${0}")]
    UnknownParam(String),
    #[error("ordered comparison on non-integer value {0}")]
    NotNumeric(String),
}

/// Parameter values carried by domain assumptions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Bool(bool),
    Text(String),
}

impl ParamValue {
    pub fn type_name(&self) -> &'static str {
        match self {
            ParamValue::Int(_) => "integer",
            ParamValue::Bool(_) => "boolean",
            ParamValue::Text(_) => "text",
        }
    }

    pub fn same_type(&self, other: &ParamValue) -> bool {
        self.type_name() == other.type_name()
    }

    fn as_term(&self) -> Term {
        match self {
            ParamValue::Int(i) => Term::Int(*i),
            ParamValue::Bool(b) => Term::Sym(b.to_string()),
            ParamValue::Text(s) => Term::Sym(s.clone()),
        }
    }

    /// Parses the compact `k:v` value form used by the model files.
    pub fn parse_compact(s: &str) -> ParamValue {
        if let Ok(i) = s.parse::<i64>() {
            ParamValue::Int(i)
        } else if s == "true" || s == "false" {
            ParamValue::Bool(s == "true")
        } else {
            ParamValue::Text(s.to_string())
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(i) => write!(f, "{i}"),
            ParamValue::Bool(b) => write!(f, "{b}"),
            ParamValue::Text(s) => f.write_str(s),
        }
    }
}

pub type Params = BTreeMap<String, ParamValue>;
pub type Bindings = BTreeMap<String, Term>;

/// An argument position in a pattern.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PTerm {
    Var(String),
    Const(Term),
    Wild,
}

impl fmt::Display for PTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PTerm::Var(v) => f.write_str(v),
            PTerm::Const(t) => write!(f, "{t}"),
            PTerm::Wild => f.write_str("_"),
        }
    }
}

/// `name(arg, ...)` with variables, constants or wildcards.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pattern {
    pub name: String,
    pub args: Vec<PTerm>,
}

impl Pattern {
    pub fn new(name: impl Into<String>, args: Vec<PTerm>) -> Self {
        Pattern {
            name: name.into(),
            args,
        }
    }

    /// The pattern that matches exactly this ground action.
    pub fn exact(action: &Action) -> Self {
        Pattern {
            name: action.name.clone(),
            args: action.args.iter().cloned().map(PTerm::Const).collect(),
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = &str> {
        self.args.iter().filter_map(|a| match a {
            PTerm::Var(v) => Some(v.as_str()),
            _ => None,
        })
    }

    /// Unifies the pattern with ground arguments under `env`.
    pub fn unify(&self, name: &str, args: &[Term], env: &Bindings) -> Option<Bindings> {
        if self.name != name || self.args.len() != args.len() {
            return None;
        }
        let mut out = env.clone();
        for (p, t) in self.args.iter().zip(args) {
            match p {
                PTerm::Wild => {}
                PTerm::Const(c) => {
                    if c != t {
                        return None;
                    }
                }
                PTerm::Var(v) => match out.get(v) {
                    Some(bound) if bound != t => return None,
                    Some(_) => {}
                    None => {
                        out.insert(v.clone(), t.clone());
                    }
                },
            }
        }
        Some(out)
    }

    pub fn matches_action(&self, action: &Action) -> Option<Bindings> {
        self.unify(&action.name, &action.args, &Bindings::new())
    }

    /// Substitutes bound variables; returns a ground fluent if fully bound.
    pub fn ground(&self, env: &Bindings) -> Option<Fluent> {
        let mut args = Vec::with_capacity(self.args.len());
        for a in &self.args {
            match a {
                PTerm::Const(t) => args.push(t.clone()),
                PTerm::Var(v) => args.push(env.get(v)?.clone()),
                PTerm::Wild => return None,
            }
        }
        Some(Fluent {
            name: self.name.clone(),
            args,
        })
    }

    pub fn is_ground(&self) -> bool {
        self.args.iter().all(|a| matches!(a, PTerm::Const(_)))
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)?;
        if !self.args.is_empty() {
            f.write_str("(")?;
            for (i, a) in self.args.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{a}")?;
            }
            f.write_str(")")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    Term(PTerm),
    Param(String),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Term(t) => write!(f, "{t}"),
            Operand::Param(p) => write!(f, "${p}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Guard {
    Bool(bool),
    Fact(Pattern),
    /// The action that produced the current state.
    Did(Pattern),
    Not(Box<Guard>),
    And(Vec<Guard>),
    Or(Vec<Guard>),
    Cmp {
        lhs: Operand,
        op: CmpOp,
        rhs: Operand,
    },
    Range {
        value: Operand,
        lo: i64,
        hi: i64,
    },
}

impl Guard {
    pub fn and(parts: Vec<Guard>) -> Guard {
        let mut flat = Vec::new();
        for p in parts {
            match p {
                Guard::Bool(true) => {}
                Guard::And(inner) => flat.extend(inner),
                other => flat.push(other),
            }
        }
        match flat.len() {
            0 => Guard::Bool(true),
            1 => flat.pop().unwrap(),
            _ => Guard::And(flat),
        }
    }

    pub fn not(g: Guard) -> Guard {
        Guard::Not(Box::new(g))
    }

    pub fn fact(name: &str, args: Vec<PTerm>) -> Guard {
        Guard::Fact(Pattern::new(name, args))
    }

    pub fn var_eq(var: &str, value: Term) -> Guard {
        Guard::Cmp {
            lhs: Operand::Term(PTerm::Var(var.to_string())),
            op: CmpOp::Eq,
            rhs: Operand::Term(PTerm::Const(value)),
        }
    }

    fn collect_params(&self, out: &mut BTreeSet<String>) {
        match self {
            Guard::Bool(_) | Guard::Fact(_) | Guard::Did(_) => {}
            Guard::Not(g) => g.collect_params(out),
            Guard::And(gs) | Guard::Or(gs) => gs.iter().for_each(|g| g.collect_params(out)),
            Guard::Cmp { lhs, rhs, .. } => {
                for o in [lhs, rhs] {
                    if let Operand::Param(p) = o {
                        out.insert(p.clone());
                    }
                }
            }
            Guard::Range { value, .. } => {
                if let Operand::Param(p) = value {
                    out.insert(p.clone());
                }
            }
        }
    }

    /// Drops integer range and ordered comparisons on `var`.
    pub fn without_var_bounds(&self, var: &str) -> Guard {
        let mentions = |o: &Operand| matches!(o, Operand::Term(PTerm::Var(v)) if v == var);
        match self {
            Guard::Range { value, .. } if mentions(value) => Guard::Bool(true),
            Guard::Cmp { lhs, rhs, .. } if mentions(lhs) || mentions(rhs) => Guard::Bool(true),
            Guard::And(gs) => Guard::and(gs.iter().map(|g| g.without_var_bounds(var)).collect()),
            Guard::Or(gs) => Guard::Or(gs.iter().map(|g| g.without_var_bounds(var)).collect()),
            Guard::Not(g) => Guard::not(g.without_var_bounds(var)),
            other => other.clone(),
        }
    }

    fn check_bound(&self, bound: &BTreeSet<String>) -> Result<(), ExprError> {
        let need = |o: &Operand| -> Result<(), ExprError> {
            match o {
                Operand::Term(PTerm::Var(v)) if !bound.contains(v) => {
                    Err(ExprError::Unbound(v.clone()))
                }
                _ => Ok(()),
            }
        };
        match self {
            Guard::Bool(_) | Guard::Fact(_) | Guard::Did(_) => Ok(()),
            Guard::Not(g) => g.check_bound(bound),
            Guard::Or(gs) => gs.iter().try_for_each(|g| g.check_bound(bound)),
            Guard::And(gs) => {
                let mut local = bound.clone();
                for g in gs {
                    if let Guard::Fact(p) | Guard::Did(p) = g {
                        local.extend(p.vars().map(str::to_string));
                    }
                }
                gs.iter().try_for_each(|g| g.check_bound(&local))
            }
            Guard::Cmp { lhs, rhs, .. } => {
                need(lhs)?;
                need(rhs)
            }
            Guard::Range { value, .. } => need(value),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Guard::Or(_) => 0,
            Guard::And(_) => 1,
            _ => 2,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        let paren = self.precedence() < min;
        if paren {
            f.write_str("(")?;
        }
        match self {
            Guard::Bool(b) => write!(f, "{b}")?,
            Guard::Fact(p) => write!(f, "{p}")?,
            Guard::Did(p) => write!(f, "did({p})")?,
            Guard::Not(g) => {
                f.write_str("!")?;
                g.fmt_prec(f, 2)?;
            }
            Guard::And(gs) => {
                for (i, g) in gs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" & ")?;
                    }
                    g.fmt_prec(f, 2)?;
                }
            }
            Guard::Or(gs) => {
                for (i, g) in gs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" | ")?;
                    }
                    g.fmt_prec(f, 1)?;
                }
            }
            Guard::Cmp { lhs, op, rhs } => write!(f, "{lhs} {} {rhs}", op.symbol())?,
            Guard::Range { value, lo, hi } => write!(f, "{value} in {lo}..{hi}")?,
        }
        if paren {
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Guard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

impl FromStr for Guard {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = Parser::new(s)?;
        let g = p.guard()?;
        p.expect_end()?;
        Ok(g)
    }
}

/// A rule compiled into the transition relation, or a requirement.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Constraint {
    /// No action matching `action` may occur while `guard` holds in the
    /// pre-state; `time` binds the occurrence time.
    Forbid {
        action: Pattern,
        time: Option<String>,
        guard: Guard,
    },
    /// Right after an action matching `after`, the next action must match
    /// `action`.
    Require {
        action: Pattern,
        after: Pattern,
        guard: Guard,
    },
    /// States (with the action that produced them) satisfying the guard are
    /// excluded; as a requirement, the guard is the violation condition.
    Never(Guard),
}

impl Constraint {
    pub fn forbid(action: Pattern, guard: Guard) -> Self {
        Constraint::Forbid {
            action,
            time: None,
            guard,
        }
    }

    /// Every parameter name referenced through `$name`.
    pub fn params(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        match self {
            Constraint::Forbid { guard, .. } | Constraint::Require { guard, .. } => {
                guard.collect_params(&mut out)
            }
            Constraint::Never(g) => g.collect_params(&mut out),
        }
        out
    }

    /// Checks that every variable is bound by a pattern or a positive literal.
    pub fn validate(&self) -> Result<(), ExprError> {
        match self {
            Constraint::Forbid {
                action,
                time,
                guard,
            } => {
                let mut bound: BTreeSet<String> = action.vars().map(str::to_string).collect();
                bound.extend(time.iter().cloned());
                guard.check_bound(&bound)
            }
            Constraint::Require {
                action,
                after,
                guard,
            } => {
                let bound = action.vars().chain(after.vars()).map(str::to_string).collect();
                guard.check_bound(&bound)
            }
            Constraint::Never(g) => g.check_bound(&BTreeSet::new()),
        }
    }

    pub fn guard(&self) -> &Guard {
        match self {
            Constraint::Forbid { guard, .. } | Constraint::Require { guard, .. } => guard,
            Constraint::Never(g) => g,
        }
    }

    /// The same rule with bounds on its occurrence-time variable removed.
    pub fn without_time_bounds(&self) -> Constraint {
        match self {
            Constraint::Forbid {
                action,
                time: Some(t),
                guard,
            } => Constraint::Forbid {
                action: action.clone(),
                time: None,
                guard: guard.without_var_bounds(t),
            },
            other => other.clone(),
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::Forbid {
                action,
                time,
                guard,
            } => {
                write!(f, "forbid {action}")?;
                if let Some(t) = time {
                    write!(f, "@{t}")?;
                }
                if *guard != Guard::Bool(true) {
                    write!(f, " when {guard}")?;
                }
                Ok(())
            }
            Constraint::Require {
                action,
                after,
                guard,
            } => {
                write!(f, "require {action} after {after}")?;
                if *guard != Guard::Bool(true) {
                    write!(f, " when {guard}")?;
                }
                Ok(())
            }
            Constraint::Never(g) => write!(f, "never {g}"),
        }
    }
}

impl FromStr for Constraint {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = Parser::new(s)?;
        let c = p.constraint()?;
        p.expect_end()?;
        c.validate()?;
        Ok(c)
    }
}

impl Serialize for Constraint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Constraint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses a ground atom such as `in(tenant,home)`.
pub fn parse_ground_atom(s: &str) -> Result<(String, Vec<Term>), ExprError> {
    let mut p = Parser::new(s)?;
    let pat = p.pattern()?;
    p.expect_end()?;
    let mut args = Vec::new();
    for a in pat.args {
        match a {
            PTerm::Const(t) => args.push(t),
            other => {
                return Err(ExprError::Syntax {
                    pos: 0,
                    expected: "constant argument".into(),
                    found: other.to_string(),
                })
            }
        }
    }
    Ok((pat.name, args))
}

// ---------------------------------------------------------------------------
// evaluation

/// What a guard is evaluated against.
#[derive(Clone, Copy)]
pub struct EvalCtx<'a> {
    pub facts: &'a BTreeSet<Fluent>,
    /// Rigid facts (agent kinds, trust marks) that hold in every state.
    pub statics: &'a BTreeSet<Fluent>,
    pub last: Option<&'a Action>,
    pub params: Option<&'a Params>,
}

fn facts_named<'a>(set: &'a BTreeSet<Fluent>, name: &'a str) -> impl Iterator<Item = &'a Fluent> {
    let start = Fluent {
        name: name.to_string(),
        args: Vec::new(),
    };
    set.range(start..).take_while(move |f| f.name == name)
}

impl<'a> EvalCtx<'a> {
    fn resolve(&self, o: &Operand, env: &Bindings) -> Result<Term, EvalError> {
        match o {
            Operand::Term(PTerm::Const(t)) => Ok(t.clone()),
            Operand::Term(PTerm::Var(v)) => {
                env.get(v).cloned().ok_or_else(|| EvalError::Unbound(v.clone()))
            }
            Operand::Term(PTerm::Wild) => Err(EvalError::Unbound("_".into())),
            Operand::Param(p) => self
                .params
                .and_then(|ps| ps.get(p))
                .map(ParamValue::as_term)
                .ok_or_else(|| EvalError::UnknownParam(p.clone())),
        }
    }

    /// All extensions of `env` under which the guard holds.
    pub fn solutions(&self, g: &Guard, env: &Bindings) -> Result<Vec<Bindings>, EvalError> {
        match g {
            Guard::Bool(true) => Ok(vec![env.clone()]),
            Guard::Bool(false) => Ok(Vec::new()),
            Guard::Fact(p) => Ok(facts_named(self.facts, &p.name)
                .chain(facts_named(self.statics, &p.name))
                .filter_map(|f| p.unify(&f.name, &f.args, env))
                .collect()),
            Guard::Did(p) => Ok(self
                .last
                .and_then(|a| p.unify(&a.name, &a.args, env))
                .into_iter()
                .collect()),
            Guard::Not(inner) => {
                if self.holds_in(inner, env)? {
                    Ok(Vec::new())
                } else {
                    Ok(vec![env.clone()])
                }
            }
            Guard::Or(gs) => {
                let mut out = Vec::new();
                for g in gs {
                    out.extend(self.solutions(g, env)?);
                }
                Ok(out)
            }
            Guard::And(gs) => {
                // binders first so comparisons see their variables
                let (binders, rest): (Vec<&Guard>, Vec<&Guard>) = gs
                    .iter()
                    .partition(|g| matches!(g, Guard::Fact(_) | Guard::Did(_)));
                let mut envs = vec![env.clone()];
                for g in binders.into_iter().chain(rest) {
                    let mut next = Vec::new();
                    for e in &envs {
                        next.extend(self.solutions(g, e)?);
                    }
                    if next.is_empty() {
                        return Ok(next);
                    }
                    envs = next;
                }
                Ok(envs)
            }
            Guard::Cmp { lhs, op, rhs } => {
                let l = self.resolve(lhs, env)?;
                let r = self.resolve(rhs, env)?;
                let ok = match op {
                    CmpOp::Eq => l == r,
                    CmpOp::Ne => l != r,
                    _ => {
                        let li = l.as_int().ok_or_else(|| EvalError::NotNumeric(l.to_string()))?;
                        let ri = r.as_int().ok_or_else(|| EvalError::NotNumeric(r.to_string()))?;
                        match op {
                            CmpOp::Lt => li < ri,
                            CmpOp::Le => li <= ri,
                            CmpOp::Gt => li > ri,
                            CmpOp::Ge => li >= ri,
                            CmpOp::Eq | CmpOp::Ne => unreachable!(),
                        }
                    }
                };
                Ok(if ok { vec![env.clone()] } else { Vec::new() })
            }
            Guard::Range { value, lo, hi } => {
                let v = self.resolve(value, env)?;
                let i = v.as_int().ok_or_else(|| EvalError::NotNumeric(v.to_string()))?;
                Ok(if (*lo..=*hi).contains(&i) {
                    vec![env.clone()]
                } else {
                    Vec::new()
                })
            }
        }
    }

    pub fn holds_in(&self, g: &Guard, env: &Bindings) -> Result<bool, EvalError> {
        Ok(!self.solutions(g, env)?.is_empty())
    }

    pub fn holds(&self, g: &Guard) -> Result<bool, EvalError> {
        self.holds_in(g, &Bindings::new())
    }
}

// ---------------------------------------------------------------------------
// parsing

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Var(String),
    Wild,
    Int(i64),
    Param(String),
    LParen,
    RParen,
    Comma,
    At,
    Amp,
    Pipe,
    Bang,
    Op(CmpOp),
    DotDot,
    End,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) | Tok::Var(s) => write!(f, "`{s}`"),
            Tok::Wild => f.write_str("`_`"),
            Tok::Int(i) => write!(f, "`{i}`"),
            Tok::Param(p) => write!(f, "`${p}`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::At => f.write_str("`@`"),
            Tok::Amp => f.write_str("`&`"),
            Tok::Pipe => f.write_str("`|`"),
            Tok::Bang => f.write_str("`!`"),
            Tok::Op(o) => write!(f, "`{}`", o.symbol()),
            Tok::DotDot => f.write_str("`..`"),
            Tok::End => f.write_str("end of input"),
        }
    }
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-'
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, ExprError> {
    let chars: Vec<(usize, char)> = src.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |pos: usize, found: char| ExprError::Syntax {
        pos,
        expected: "a token".into(),
        found: format!("`{found}`"),
    };
    while i < chars.len() {
        let (pos, c) = chars[i];
        let peek = chars.get(i + 1).map(|&(_, c)| c);
        match c {
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            '(' => out.push((pos, Tok::LParen)),
            ')' => out.push((pos, Tok::RParen)),
            ',' => out.push((pos, Tok::Comma)),
            '@' => out.push((pos, Tok::At)),
            '&' => out.push((pos, Tok::Amp)),
            '|' => out.push((pos, Tok::Pipe)),
            '=' => out.push((pos, Tok::Op(CmpOp::Eq))),
            '!' if peek == Some('=') => {
                out.push((pos, Tok::Op(CmpOp::Ne)));
                i += 1;
            }
            '!' => out.push((pos, Tok::Bang)),
            '<' if peek == Some('=') => {
                out.push((pos, Tok::Op(CmpOp::Le)));
                i += 1;
            }
            '<' => out.push((pos, Tok::Op(CmpOp::Lt))),
            '>' if peek == Some('=') => {
                out.push((pos, Tok::Op(CmpOp::Ge)));
                i += 1;
            }
            '>' => out.push((pos, Tok::Op(CmpOp::Gt))),
            '.' if peek == Some('.') => {
                out.push((pos, Tok::DotDot));
                i += 1;
            }
            '$' => {
                let mut j = i + 1;
                while j < chars.len() && is_ident_char(chars[j].1) {
                    j += 1;
                }
                if j == i + 1 {
                    return Err(err(pos, c));
                }
                let name: String = chars[i + 1..j].iter().map(|&(_, c)| c).collect();
                out.push((pos, Tok::Param(name)));
                i = j;
                continue;
            }
            c if c.is_ascii_digit() || (c == '-' && peek.is_some_and(|p| p.is_ascii_digit())) => {
                let mut j = i + 1;
                while j < chars.len() && chars[j].1.is_ascii_digit() {
                    j += 1;
                }
                let text: String = chars[i..j].iter().map(|&(_, c)| c).collect();
                let v = text.parse().map_err(|_| ExprError::Syntax {
                    pos,
                    expected: "an integer".into(),
                    found: text.clone(),
                })?;
                out.push((pos, Tok::Int(v)));
                i = j;
                continue;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut j = i + 1;
                while j < chars.len() && (chars[j].1.is_ascii_alphanumeric() || chars[j].1 == '_')
                {
                    j += 1;
                }
                let word: String = chars[i..j].iter().map(|&(_, c)| c).collect();
                let tok = if word == "_" {
                    Tok::Wild
                } else if word.starts_with(|c: char| c.is_ascii_uppercase() || c == '_') {
                    Tok::Var(word)
                } else {
                    Tok::Ident(word)
                };
                out.push((pos, tok));
                i = j;
                continue;
            }
            other => return Err(err(pos, other)),
        }
        i += 1;
    }
    out.push((src.len(), Tok::End));
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
}

impl Parser {
    fn new(src: &str) -> Result<Self, ExprError> {
        Ok(Parser {
            toks: lex(src)?,
            at: 0,
        })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.at].1
    }

    fn peek2(&self) -> &Tok {
        self.toks.get(self.at + 1).map(|t| &t.1).unwrap_or(&Tok::End)
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].1.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn fail<T>(&self, expected: &str) -> Result<T, ExprError> {
        let (pos, tok) = &self.toks[self.at];
        Err(ExprError::Syntax {
            pos: *pos,
            expected: expected.to_string(),
            found: tok.to_string(),
        })
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.peek() == t {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, t: Tok, what: &str) -> Result<(), ExprError> {
        if self.eat(&t) {
            Ok(())
        } else {
            self.fail(what)
        }
    }

    fn keyword(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Tok::Ident(s) if s == kw) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_end(&self) -> Result<(), ExprError> {
        if *self.peek() == Tok::End {
            Ok(())
        } else {
            self.fail("end of expression")
        }
    }

    fn constraint(&mut self) -> Result<Constraint, ExprError> {
        if self.keyword("forbid") {
            let action = self.pattern()?;
            let time = if self.eat(&Tok::At) {
                match self.bump() {
                    Tok::Var(v) => Some(v),
                    _ => {
                        self.at -= 1;
                        return self.fail("a time variable");
                    }
                }
            } else {
                None
            };
            let guard = self.when()?;
            Ok(Constraint::Forbid {
                action,
                time,
                guard,
            })
        } else if self.keyword("require") {
            let action = self.pattern()?;
            if !self.keyword("after") {
                return self.fail("`after`");
            }
            let after = self.pattern()?;
            let guard = self.when()?;
            Ok(Constraint::Require {
                action,
                after,
                guard,
            })
        } else if self.keyword("never") {
            Ok(Constraint::Never(self.guard()?))
        } else {
            self.fail("`forbid`, `require` or `never`")
        }
    }

    fn when(&mut self) -> Result<Guard, ExprError> {
        if self.keyword("when") {
            self.guard()
        } else {
            Ok(Guard::Bool(true))
        }
    }

    fn pattern(&mut self) -> Result<Pattern, ExprError> {
        let name = match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                s
            }
            _ => return self.fail("an action or fluent name"),
        };
        let mut args = Vec::new();
        if self.eat(&Tok::LParen) {
            loop {
                let arg = match self.peek().clone() {
                    Tok::Var(v) => PTerm::Var(v),
                    Tok::Wild => PTerm::Wild,
                    Tok::Ident(s) => PTerm::Const(Term::Sym(s)),
                    Tok::Int(i) => PTerm::Const(Term::Int(i)),
                    _ => return self.fail("an argument"),
                };
                self.bump();
                args.push(arg);
                if self.eat(&Tok::Comma) {
                    continue;
                }
                self.expect(Tok::RParen, "`,` or `)`")?;
                break;
            }
        }
        Ok(Pattern { name, args })
    }

    fn guard(&mut self) -> Result<Guard, ExprError> {
        let mut parts = vec![self.conj()?];
        while self.eat(&Tok::Pipe) {
            parts.push(self.conj()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Guard::Or(parts)
        })
    }

    fn conj(&mut self) -> Result<Guard, ExprError> {
        let mut parts = vec![self.unary()?];
        while self.eat(&Tok::Amp) {
            parts.push(self.unary()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Guard::And(parts)
        })
    }

    fn unary(&mut self) -> Result<Guard, ExprError> {
        if self.eat(&Tok::Bang) {
            return Ok(Guard::not(self.unary()?));
        }
        if self.eat(&Tok::LParen) {
            let g = self.guard()?;
            self.expect(Tok::RParen, "`)`")?;
            return Ok(g);
        }
        match (self.peek().clone(), self.peek2().clone()) {
            (Tok::Ident(s), _) if s == "true" => {
                self.bump();
                Ok(Guard::Bool(true))
            }
            (Tok::Ident(s), _) if s == "false" => {
                self.bump();
                Ok(Guard::Bool(false))
            }
            (Tok::Ident(s), Tok::LParen) if s == "did" => {
                self.bump();
                self.bump();
                let p = self.pattern()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(Guard::Did(p))
            }
            (Tok::Ident(_), Tok::LParen) => Ok(Guard::Fact(self.pattern()?)),
            (Tok::Ident(_), Tok::Op(_)) | (Tok::Ident(_), Tok::Ident(_)) => self.comparison(),
            (Tok::Ident(_), _) => Ok(Guard::Fact(self.pattern()?)),
            (Tok::Var(_), _) | (Tok::Int(_), _) | (Tok::Param(_), _) => self.comparison(),
            _ => self.fail("a literal, comparison or `(`"),
        }
    }

    fn operand(&mut self) -> Result<Operand, ExprError> {
        let o = match self.peek().clone() {
            Tok::Var(v) => Operand::Term(PTerm::Var(v)),
            Tok::Ident(s) => Operand::Term(PTerm::Const(Term::Sym(s))),
            Tok::Int(i) => Operand::Term(PTerm::Const(Term::Int(i))),
            Tok::Param(p) => Operand::Param(p),
            _ => return self.fail("an operand"),
        };
        self.bump();
        Ok(o)
    }

    fn int(&mut self) -> Result<i64, ExprError> {
        match self.peek().clone() {
            Tok::Int(i) => {
                self.bump();
                Ok(i)
            }
            _ => self.fail("an integer"),
        }
    }

    fn comparison(&mut self) -> Result<Guard, ExprError> {
        let lhs = self.operand()?;
        if self.keyword("in") {
            let lo = self.int()?;
            self.expect(Tok::DotDot, "`..`")?;
            let hi = self.int()?;
            return Ok(Guard::Range { value: lhs, lo, hi });
        }
        let op = match self.peek().clone() {
            Tok::Op(op) => {
                self.bump();
                op
            }
            _ => return self.fail("a comparison operator or `in`"),
        };
        let rhs = self.operand()?;
        Ok(Guard::Cmp { lhs, op, rhs })
    }
}
