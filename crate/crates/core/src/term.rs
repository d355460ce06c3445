//! Ground terms, fluents and actions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::expr::{self, ExprError};

/// A constant: a symbol (agent, device, place) or an integer.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Term {
    Sym(String),
    Int(i64),
}

impl Term {
    pub fn sym(s: impl Into<String>) -> Self {
        Term::Sym(s.into())
    }

    pub fn as_sym(&self) -> Option<&str> {
        match self {
            Term::Sym(s) => Some(s),
            Term::Int(_) => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Term::Int(i) => Some(*i),
            Term::Sym(_) => None,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Sym(s) => f.write_str(s),
            Term::Int(i) => write!(f, "{i}"),
        }
    }
}

impl From<&str> for Term {
    fn from(s: &str) -> Self {
        Term::Sym(s.to_string())
    }
}

impl From<i64> for Term {
    fn from(i: i64) -> Self {
        Term::Int(i)
    }
}

fn write_atom(f: &mut fmt::Formatter<'_>, name: &str, args: &[Term]) -> fmt::Result {
    f.write_str(name)?;
    if !args.is_empty() {
        f.write_str("(")?;
        for (i, a) in args.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str(")")?;
    }
    Ok(())
}

/// A ground fluent such as `in(outsider,home)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fluent {
    pub name: String,
    pub args: Vec<Term>,
}

impl Fluent {
    pub fn new<I, T>(name: impl Into<String>, args: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: Into<Term>,
    {
        Fluent {
            name: name.into(),
            args: args.into_iter().map(Into::into).collect(),
        }
    }
}

impl fmt::Display for Fluent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_atom(f, &self.name, &self.args)
    }
}

impl FromStr for Fluent {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, args) = expr::parse_ground_atom(s)?;
        Ok(Fluent { name, args })
    }
}

/// A ground action occurrence such as `open(d1,sl)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Action {
    pub name: String,
    pub args: Vec<Term>,
}

impl Action {
    pub fn new<I, T>(name: impl Into<String>, args: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: Into<Term>,
    {
        Action {
            name: name.into(),
            args: args.into_iter().map(Into::into).collect(),
        }
    }

    pub fn arity(&self) -> usize {
        self.args.len()
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_atom(f, &self.name, &self.args)
    }
}

impl FromStr for Action {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, args) = expr::parse_ground_atom(s)?;
        Ok(Action { name, args })
    }
}

/// Serde helpers that write atoms in their text form, e.g. `open(d1,sl)`.
pub mod text_list {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(items: &[T], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(items.iter().map(ToString::to_string))
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<Vec<T>, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse().map_err(de::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_and_parse_agree() {
        let a: Action = "open(d1,sl)".parse().unwrap();
        assert_eq!(a, Action::new("open", ["d1", "sl"]));
        assert_eq!(a.to_string(), "open(d1,sl)");
        let f: Fluent = "password_chars(wifi, 8)".parse().unwrap();
        assert_eq!(f.args[1], Term::Int(8));
        assert_eq!(f.to_string(), "password_chars(wifi,8)");
    }

    #[test]
    fn variables_are_not_ground() {
        assert!("open(X,sl)".parse::<Action>().is_err());
    }
}
