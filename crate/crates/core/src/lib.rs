//! Adaptive security for a simulated smart home.
//!
//! A MAPE loop monitors device events, searches the action domain for
//! traces that violate the top-level security requirement, learns
//! controls that eliminate them and asks humans when it cannot decide.

pub mod config;
pub mod domain;
pub mod dsl;
pub mod expr;
pub mod fixtures;
pub mod goal_model;
pub mod learner;
pub mod monitor;
pub mod orchestrator;
pub mod problem;
pub mod search;
pub mod sim;
pub mod term;

pub use domain::{ActionDomain, State};
pub use expr::{Constraint, Guard};
pub use term::{Action, Fluent, Term};
