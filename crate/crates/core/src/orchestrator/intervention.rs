//! Requests for human input and their answers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::goal_model::Role;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AnswerSchema {
    Boolean,
    Choice { options: Vec<String> },
    Integer { min: i64, max: i64 },
    Acknowledgement,
    FreeText,
}

impl AnswerSchema {
    pub fn name(&self) -> &'static str {
        match self {
            AnswerSchema::Boolean => "boolean",
            AnswerSchema::Choice { .. } => "choice",
            AnswerSchema::Integer { .. } => "integer",
            AnswerSchema::Acknowledgement => "acknowledgement",
            AnswerSchema::FreeText => "free_text",
        }
    }

    /// Checks `answer` against the schema.
    pub fn accepts(&self, answer: &Answer) -> Result<(), String> {
        match (self, answer) {
            (AnswerSchema::Boolean, Answer::Bool(_)) => Ok(()),
            (AnswerSchema::Acknowledgement, Answer::Bool(true)) => Ok(()),
            (AnswerSchema::Acknowledgement, Answer::Bool(false)) => Err("an acknowledgement must be true".into()),
            (AnswerSchema::Integer { min, max }, Answer::Int(i)) => {
                if i < min || i > max {
                    Err(format!("{i} is outside {min}..={max}"))
                } else {
                    Ok(())
                }
            }
            (AnswerSchema::Choice { options }, Answer::Text(s)) => {
                if options.contains(s) {
                    Ok(())
                } else {
                    Err(format!("`{s}` is not one of the options"))
                }
            }
            (AnswerSchema::FreeText, Answer::Text(s)) => {
                if s.trim().is_empty() {
                    Err("free text must not be empty".into())
                } else {
                    Ok(())
                }
            }
            (schema, a) => Err(format!("expected a {} answer, got {}", schema.name(), a.type_name())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Bool(bool),
    Int(i64),
    Text(String),
}

impl Answer {
    pub fn type_name(&self) -> &'static str {
        match self {
            Answer::Bool(_) => "boolean",
            Answer::Int(_) => "integer",
            Answer::Text(_) => "text",
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Answer::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Answer::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Answer::Text(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanation {
    /// What the system observed.
    pub observability: String,
    /// Why the question matters and what follows from each answer.
    pub transparency: String,
    /// Details of the device the question is about.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedforward: Option<String>,
    /// What a change to the controls would do, for engineers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intelligibility: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionState {
    Pending,
    Answered,
    Expired,
}

impl InterventionState {
    pub fn as_str(self) -> &'static str {
        match self {
            InterventionState::Pending => "pending",
            InterventionState::Answered => "answered",
            InterventionState::Expired => "expired",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionRequest {
    pub id: String,
    /// Stable key used by headless policies, e.g. `device_trust:d1`.
    pub key: String,
    pub role: Role,
    pub question: String,
    pub answer_schema: AnswerSchema,
    pub explanation: Explanation,
    pub anomaly: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<String>,
    /// Device the question is about, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
    /// The answer changes the enacted controls.
    pub modifies_controls: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub traces: Vec<String>,
    pub state: InterventionState,
    pub created_at: u64,
    pub expires_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answered_at: Option<u64>,
}

impl InterventionRequest {
    /// Topic part of the key (`device_trust` for `device_trust:d1`).
    pub fn topic(&self) -> &str {
        self.key.split(':').next().unwrap_or(&self.key)
    }

    /// Lists the explanation parts this request is missing.
    pub fn missing_explanation(&self) -> Vec<&'static str> {
        let e = &self.explanation;
        let mut out = Vec::new();
        if e.observability.trim().is_empty() {
            out.push("observability");
        }
        if e.transparency.trim().is_empty() {
            out.push("transparency");
        }
        let about_device = self.role == Role::Tenant && self.answer_schema == AnswerSchema::Boolean && self.device.is_some();
        if about_device && e.feedforward.as_deref().is_none_or(|s| s.trim().is_empty()) {
            out.push("feedforward");
        }
        if self.role == Role::Engineer
            && self.modifies_controls
            && e.intelligibility.as_deref().is_none_or(|s| s.trim().is_empty())
        {
            out.push("intelligibility");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnswerError {
    #[error("no intervention {0}")]
    Unknown(String),
    #[error("intervention {0} has already been answered")]
    AlreadyAnswered(String),
    #[error("intervention {0} has expired")]
    Expired(String),
    #[error("answer does not match the schema of {id}: {reason}")]
    SchemaMismatch { id: String, reason: String },
}
