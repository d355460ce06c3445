//! Append-only JSON Lines persistence.
//!
//! `commands.jsonl` is the source of truth and is replayed on startup.
//! `events.jsonl`, `answers.jsonl` and `audit.jsonl` are derived from the
//! running simulation and only ever grow until a new scenario starts.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use sas_core::orchestrator::{Answer, AuditRecord};
use sas_core::sim::Simulation;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path} line {line}: {source}")]
    Corrupt {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
}

/// A state-changing request, as journaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    Start {
        name: String,
        interactive: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Advance {
        minutes: u64,
    },
    Answer {
        id: String,
        answer: Answer,
    },
}

/// One human answer as recorded in `answers.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerLine {
    pub audit_seq: u64,
    pub time: u64,
    pub intervention: String,
    pub answer: Answer,
}

const COMMANDS: &str = "commands.jsonl";
const EVENTS: &str = "events.jsonl";
const ANSWERS: &str = "answers.jsonl";
const AUDIT: &str = "audit.jsonl";

pub struct Store {
    dir: PathBuf,
    events: usize,
    answers: usize,
    audit: usize,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Complete lines only: a trailing line without a newline is a torn write.
fn complete_lines(path: &Path) -> Result<Vec<String>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    let mut reader = BufReader::new(file);
    loop {
        let mut line = String::new();
        let n = reader.read_line(&mut line).map_err(io_err(path))?;
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        out.push(line.trim_end().to_string());
    }
    Ok(out)
}

pub fn answer_lines(audit: &[AuditRecord]) -> Vec<AnswerLine> {
    audit
        .iter()
        .flat_map(|r| {
            r.answers.iter().map(|(id, a)| AnswerLine {
                audit_seq: r.seq,
                time: r.time,
                intervention: id.clone(),
                answer: a.clone(),
            })
        })
        .collect()
}

/// Cuts a torn trailing line so later appends start on a fresh line.
fn repair(path: &Path) -> Result<(), StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if keep < bytes.len() {
        let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        f.set_len(keep as u64).map_err(io_err(path))?;
    }
    Ok(())
}

impl Store {
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for name in [COMMANDS, EVENTS, ANSWERS, AUDIT] {
            repair(&dir.join(name))?;
        }
        let count = |name: &str| complete_lines(&dir.join(name)).map(|l| l.len());
        Ok(Store {
            dir: dir.to_path_buf(),
            events: count(EVENTS)?,
            answers: count(ANSWERS)?,
            audit: count(AUDIT)?,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn commands(&self) -> Result<Vec<Command>, StoreError> {
        let path = self.dir.join(COMMANDS);
        complete_lines(&path)?
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|source| StoreError::Corrupt {
                    path: path.display().to_string(),
                    line: i + 1,
                    source,
                })
            })
            .collect()
    }

    fn append<T: Serialize>(&self, name: &str, items: &[T]) -> Result<(), StoreError> {
        if items.is_empty() {
            return Ok(());
        }
        let path = self.dir.join(name);
        let mut buf = String::new();
        for it in items {
            buf.push_str(&serde_json::to_string(it).expect("journal records serialize"));
            buf.push('\n');
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        f.write_all(buf.as_bytes()).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))
    }

    pub fn record(&self, cmd: &Command) -> Result<(), StoreError> {
        self.append(COMMANDS, std::slice::from_ref(cmd))
    }

    /// Empties every journal; used when a new scenario starts.
    pub fn reset(&mut self) -> Result<(), StoreError> {
        for name in [COMMANDS, EVENTS, ANSWERS, AUDIT] {
            let path = self.dir.join(name);
            File::create(&path).map_err(io_err(&path))?;
        }
        self.events = 0;
        self.answers = 0;
        self.audit = 0;
        Ok(())
    }

    /// Appends whatever the simulation produced since the last sync.
    pub fn sync(&mut self, sim: &Simulation) -> Result<(), StoreError> {
        let events = sim.events();
        let audit = sim.orchestrator().audit();
        let answers = answer_lines(audit);
        self.append(EVENTS, events.get(self.events..).unwrap_or_default())?;
        self.append(ANSWERS, answers.get(self.answers..).unwrap_or_default())?;
        self.append(AUDIT, audit.get(self.audit..).unwrap_or_default())?;
        self.events = self.events.max(events.len());
        self.answers = self.answers.max(answers.len());
        self.audit = self.audit.max(audit.len());
        Ok(())
    }
}
