//! Reading human answers from a terminal.

use std::io::{BufRead, Write};

use sas_core::orchestrator::{Answer, AnswerSchema, InterventionRequest};

/// Interprets one line of input against the request's answer schema.
pub fn parse_answer(schema: &AnswerSchema, line: &str) -> Result<Answer, String> {
    let line = line.trim();
    let answer = match schema {
        AnswerSchema::Boolean | AnswerSchema::Acknowledgement => match line.to_ascii_lowercase().as_str() {
            "y" | "yes" | "true" | "trusted" | "ok" => Answer::Bool(true),
            "n" | "no" | "false" | "untrusted" => Answer::Bool(false),
            _ => return Err(format!("expected yes or no, got {line:?}")),
        },
        AnswerSchema::Integer { .. } => Answer::Int(line.parse().map_err(|_| format!("expected a number, got {line:?}"))?),
        AnswerSchema::Choice { options } => match line.parse::<usize>() {
            Ok(i) if (1..=options.len()).contains(&i) => Answer::Text(options[i - 1].clone()),
            _ => Answer::Text(line.to_string()),
        },
        AnswerSchema::FreeText => Answer::Text(line.to_string()),
    };
    schema.accepts(&answer)?;
    Ok(answer)
}

pub fn describe(req: &InterventionRequest) -> String {
    let mut out = format!("[{}] {} asks: {}\n", req.id, req.role, req.question);
    out.push_str(&format!("  observed: {}\n", req.explanation.observability));
    out.push_str(&format!("  why: {}\n", req.explanation.transparency));
    if let Some(f) = &req.explanation.feedforward {
        out.push_str(&format!("  device: {f}\n"));
    }
    if let Some(i) = &req.explanation.intelligibility {
        out.push_str(&format!("  effect: {i}\n"));
    }
    match &req.answer_schema {
        AnswerSchema::Boolean => out.push_str("  answer yes or no"),
        AnswerSchema::Acknowledgement => out.push_str("  answer yes to acknowledge"),
        AnswerSchema::Integer { min, max } => out.push_str(&format!("  answer a number from {min} to {max}")),
        AnswerSchema::Choice { options } => {
            out.push_str("  choose one:");
            for (i, o) in options.iter().enumerate() {
                out.push_str(&format!("\n    {}. {o}", i + 1));
            }
        }
        AnswerSchema::FreeText => out.push_str("  answer in free text"),
    }
    out
}

/// Asks until the input parses; `None` at end of input.
pub fn ask(req: &InterventionRequest, input: &mut impl BufRead, out: &mut impl Write) -> std::io::Result<Option<Answer>> {
    writeln!(out, "{}", describe(req))?;
    loop {
        write!(out, "> ")?;
        out.flush()?;
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        match parse_answer(&req.answer_schema, &line) {
            Ok(a) => return Ok(Some(a)),
            Err(e) => writeln!(out, "  {e}")?,
        }
    }
}
