//! Line lexer shared by the goal-model and domain file formats.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {col}: expected {expected}, found {found}")]
pub struct SyntaxError {
    pub line: usize,
    pub col: usize,
    pub expected: String,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    Word(String),
    Quoted(String),
    KeyValue(String, String),
}

#[derive(Debug, Clone)]
pub struct Spanned {
    pub col: usize,
    pub tok: Token,
}

/// One non-blank, non-comment source line.
#[derive(Debug, Clone)]
pub struct Line<'a> {
    /// 1-based line number.
    pub number: usize,
    pub indent: usize,
    pub text: &'a str,
}

impl<'a> Line<'a> {
    pub fn error(&self, col: usize, expected: impl Into<String>, found: impl Into<String>) -> SyntaxError {
        SyntaxError {
            line: self.number,
            col,
            expected: expected.into(),
            found: found.into(),
        }
    }

    /// First word and the (trimmed) remainder of the line.
    pub fn keyword(&self) -> (&'a str, &'a str) {
        let t = self.text;
        match t.find(char::is_whitespace) {
            Some(i) => (&t[..i], t[i..].trim()),
            None => (t, ""),
        }
    }

    /// Column (1-based) of the remainder returned by [`Line::keyword`].
    pub fn rest_col(&self) -> usize {
        let (kw, rest) = self.keyword();
        if rest.is_empty() {
            self.indent + kw.len() + 1
        } else {
            self.indent + self.text.find(rest).unwrap_or(kw.len()) + 1
        }
    }

    pub fn tokens(&self) -> Result<Vec<Spanned>, SyntaxError> {
        tokenize(self)
    }
}

/// Splits source into lines, dropping blanks and `#` comments.
pub fn lines(src: &str) -> Vec<Line<'_>> {
    src.lines()
        .enumerate()
        .filter_map(|(i, raw)| {
            let trimmed = raw.trim_end();
            let body = trimmed.trim_start();
            if body.is_empty() || body.starts_with('#') {
                return None;
            }
            Some(Line {
                number: i + 1,
                indent: trimmed.len() - body.len(),
                text: body,
            })
        })
        .collect()
}

fn read_quoted(line: &Line<'_>, chars: &[(usize, char)], start: usize) -> Result<(String, usize), SyntaxError> {
    // chars[start] is the opening quote
    let mut out = String::new();
    let mut i = start + 1;
    while i < chars.len() {
        match chars[i].1 {
            '\\' if i + 1 < chars.len() => {
                out.push(chars[i + 1].1);
                i += 2;
            }
            '"' => return Ok((out, i + 1)),
            c => {
                out.push(c);
                i += 1;
            }
        }
    }
    Err(line.error(line.indent + line.text.len() + 1, "closing `\"`", "end of line"))
}

fn tokenize(line: &Line<'_>) -> Result<Vec<Spanned>, SyntaxError> {
    let chars: Vec<(usize, char)> = line.text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (off, c) = chars[i];
        let col = line.indent + off + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '"' {
            let (s, next) = read_quoted(line, &chars, i)?;
            out.push(Spanned {
                col,
                tok: Token::Quoted(s),
            });
            i = next;
            continue;
        }
        let mut j = i;
        while j < chars.len() && !chars[j].1.is_whitespace() && chars[j].1 != '"' {
            j += 1;
        }
        let word: String = chars[i..j].iter().map(|&(_, c)| c).collect();
        if let Some(key) = word.strip_suffix('=') {
            if j < chars.len() && chars[j].1 == '"' {
                let (s, next) = read_quoted(line, &chars, j)?;
                out.push(Spanned {
                    col,
                    tok: Token::KeyValue(key.to_string(), s),
                });
                i = next;
                continue;
            }
        }
        let tok = match word.split_once('=') {
            Some((k, v)) if !k.is_empty() => Token::KeyValue(k.to_string(), v.to_string()),
            _ => Token::Word(word),
        };
        out.push(Spanned { col, tok });
        i = j;
    }
    Ok(out)
}

/// Quotes a string for output, escaping quotes and backslashes.
pub fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_quoted_and_key_values() {
        let src = "  goal g1 \"Authorised \\\"access\\\"\" AND formal=\"never a & b\" tags=x,y";
        let ls = lines(src);
        assert_eq!(ls[0].indent, 2);
        let toks: Vec<Token> = ls[0].tokens().unwrap().into_iter().map(|s| s.tok).collect();
        assert_eq!(
            toks,
            vec![
                Token::Word("goal".into()),
                Token::Word("g1".into()),
                Token::Quoted("Authorised \"access\"".into()),
                Token::Word("AND".into()),
                Token::KeyValue("formal".into(), "never a & b".into()),
                Token::KeyValue("tags".into(), "x,y".into()),
            ]
        );
    }

    #[test]
    fn unterminated_quote_is_an_error() {
        let ls = lines("goal g \"oops");
        let err = ls[0].tokens().unwrap_err();
        assert_eq!(err.line, 1);
        assert!(err.expected.contains('"'));
    }

    #[test]
    fn quote_round_trips() {
        let s = "a \"b\" \\c";
        let src = format!("x {}", quote(s));
        let ls = lines(&src);
        let toks = ls[0].tokens().unwrap();
        assert_eq!(toks[1].tok, Token::Quoted(s.into()));
    }
}
