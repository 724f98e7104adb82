//! Line-oriented report format shared by the CLI, the gateway and tests.
//!
//! ```text
//! # comment
//! <record_type> key=value key=value ...
//! ```
//!
//! Record types and keys are `[A-Za-z0-9_.-]+`. Values are written bare when
//! they contain no whitespace, `"`, `=` or `#`, otherwise double-quoted with
//! `\"`, `\\`, `\n` escapes. Lists are comma-joined. Field order is preserved.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("missing key {key} in {record}")]
    MissingKey { record: String, key: String },
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReportLine {
    pub record: String,
    pub fields: Vec<(String, String)>,
}

impl ReportLine {
    pub fn new(record: impl Into<String>) -> Self {
        Self {
            record: record.into(),
            fields: Vec::new(),
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl fmt::Display) -> Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }

    pub fn with_list<T: fmt::Display>(self, key: impl Into<String>, values: &[T]) -> Self {
        let joined = values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        self.with(key, joined)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, ReportError> {
        self.get(key).ok_or_else(|| ReportError::MissingKey {
            record: self.record.clone(),
            key: key.into(),
        })
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T, ReportError> {
        let v = self.require(key)?;
        v.parse().map_err(|_| ReportError::BadValue {
            key: key.into(),
            value: v.into(),
        })
    }

    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ReportError> {
        let v = self.require(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|x| {
                x.parse().map_err(|_| ReportError::BadValue {
                    key: key.into(),
                    value: v.into(),
                })
            })
            .collect()
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b"_.-".contains(&b))
}

fn needs_quotes(v: &str) -> bool {
    v.is_empty() || v.chars().any(|c| c.is_whitespace() || matches!(c, '"' | '=' | '#' | '\\'))
}

impl fmt::Display for ReportLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.record)?;
        for (k, v) in &self.fields {
            write!(f, " {k}=")?;
            if needs_quotes(v) {
                f.write_str("\"")?;
                for c in v.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        '\n' => f.write_str("\\n")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")?;
            } else {
                f.write_str(v)?;
            }
        }
        Ok(())
    }
}

fn parse_line(text: &str, line: usize) -> Result<ReportLine, ReportError> {
    let err = |reason: &str| ReportError::Syntax {
        line,
        reason: reason.into(),
    };
    let mut chars = text.trim().chars().peekable();
    let take_ident = |chars: &mut std::iter::Peekable<std::str::Chars>| {
        let mut s = String::new();
        while let Some(&c) = chars.peek() {
            if c.is_whitespace() || c == '=' {
                break;
            }
            s.push(c);
            chars.next();
        }
        s
    };
    let record = take_ident(&mut chars);
    if !is_ident(&record) {
        return Err(err("bad record type"));
    }
    let mut out = ReportLine::new(record);
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            return Ok(out);
        }
        let key = take_ident(&mut chars);
        if !is_ident(&key) || chars.next() != Some('=') {
            return Err(err("expected key=value"));
        }
        let mut value = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            loop {
                match chars.next() {
                    Some('"') => break,
                    Some('\\') => match chars.next() {
                        Some('n') => value.push('\n'),
                        Some(c @ ('"' | '\\')) => value.push(c),
                        _ => return Err(err("bad escape")),
                    },
                    Some(c) => value.push(c),
                    None => return Err(err("unterminated quote")),
                }
            }
            if chars.peek().is_some_and(|c| !c.is_whitespace()) {
                return Err(err("garbage after quoted value"));
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                if matches!(c, '"' | '=') {
                    return Err(err("unquoted value contains a reserved character"));
                }
                value.push(c);
                chars.next();
            }
        }
        out.fields.push((key, value));
    }
}

/// Parse a whole report, skipping blank lines and `#` comments.
pub fn parse_report(text: &str) -> Result<Vec<ReportLine>, ReportError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn write_report(header: &str, lines: &[ReportLine]) -> String {
    let mut s = String::new();
    for h in header.lines() {
        s.push_str("# ");
        s.push_str(h);
        s.push('\n');
    }
    for l in lines {
        s.push_str(&l.to_string());
        s.push('\n');
    }
    s
}

/// Fixed-precision float formatting used in reports so text is stable.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.9}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn roundtrip_with_quoting() {
        let l = ReportLine::new("restoration")
            .with("sensor", "cam0")
            .with_list("dropped", &[3u64, 17, 20])
            .with("note", "two words \"q\" a=b\\")
            .with("empty", "");
        let text = l.to_string();
        assert_eq!(
            text,
            r#"restoration sensor=cam0 dropped=3,17,20 note="two words \"q\" a=b\\" empty="""#
        );
        let back = parse_report(&text).unwrap();
        assert_eq!(back, vec![l.clone()]);
        assert_eq!(back[0].parse_list::<u64>("dropped").unwrap(), vec![3, 17, 20]);
        assert_eq!(back[0].parse_list::<u64>("empty").unwrap(), Vec::<u64>::new());
    }

    #[test]
    fn comments_and_errors() {
        let r = parse_report("# hdr\n\nsummary a=1\n").unwrap();
        assert_eq!(r[0].parse_value::<u32>("a").unwrap(), 1);
        assert!(matches!(r[0].require("b"), Err(ReportError::MissingKey { .. })));
        assert!(matches!(parse_report("x a=\"open"), Err(ReportError::Syntax { line: 1, .. })));
        assert!(matches!(parse_report("ok\nx novalue"), Err(ReportError::Syntax { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn any_value_roundtrips(v in "\\PC*", key in "[a-z_]{1,8}") {
            let l = ReportLine::new("r").with(key, &v);
            let back = parse_report(&l.to_string()).unwrap();
            prop_assert_eq!(back, vec![l]);
        }
    }
}
