//! Line-oriented `key=value` reports printed by the command-line tool.
//!
//! Each line is one entry. Keys are non-empty and made of ASCII letters,
//! digits, `_`, `.` and `-`; the value is everything after the first `=`
//! up to the end of the line. Keys are unique within a report. Blank lines
//! are ignored when parsing. Floating-point values are written in the
//! shortest form that parses back to the same `f64`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReportError {
    #[error("line {0}: missing '='")]
    MissingSeparator(usize),
    #[error("line {line}: invalid key {key:?}")]
    InvalidKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    entries: Vec<(String, String)>,
}

pub fn is_valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry.
    ///
    /// # Panics
    /// On an invalid or repeated key, or a value containing a newline.
    pub fn push(&mut self, key: impl Into<String>, value: impl fmt::Display) -> &mut Self {
        let key = key.into();
        let value = value.to_string();
        assert!(is_valid_key(&key), "invalid report key {key:?}");
        assert!(!value.contains('\n'), "report value for {key} spans lines");
        assert!(self.get(&key).is_none(), "duplicate report key {key}");
        self.entries.push((key, value));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn parse(text: &str) -> Result<Self, ReportError> {
        let mut report = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ReportError::MissingSeparator(i + 1))?;
            if !is_valid_key(key) {
                return Err(ReportError::InvalidKey {
                    line: i + 1,
                    key: key.into(),
                });
            }
            if report.get(key).is_some() {
                return Err(ReportError::DuplicateKey {
                    line: i + 1,
                    key: key.into(),
                });
            }
            report.entries.push((key.into(), value.into()));
        }
        Ok(report)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
