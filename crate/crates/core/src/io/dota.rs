//! DOTA-style text annotations and detection lists.
//!
//! Annotation lines hold eight vertex coordinates, a class name and a
//! difficulty flag. Detection lines hold eight coordinates, a class name and
//! a score. Header lines (`imagesource:`, `gsd:`) and blank lines are skipped.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::decode::Detection;
use crate::geometry::{canonicalize_obb, Obb, Point2};

#[derive(Debug, Clone, PartialEq)]
pub struct ObbAnnotation {
    pub obb: Obb,
    pub class_id: usize,
    pub difficult: bool,
}

#[derive(Debug, Error)]
pub enum DotaError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("line {line}: unknown class {name:?}")]
    UnknownClass { line: usize, name: String },
    #[error("class list is empty")]
    EmptyClassList,
}

/// Ordered class names; a class's index is its position in the list.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassList {
    names: Vec<String>,
}

impl ClassList {
    pub fn new(names: Vec<String>) -> Result<Self, DotaError> {
        if names.is_empty() {
            return Err(DotaError::EmptyClassList);
        }
        Ok(Self { names })
    }

    /// One name per line; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self, DotaError> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self, DotaError> {
        Self::parse(&read(path)?)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

fn read(path: &Path) -> Result<String, DotaError> {
    Ok(fs::read_to_string(path)?)
}

fn is_skipped(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with("imagesource:") || t.starts_with("gsd:")
}

/// Parses the eight coordinates and builds a canonical box.
fn parse_obb(tokens: &[&str], line: usize) -> Result<Obb, DotaError> {
    let mut c = [0.0f64; 8];
    for (slot, tok) in c.iter_mut().zip(tokens) {
        *slot = tok.parse().map_err(|_| DotaError::ParseError {
            line,
            reason: format!("bad coordinate {tok:?}"),
        })?;
    }
    let pts = [0, 2, 4, 6].map(|i| Point2::new(c[i], c[i + 1]));
    canonicalize_obb(pts).map_err(|e| DotaError::ParseError {
        line,
        reason: e.to_string(),
    })
}

pub fn parse_dota_str(text: &str, classes: &ClassList) -> Result<Vec<ObbAnnotation>, DotaError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if is_skipped(raw) {
            continue;
        }
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.len() != 10 {
            return Err(DotaError::ParseError {
                line,
                reason: format!("expected 10 fields, found {}", tokens.len()),
            });
        }
        let obb = parse_obb(&tokens[..8], line)?;
        let class_id = classes.index_of(tokens[8]).ok_or_else(|| DotaError::UnknownClass {
            line,
            name: tokens[8].to_string(),
        })?;
        let difficult = match tokens[9] {
            "0" => false,
            "1" => true,
            other => {
                return Err(DotaError::ParseError {
                    line,
                    reason: format!("difficulty must be 0 or 1, found {other:?}"),
                })
            }
        };
        out.push(ObbAnnotation {
            obb,
            class_id,
            difficult,
        });
    }
    Ok(out)
}

pub fn parse_dota(path: &Path, classes: &ClassList) -> Result<Vec<ObbAnnotation>, DotaError> {
    parse_dota_str(&read(path)?, classes)
}

fn push_vertices(out: &mut String, obb: &Obb) {
    for v in obb.vertices() {
        let _ = write!(out, "{} {} ", v.x, v.y);
    }
}

/// Writes annotations in the format read by [`parse_dota_str`]. Coordinates
/// use the shortest representation that parses back to the same value.
pub fn format_dota(annotations: &[ObbAnnotation], classes: &ClassList) -> String {
    let mut out = String::new();
    for a in annotations {
        push_vertices(&mut out, &a.obb);
        let name = classes.name(a.class_id).unwrap_or("unknown");
        let _ = writeln!(out, "{name} {}", u8::from(a.difficult));
    }
    out
}

pub fn write_dota(path: &Path, annotations: &[ObbAnnotation], classes: &ClassList) -> std::io::Result<()> {
    fs::write(path, format_dota(annotations, classes))
}

pub fn format_detections(dets: &[Detection], classes: &ClassList) -> String {
    let mut out = String::new();
    for d in dets {
        push_vertices(&mut out, &d.obb);
        let name = classes.name(d.class_id).unwrap_or("unknown");
        let _ = writeln!(out, "{name} {}", d.score);
    }
    out
}

pub fn parse_detections_str(text: &str, classes: &ClassList) -> Result<Vec<Detection>, DotaError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if is_skipped(raw) {
            continue;
        }
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.len() != 10 {
            return Err(DotaError::ParseError {
                line,
                reason: format!("expected 10 fields, found {}", tokens.len()),
            });
        }
        let obb = parse_obb(&tokens[..8], line)?;
        let class_id = classes.index_of(tokens[8]).ok_or_else(|| DotaError::UnknownClass {
            line,
            name: tokens[8].to_string(),
        })?;
        let score: f64 = tokens[9].parse().map_err(|_| DotaError::ParseError {
            line,
            reason: format!("bad score {:?}", tokens[9]),
        })?;
        if !score.is_finite() {
            return Err(DotaError::ParseError {
                line,
                reason: "score must be finite".into(),
            });
        }
        out.push(Detection { obb, class_id, score });
    }
    Ok(out)
}

pub fn parse_detections(path: &Path, classes: &ClassList) -> Result<Vec<Detection>, DotaError> {
    parse_detections_str(&read(path)?, classes)
}
