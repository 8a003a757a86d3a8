//! Plain multi-frame XYZ reading and writing.
//!
//! Frame layout: atom count, free-form comment line, then one
//! `element x y z` line per atom. Coordinates are written with shortest
//! round-trip formatting so a written file parses back to identical bits.

use super::{Conformation, GraphError};
use std::fmt;
use std::fmt::Write as _;

#[derive(Clone, Debug)]
pub struct XyzFrame {
    pub comment: String,
    pub elements: Vec<String>,
    pub conformation: Conformation,
}

#[derive(Debug)]
pub enum XyzError {
    BadCount { line: usize, text: String },
    Truncated { frame_start: usize },
    BadAtomLine { line: usize, text: String },
    BadCoordinates(GraphError),
}

impl fmt::Display for XyzError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            XyzError::BadCount { line, text } => {
                write!(f, "line {}: expected atom count, got `{}`", line, text)
            }
            XyzError::Truncated { frame_start } => {
                write!(f, "truncated frame starting at line {}", frame_start)
            }
            XyzError::BadAtomLine { line, text } => {
                write!(f, "line {}: expected `element x y z`, got `{}`", line, text)
            }
            XyzError::BadCoordinates(e) => write!(f, "bad coordinates: {}", e),
        }
    }
}

impl std::error::Error for XyzError {}

pub fn read_xyz(input: &str) -> Result<Vec<XyzFrame>, XyzError> {
    let lines: Vec<&str> = input.lines().collect();
    let mut frames = Vec::new();
    let mut pos = 0usize;
    while pos < lines.len() {
        if lines[pos].trim().is_empty() {
            pos += 1;
            continue;
        }
        let count: usize = lines[pos].trim().parse().map_err(|_| XyzError::BadCount {
            line: pos + 1,
            text: lines[pos].trim().to_string(),
        })?;
        if pos + 2 + count > lines.len() {
            return Err(XyzError::Truncated { frame_start: pos + 1 });
        }
        let comment = lines[pos + 1].to_string();
        let mut elements = Vec::with_capacity(count);
        let mut coords = Vec::with_capacity(count);
        for k in 0..count {
            let li = pos + 2 + k;
            let fields: Vec<&str> = lines[li].split_whitespace().collect();
            if fields.len() < 4 {
                return Err(XyzError::BadAtomLine {
                    line: li + 1,
                    text: lines[li].to_string(),
                });
            }
            let parse = |s: &str| -> Result<f64, XyzError> {
                s.parse().map_err(|_| XyzError::BadAtomLine {
                    line: li + 1,
                    text: lines[li].to_string(),
                })
            };
            elements.push(fields[0].to_string());
            coords.push([parse(fields[1])?, parse(fields[2])?, parse(fields[3])?]);
        }
        frames.push(XyzFrame {
            comment,
            elements,
            conformation: Conformation::new(coords).map_err(XyzError::BadCoordinates)?,
        });
        pos += 2 + count;
    }
    Ok(frames)
}

pub fn write_frame(out: &mut String, comment: &str, elements: &[String], conf: &Conformation) {
    debug_assert_eq!(elements.len(), conf.len());
    let _ = writeln!(out, "{}", conf.len());
    let _ = writeln!(out, "{}", comment);
    for (el, c) in elements.iter().zip(conf.coords()) {
        let _ = writeln!(out, "{} {} {} {}", el, c[0], c[1], c[2]);
    }
}
