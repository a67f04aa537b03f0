//! Label files: one `category cx cy w h` line per object, normalized, LF-terminated.

use std::fmt::Write as _;
use std::path::Path;

use crate::anchors::{BoxN, Label};
use crate::error::{Error, Result};

pub fn format_labels(labels: &[Label]) -> String {
    let mut s = String::new();
    for l in labels {
        let _ = writeln!(
            s,
            "{} {:.6} {:.6} {:.6} {:.6}",
            l.category, l.bbox.cx, l.bbox.cy, l.bbox.w, l.bbox.h
        );
    }
    s
}

pub fn write_labels(path: &Path, labels: &[Label]) -> Result<()> {
    std::fs::write(path, format_labels(labels)).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path, n_categories: usize) -> Result<Vec<Label>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(path, &text, n_categories)
}

/// Parses and validates label lines. Malformed lines are parse errors carrying
/// the line number; categories or coordinates out of range are validation errors.
pub fn parse_labels(path: &Path, text: &str, n_categories: usize) -> Result<Vec<Label>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", f.len())));
        }
        let category = f[0]
            .parse::<usize>()
            .map_err(|e| err(format!("category {:?}: {e}", f[0])))?;
        let mut v = [0.0; 4];
        for (slot, s) in v.iter_mut().zip(&f[1..]) {
            *slot = s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")))?;
        }
        let bbox = BoxN::new(v[0], v[1], v[2], v[3]);
        if category >= n_categories {
            return Err(Error::Validation(format!(
                "{}:{}: category {category} out of range for {n_categories} categories",
                path.display(),
                n + 1
            )));
        }
        if !bbox.is_valid() {
            return Err(Error::Validation(format!(
                "{}:{}: box ({}, {}, {}, {}) outside the unit square",
                path.display(),
                n + 1,
                bbox.cx,
                bbox.cy,
                bbox.w,
                bbox.h
            )));
        }
        out.push(Label::new(category, bbox));
    }
    Ok(out)
}
