//! Tidy CSV tables and number formatting shared by every writer and reader.
//!
//! Numbers are written with 17 significant digits; non-finite values use the
//! literal tokens `inf`, `-inf`, `nan`. Comment lines start with `# ` and
//! carry `key=value` metadata.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

pub fn parse_num(s: &str) -> Result<f64> {
    match s.trim() {
        "nan" => Ok(f64::NAN),
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        other => other
            .parse::<f64>()
            .map_err(|_| Error::Schema(format!("not a number: {other:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvTable {
    pub comments: Vec<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.comments {
            let _ = writeln!(out, "# {c}");
        }
        let _ = writeln!(out, "{}", self.header.join(","));
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|&x| fmt_num(x)).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table = CsvTable::default();
        let mut have_header = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                table.comments.push(c.trim().to_string());
                continue;
            }
            if !have_header {
                table.header = line.split(',').map(|s| s.trim().to_string()).collect();
                have_header = true;
                continue;
            }
            let row = line
                .split(',')
                .map(parse_num)
                .collect::<Result<Vec<f64>>>()
                .map_err(|e| Error::Schema(format!("line {}: {e}", lineno + 1)))?;
            if row.len() != table.header.len() {
                return Err(Error::Schema(format!(
                    "line {}: expected {} columns, found {}",
                    lineno + 1,
                    table.header.len(),
                    row.len()
                )));
            }
            table.rows.push(row);
        }
        if !have_header {
            return Err(Error::Schema("missing CSV header".into()));
        }
        Ok(table)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .column_index(name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))?;
        Ok(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Columns `prefix_1, prefix_2, ...` as long as they exist.
    pub fn indexed_columns(&self, prefix: &str) -> Vec<usize> {
        (1..)
            .map_while(|i| self.column_index(&format!("{prefix}_{i}")))
            .collect()
    }

    /// Value of `key=value` from the comment lines.
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.comments.iter().flat_map(|c| c.split(',')).find_map(|kv| {
            let (k, v) = kv.split_once('=')?;
            (k.trim() == key).then_some(v.trim())
        })
    }
}

/// Serde helper: finite values as JSON numbers, others as the tokens of [`fmt_num`].
pub fn ser_num<S: serde::Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_str(&fmt_num(*x))
    }
}

pub fn meta_line(pairs: &[(&str, String)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `contents` (adding a trailing newline if missing) and returns its digest.
pub fn write_file(path: &Path, contents: &str) -> Result<String> {
    let mut data = contents.to_string();
    if !data.ends_with('\n') {
        data.push('\n');
    }
    std::fs::write(path, data.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(data.as_bytes()))
}
