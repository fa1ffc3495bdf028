//! Plain comma-separated text helpers shared by the file formats.
//!
//! All floats are written with 17 significant digits, which round-trips
//! every finite `f64` exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn join_f64<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    values
        .into_iter()
        .map(|v| fmt_f64(*v))
        .collect::<Vec<_>>()
        .join(",")
}

/// Reads a file into `(1-based line number, line)` pairs, skipping blank lines.
pub fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
        .collect())
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn parse_f64(field: &str, path: &Path, line: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::parse(path, line, format!("not a number: {field:?}")))
}

pub fn parse_usize(field: &str, path: &Path, line: usize) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::parse(path, line, format!("not a non-negative integer: {field:?}")))
}

pub fn parse_bool(field: &str, path: &Path, line: usize) -> Result<bool> {
    match field.trim() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(Error::parse(path, line, format!("not a boolean: {other:?}"))),
    }
}

pub fn split(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}
