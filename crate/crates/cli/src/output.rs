use std::fs::{self, File};
use std::path::Path;

use serde::Serialize;

use crate::error::{CliError, CliResult};

pub fn csv_writer(out_dir: &Path, name: &str) -> CliResult<csv::Writer<File>> {
    let path = out_dir.join(name);
    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes rows of plain string cells under `header`.
pub fn write_table(
    out_dir: &Path,
    name: &str,
    header: &[String],
    rows: &[Vec<String>],
) -> CliResult<()> {
    let mut w = csv_writer(out_dir, name)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| CliError::io(out_dir.join(name), e))
}

pub fn write_rows<R: Serialize>(out_dir: &Path, name: &str, rows: &[R]) -> CliResult<()> {
    let mut w = csv_writer(out_dir, name)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(out_dir.join(name), e))
}

pub fn write_json<V: Serialize>(out_dir: &Path, name: &str, value: &V) -> CliResult<()> {
    let path = out_dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value)? + "\n")
        .map_err(|e| CliError::io(&path, e))
}

/// Shortest round-trip formatting, so equal values give equal bytes.
pub fn num(x: f64) -> String {
    format!("{x}")
}
