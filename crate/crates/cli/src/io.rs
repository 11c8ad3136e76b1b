//! File plumbing: input hashing, atomic output, CSV and JSON numeric tables.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// SHA-256 over labelled, length-prefixed input chunks.
pub struct InputHash(Sha256);

impl InputHash {
    pub fn new() -> Self {
        InputHash(Sha256::new())
    }

    pub fn add(&mut self, label: &str, bytes: &[u8]) {
        for chunk in [label.as_bytes(), bytes] {
            self.0.update((chunk.len() as u64).to_le_bytes());
            self.0.update(chunk);
        }
    }

    pub fn add_json(&mut self, label: &str, value: &impl Serialize) {
        let bytes = serde_json::to_vec(value).expect("config values serialise");
        self.add(label, &bytes);
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0.clone().finalize())
    }
}

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Resolve `path` against the directory of the file that referenced it.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Write through a temporary file in the target directory, then rename over `path`.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        write(&mut w).map_err(|e| CliError::io(path, e))?;
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    // temp files are created owner-only
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(tmp.path(), std::fs::Permissions::from_mode(0o644))
            .map_err(|e| CliError::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::other)?;
        w.write_all(b"\n")
    })
}

fn parse_cell(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok()
}

/// Rows of a headerless or single-header CSV file as numbers.
fn csv_rows(bytes: &[u8], field: &str) -> CliResult<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(bytes);
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::invalid(field, e.to_string()))?;
        let parsed: Option<Vec<f64>> = rec.iter().map(parse_cell).collect();
        match parsed {
            Some(r) if !r.is_empty() => rows.push(r),
            // a header line
            None if line == 0 => {}
            _ => return Err(CliError::invalid(field, format!("row {} is not numeric", line + 1))),
        }
    }
    Ok(rows)
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// One value per grid point: a JSON array, or the last column of a CSV file.
pub fn read_values(path: &Path, bytes: &[u8], field: &str) -> CliResult<Vec<f64>> {
    if is_json(path) {
        return serde_json::from_slice(bytes).map_err(|e| CliError::invalid(field, e.to_string()));
    }
    Ok(csv_rows(bytes, field)?.into_iter().map(|r| r[r.len() - 1]).collect())
}

/// A kernel matrix, row `i` for the `i`-th row point: a JSON array of rows, or a CSV table.
pub fn read_matrix(path: &Path, bytes: &[u8], field: &str) -> CliResult<Vec<Vec<f64>>> {
    if is_json(path) {
        return serde_json::from_slice(bytes).map_err(|e| CliError::invalid(field, e.to_string()));
    }
    csv_rows(bytes, field)
}

/// Render rows as CSV text with a header line.
pub fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Shortest round-trip formatting; empty for missing values.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}
