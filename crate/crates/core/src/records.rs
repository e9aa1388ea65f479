//! Line-delimited JSON persistence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: schema_version {found}, expected {expected}")]
    Schema { path: PathBuf, line: usize, found: u32, expected: u32 },
}

/// A row stamped with the schema version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub schema_version: u32,
    #[serde(flatten)]
    pub row: T,
}

impl<T> Versioned<T> {
    pub fn new(row: T) -> Self {
        Self { schema_version: crate::SCHEMA_VERSION, row }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RecordError + '_ {
    move |source| RecordError::Io { path: path.to_path_buf(), source }
}

/// Writes one JSON object per line, each stamped with the schema version.
/// The file is written to a sibling temp path and renamed into place.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RecordError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
        for row in rows {
            let line = serde_json::to_string(&Versioned::new(row))
                .map_err(|e| RecordError::Parse { path: path.to_path_buf(), line: 0, message: e.to_string() })?;
            writeln!(w, "{line}").map_err(io_err(&tmp))?;
        }
        w.flush().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Reads rows written by [`write_jsonl`]. Blank lines are skipped; line
/// numbers in errors are 1-based.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RecordError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| RecordError::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() };
        let v: Versioned<T> = serde_json::from_str(&line).map_err(parse_err)?;
        if v.schema_version != crate::SCHEMA_VERSION {
            return Err(RecordError::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                found: v.schema_version,
                expected: crate::SCHEMA_VERSION,
            });
        }
        out.push(v.row);
    }
    Ok(out)
}

/// Writes a single pretty-printed JSON document followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RecordError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| RecordError::Parse { path: path.to_path_buf(), line: 0, message: e.to_string() })?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, RecordError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| RecordError::Parse { path: path.to_path_buf(), line: e.line(), message: e.to_string() })
}
