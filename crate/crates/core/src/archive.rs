//! JSON-lines episode archives, one record per line.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::scalar::Scalar;
use crate::trainer::{EpisodeRecord, EPISODE_SCHEMA_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unsupported schema version {version}")]
    Schema { line: usize, version: u32 },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ArchiveError {
    ArchiveError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Serializes records to the archive text format.
pub fn to_jsonl<T: Scalar>(records: &[EpisodeRecord<T>]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_archive<T: Scalar>(path: &Path, records: &[EpisodeRecord<T>]) -> Result<(), ArchiveError> {
    std::fs::write(path, to_jsonl(records)).map_err(|e| io_err(path, e))
}

/// Appends records, creating the file when needed.
pub fn append_archive<T: Scalar>(path: &Path, records: &[EpisodeRecord<T>]) -> Result<(), ArchiveError> {
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
    file.write_all(to_jsonl(records).as_bytes()).map_err(|e| io_err(path, e))
}

pub fn read_archive<T: Scalar>(path: &Path) -> Result<Vec<EpisodeRecord<T>>, ArchiveError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EpisodeRecord<T> =
            serde_json::from_str(&line).map_err(|e| ArchiveError::Parse { line: i + 1, message: e.to_string() })?;
        if record.schema_version != EPISODE_SCHEMA_VERSION {
            return Err(ArchiveError::Schema { line: i + 1, version: record.schema_version });
        }
        records.push(record);
    }
    Ok(records)
}
