//! Artifact plumbing: CSV and JSON persistence, content digests and run
//! manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("{path}: line {line}: {message}")]
    Csv { path: PathBuf, line: usize, message: String },
    #[error("{path}: digest {found} does not match recorded {expected}")]
    Stale { path: PathBuf, expected: String, found: String },
}

/// Shortest decimal that round-trips to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_json<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("value serializes"))
}

pub fn file_digest(path: &Path) -> Result<String, IoError> {
    Ok(sha256_hex(&read_bytes(path)?))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::File { path: path.to_owned(), source })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::File { path: dir.to_owned(), source })?;
    }
    fs::write(path, bytes).map_err(|source| IoError::File { path: path.to_owned(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| IoError::Json { path: path.to_owned(), message: e.to_string() })
}

/// Reads a file and checks its SHA-256 against `expected`.
pub fn read_verified(path: &Path, expected: &str) -> Result<Vec<u8>, IoError> {
    let bytes = read_bytes(path)?;
    let found = sha256_hex(&bytes);
    if found != expected {
        return Err(IoError::Stale { path: path.to_owned(), expected: expected.into(), found });
    }
    Ok(bytes)
}

/// Parses a headed CSV of numbers with exactly `ncols` columns per row.
pub fn parse_csv(bytes: &[u8], ncols: usize) -> Result<Vec<Vec<f64>>, IoError> {
    parse_csv_at(Path::new("<csv>"), bytes, Some(ncols), true)
}

pub fn parse_csv_at(path: &Path, bytes: &[u8], ncols: Option<usize>, header: bool) -> Result<Vec<Vec<f64>>, IoError> {
    let text = std::str::from_utf8(bytes).map_err(|e| IoError::Csv { path: path.to_owned(), line: 0, message: e.to_string() })?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(usize::from(header)) {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| IoError::Csv { path: path.to_owned(), line: i + 1, message: e.to_string() })?;
        if let Some(n) = ncols {
            if row.len() != n {
                return Err(IoError::Csv {
                    path: path.to_owned(),
                    line: i + 1,
                    message: format!("expected {n} columns, found {}", row.len()),
                });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Writes rows as CSV under an optional header line.
pub fn write_csv(path: &Path, header: Option<&[String]>, rows: impl IntoIterator<Item = Vec<f64>>) -> Result<String, IoError> {
    let mut text = String::new();
    if let Some(h) = header {
        text.push_str(&h.join(","));
        text.push('\n');
    }
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())?;
    Ok(sha256_hex(text.as_bytes()))
}

/// An input or output file with its digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self, IoError> {
        Ok(Artifact { path: path.display().to_string(), sha256: file_digest(path)? })
    }

    /// Fails with [`IoError::Stale`] when the file changed since recording.
    pub fn verify(&self) -> Result<(), IoError> {
        read_verified(Path::new(&self.path), &self.sha256).map(|_| ())
    }
}

/// Record of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_sha256: String,
    pub seed: u64,
    pub tool_version: String,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub wall_seconds: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1e21, 123456.789, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn stale_file_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_csv(&p, None, vec![vec![1.0, 2.0]]).unwrap();
        let art = Artifact::of(&p).unwrap();
        art.verify().unwrap();
        write_csv(&p, None, vec![vec![1.0, 3.0]]).unwrap();
        assert!(matches!(art.verify(), Err(IoError::Stale { .. })));
    }

    #[test]
    fn csv_column_count_checked() {
        assert!(parse_csv(b"a,b\n1,2\n3\n", 2).is_err());
        assert_eq!(parse_csv(b"a,b\n1,2\n3,4\n", 2).unwrap(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    }
}
