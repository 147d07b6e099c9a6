//! CSV tables with positioned parse errors, and input digests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;

/// A CSV file held in memory together with its digest.
#[derive(Debug, Clone)]
pub struct Table {
    pub path: PathBuf,
    pub headers: Vec<String>,
    /// `(line number, fields)` for each data row.
    pub rows: Vec<(u64, Vec<String>)>,
    pub sha256: String,
}

/// Provenance of one input file, embedded in reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
    pub rows: usize,
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let bytes = read_bytes(path)?;
        Self::parse(path, &bytes)
    }

    pub fn parse(path: &Path, bytes: &[u8]) -> Result<Self, CliError> {
        let malformed = |line: u64, message: String| CliError::Parse {
            file: path.to_path_buf(),
            line,
            column: None,
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(bytes);
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| malformed(1, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                malformed(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line());
            rows.push((line, record.iter().map(str::to_string).collect()));
        }
        Ok(Self {
            path: path.to_path_buf(),
            headers,
            rows,
            sha256: sha256_hex(bytes),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn require(&self, name: &str) -> Result<usize, CliError> {
        self.column(name).ok_or_else(|| CliError::Parse {
            file: self.path.clone(),
            line: 1,
            column: Some(name.to_string()),
            message: format!("missing required column `{name}`"),
        })
    }

    /// Columns named `{prefix}0, {prefix}1, ...`, in index order. Fails if
    /// the indices are not contiguous from 0.
    pub fn indexed_columns(&self, prefix: &str) -> Result<Vec<usize>, CliError> {
        let mut found: Vec<(usize, usize)> = Vec::new();
        for (pos, h) in self.headers.iter().enumerate() {
            if let Some(rest) = h.strip_prefix(prefix) {
                let k: usize = rest.parse().map_err(|_| CliError::Parse {
                    file: self.path.clone(),
                    line: 1,
                    column: Some(h.clone()),
                    message: format!("bad class index in column `{h}`"),
                })?;
                found.push((k, pos));
            }
        }
        found.sort_unstable();
        if found.iter().enumerate().any(|(i, (k, _))| i != *k) {
            return Err(CliError::Parse {
                file: self.path.clone(),
                line: 1,
                column: None,
                message: format!("`{prefix}*` columns must be numbered 0..K-1 without gaps"),
            });
        }
        Ok(found.into_iter().map(|(_, pos)| pos).collect())
    }

    fn cell<'a>(&'a self, row: &'a (u64, Vec<String>), col: usize) -> Result<&'a str, CliError> {
        row.1.get(col).map(String::as_str).ok_or_else(|| CliError::Parse {
            file: self.path.clone(),
            line: row.0,
            column: Some(self.headers[col].clone()),
            message: "row is missing this field".into(),
        })
    }

    pub fn text(&self, row: usize, col: usize) -> Result<String, CliError> {
        self.cell(&self.rows[row], col).map(str::to_string)
    }

    pub fn float(&self, row: usize, col: usize) -> Result<f64, CliError> {
        let r = &self.rows[row];
        let raw = self.cell(r, col)?;
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(CliError::Parse {
                file: self.path.clone(),
                line: r.0,
                column: Some(self.headers[col].clone()),
                message: format!("expected a finite number, found `{raw}`"),
            }),
        }
    }

    pub fn boolean(&self, row: usize, col: usize) -> Result<bool, CliError> {
        let r = &self.rows[row];
        let raw = self.cell(r, col)?;
        match raw.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(CliError::Parse {
                file: self.path.clone(),
                line: r.0,
                column: Some(self.headers[col].clone()),
                message: format!("expected a boolean, found `{raw}`"),
            }),
        }
    }

    pub fn digest(&self, role: &str) -> InputDigest {
        InputDigest {
            role: role.to_string(),
            path: self.path.display().to_string(),
            sha256: self.sha256.clone(),
            rows: self.len(),
        }
    }

    /// A table with the same headers holding the given rows.
    pub fn subset(&self, rows: &[usize]) -> Table {
        Table {
            path: self.path.clone(),
            headers: self.headers.clone(),
            rows: rows.iter().map(|&i| self.rows[i].clone()).collect(),
            sha256: self.sha256.clone(),
        }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).map_err(internal)?;
        for (_, fields) in &self.rows {
            w.write_record(fields).map_err(internal)?;
        }
        w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
    }
}

pub fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}
