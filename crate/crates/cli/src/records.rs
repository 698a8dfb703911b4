//! Line-oriented result records: tab-separated `key=value` fields, one
//! record per line, appended to a results file.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RecordError {
    #[error("line {line}: field {field:?} is not key=value")]
    BadField { line: usize, field: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("record key or value {0:?} contains a tab, newline or '='")]
    BadToken(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Record {
    fields: Vec<(String, String)>,
}

impl Record {
    pub fn new(kind: &str) -> Self {
        Record::default().with("kind", kind)
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.push(key, value);
        self
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.fields.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.fields.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn fields(&self) -> &[(String, String)] {
        &self.fields
    }

    pub fn to_line(&self) -> Result<String, RecordError> {
        let bad = |s: &str| s.contains(['\t', '\n', '\r']);
        for (k, v) in &self.fields {
            if bad(k) || k.contains('=') || k.is_empty() {
                return Err(RecordError::BadToken(k.clone()));
            }
            if bad(v) {
                return Err(RecordError::BadToken(v.clone()));
            }
        }
        Ok(self.fields.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("\t"))
    }

    /// `key=value` lines for human-readable stdout.
    pub fn to_kv_lines(&self) -> String {
        self.fields.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

pub fn parse_line(line: &str, line_no: usize) -> Result<Record, RecordError> {
    let mut rec = Record::default();
    for field in line.split('\t') {
        let Some((k, v)) = field.split_once('=') else {
            return Err(RecordError::BadField {
                line: line_no,
                field: field.to_string(),
            });
        };
        if k.is_empty() {
            return Err(RecordError::BadField {
                line: line_no,
                field: field.to_string(),
            });
        }
        if rec.get(k).is_some() {
            return Err(RecordError::DuplicateKey {
                line: line_no,
                key: k.to_string(),
            });
        }
        rec.fields.push((k.to_string(), v.to_string()));
    }
    Ok(rec)
}

/// Parses every non-blank line.
pub fn parse_records(text: &str) -> Result<Vec<Record>, RecordError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn append_records(path: &Path, records: &[Record]) -> std::io::Result<()> {
    let mut text = String::new();
    for r in records {
        let line = r.to_line().map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;
        text.push_str(&line);
        text.push('\n');
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(text.as_bytes())
}

/// Plot-ready columns: for each record matching every `key=value` filter and
/// carrying all requested columns, the requested values in order.
pub fn extract_columns(records: &[Record], columns: &[&str], filters: &[(String, String)]) -> Vec<Vec<String>> {
    records
        .iter()
        .filter(|r| filters.iter().all(|(k, v)| r.get(k) == Some(v.as_str())))
        .filter_map(|r| columns.iter().map(|c| r.get(c).map(str::to_string)).collect())
        .collect()
}
