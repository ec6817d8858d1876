//! Metrics JSONL records.
//!
//! One JSON object per line:
//!
//! ```text
//! {"schema":1,"record_type":"train","step":12,"seed":7,"variant":"svib_uniform",
//!  "fields":{"entropy":1.38,"mean_return":0.4}}
//! ```
//!
//! `fields` keys are sorted. Floats use shortest round-trip formatting, so
//! re-parsing reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordType {
    Train,
    MiProbe,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub schema: u32,
    pub record_type: RecordType,
    pub step: u64,
    pub seed: u64,
    pub variant: String,
    pub fields: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn new(record_type: RecordType, step: u64, seed: u64, variant: &str) -> Self {
        MetricsRecord {
            schema: SCHEMA,
            record_type,
            step,
            seed,
            variant: variant.to_string(),
            fields: BTreeMap::new(),
        }
    }

    /// Adds a field; non-finite values are dropped because JSON cannot
    /// carry them.
    pub fn with(mut self, key: &str, value: f64) -> Self {
        if value.is_finite() {
            self.fields.insert(key.to_string(), value);
        }
        self
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialisation cannot fail")
    }
}

/// Append-only JSONL writer; each record is flushed as it is written.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", record.to_line())
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Parses JSONL text. A last line without a trailing newline that fails to
/// parse is reported as truncated; any other bad line is an error too.
pub fn parse_metrics(text: &str, path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, raw) in lines.iter().enumerate() {
        let line = raw.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<MetricsRecord>(line) {
            Ok(r) if r.schema == SCHEMA => out.push(r),
            Ok(r) => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("line {}: unsupported schema {}", i + 1, r.schema),
                })
            }
            Err(e) => {
                let truncated = i + 1 == lines.len() && !raw.ends_with('\n');
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: if truncated {
                        format!("line {}: truncated final line ({e})", i + 1)
                    } else {
                        format!("line {}: {e}", i + 1)
                    },
                });
            }
        }
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text, path)
}
