//! JSON-lines metrics log.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::write_atomic;
use crate::error::{Error, Result};
use crate::objective::LossValues;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<LossValues>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ema_tau: Option<f64>,
    /// Seconds since the run (or resume) started; omitted in single-threaded
    /// mode so logs compare byte for byte.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<serde_json::Value>,
}

impl MetricsRecord {
    pub fn eval(step: u64, value: serde_json::Value) -> Self {
        Self {
            step,
            loss: None,
            lr: None,
            ema_tau: None,
            wall_time: None,
            eval: Some(value),
        }
    }
}

pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, rec: &MetricsRecord) -> Result<()> {
        let mut line = serde_json::to_string(rec).map_err(|e| Error::State(e.to_string()))?;
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        Ok(())
    }

    pub fn read(&self) -> Result<Vec<MetricsRecord>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&self.path)?;
        let mut offset = 0u64;
        let mut out = Vec::new();
        for line in text.split_inclusive('\n') {
            let rec = serde_json::from_str(line.trim_end()).map_err(|e| Error::format(offset, e.to_string()))?;
            out.push(rec);
            offset += line.len() as u64;
        }
        Ok(out)
    }

    pub fn last_step(&self) -> Result<Option<u64>> {
        Ok(self.read()?.last().map(|r| r.step))
    }

    /// Keeps only the records with `step < cutoff`.
    pub fn truncate_before(&self, cutoff: u64) -> Result<()> {
        if !self.path.exists() {
            return Ok(());
        }
        let text = std::fs::read_to_string(&self.path)?;
        let mut kept = String::new();
        for line in text.split_inclusive('\n') {
            let rec: MetricsRecord =
                serde_json::from_str(line.trim_end()).map_err(|e| Error::format(0, e.to_string()))?;
            if rec.step < cutoff {
                kept.push_str(line);
            }
        }
        write_atomic(&self.path, kept.as_bytes())
    }
}
