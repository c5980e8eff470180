//! Corruption error (CE) and relative corruption error (rCE).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEVERITIES: usize = 5;

/// AlexNet top-1 error (%) on the noise corruptions, averaged over severities.
pub const ALEXNET_GAUSSIAN: f64 = 88.6;
pub const ALEXNET_SHOT: f64 = 89.4;
pub const ALEXNET_IMPULSE: f64 = 92.3;
/// AlexNet clean top-1 error (%).
pub const ALEXNET_CLEAN: f64 = 43.45;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    /// Per-severity reference errors.
    pub errors: [f64; SEVERITIES],
    pub clean: f64,
}

impl Normalizer {
    /// Same error at every severity.
    pub fn flat(error: f64, clean: f64) -> Self {
        Normalizer {
            errors: [error; SEVERITIES],
            clean,
        }
    }
}

pub fn alexnet_normalizers() -> BTreeMap<String, Normalizer> {
    [
        ("gaussian_noise", ALEXNET_GAUSSIAN),
        ("shot_noise", ALEXNET_SHOT),
        ("impulse_noise", ALEXNET_IMPULSE),
    ]
    .into_iter()
    .map(|(k, e)| (k.to_string(), Normalizer::flat(e, ALEXNET_CLEAN)))
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    /// Top-1 error (%) per kind and severity.
    pub errors: BTreeMap<String, [f64; SEVERITIES]>,
    pub clean: f64,
    pub normalizers: BTreeMap<String, Normalizer>,
}

impl ErrorTable {
    pub fn validate(&self) -> Result<()> {
        let pct = |v: f64| v.is_finite() && (0.0..=100.0).contains(&v);
        if !pct(self.clean) {
            return Err(Error::contract(format!("clean error {} outside [0,100]", self.clean)));
        }
        for (k, row) in &self.errors {
            if let Some(v) = row.iter().find(|v| !pct(**v)) {
                return Err(Error::contract(format!("{k}: error {v} outside [0,100]")));
            }
            let n = self
                .normalizers
                .get(k)
                .ok_or_else(|| Error::contract(format!("no normalizer for {k}")))?;
            if n.errors.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || !pct(n.clean) {
                return Err(Error::contract(format!("{k}: normalizers must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindScore {
    pub kind: String,
    pub ce: Option<f64>,
    /// `None` when the reference degradation sums to zero.
    pub rce: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub kinds: Vec<KindScore>,
    pub mce: Option<f64>,
    pub mrce: Option<f64>,
    pub warnings: Vec<String>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn mce_rce(table: &ErrorTable) -> Result<RobustnessReport> {
    table.validate()?;
    let mut warnings = Vec::new();
    let kinds: Vec<KindScore> = table
        .errors
        .iter()
        .map(|(k, e)| {
            let n = &table.normalizers[k];
            let num: f64 = e.iter().sum();
            let den: f64 = n.errors.iter().sum();
            let ce = Some(100.0 * num / den);
            let rnum: f64 = e.iter().map(|v| v - table.clean).sum();
            let rden: f64 = n.errors.iter().map(|v| v - n.clean).sum();
            let rce = if rden == 0.0 {
                warnings.push(format!("{k}: rCE undefined (zero reference degradation)"));
                None
            } else {
                Some(100.0 * rnum / rden)
            };
            KindScore {
                kind: k.clone(),
                ce,
                rce,
            }
        })
        .collect();
    Ok(RobustnessReport {
        mce: mean(kinds.iter().filter_map(|k| k.ce)),
        mrce: mean(kinds.iter().filter_map(|k| k.rce)),
        kinds,
        warnings,
    })
}
