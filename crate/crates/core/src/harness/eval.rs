//! Evaluation of frozen encoders.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use serde_json::{json, Value};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::log::{MetricsLog, MetricsRecord};
use super::pretrain::{represent, test_dataset, train_dataset, TrainState, METRICS_FILE};
use crate::datagen::{corrupt, deserialize_dataset, CorruptionKind, LabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::{
    class_variance, fisher_lda, fit_probe, mce_rce, overlap_graph_diagnostics, ErrorTable, SEVERITIES,
};
use crate::nn::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EvalKind {
    Linear,
    Lda,
    Robust,
    Variance,
    Graph,
}

impl EvalKind {
    pub const ALL: [EvalKind; 5] = [
        EvalKind::Linear,
        EvalKind::Lda,
        EvalKind::Robust,
        EvalKind::Variance,
        EvalKind::Graph,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalKind::Linear => "linear",
            EvalKind::Lda => "lda",
            EvalKind::Robust => "robust",
            EvalKind::Variance => "variance",
            EvalKind::Graph => "graph",
        }
    }
}

impl fmt::Display for EvalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown eval kind {s:?}")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RobustRow {
    pub kind: String,
    pub errors: [f64; SEVERITIES],
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::State(e.to_string()))
}

fn error_pct(acc: f64) -> f64 {
    100.0 * (1.0 - acc)
}

/// Computes one metric for `encoder`; the result is a JSON object.
pub fn evaluate(
    kind: EvalKind,
    cfg: &RunConfig,
    encoder: &Parameters,
    train: &LabeledDataset,
    test: &LabeledDataset,
    parallel: bool,
) -> Result<Value> {
    let reps = |d: &LabeledDataset| represent(cfg, encoder, &d.images, parallel);
    let y_test = test.content_labels();
    let body = match kind {
        EvalKind::Linear => {
            let clf = fit_probe(&reps(train)?, &train.content_labels(), &cfg.eval.probe)?;
            json!({
                "accuracy": clf.accuracy(&reps(test)?, &y_test)?,
                "val_accuracy": clf.val_accuracy,
                "learning_rate": clf.learning_rate,
                "epoch": clf.epoch,
            })
        }
        EvalKind::Lda => to_value(&fisher_lda(&reps(test)?, &y_test)?)?,
        EvalKind::Variance => to_value(&class_variance(&reps(test)?, &y_test)?)?,
        EvalKind::Robust => {
            let clf = fit_probe(&reps(train)?, &train.content_labels(), &cfg.eval.probe)?;
            let clean = error_pct(clf.accuracy(&reps(test)?, &y_test)?);
            let mut rows = Vec::new();
            let mut errors = BTreeMap::new();
            for k in CorruptionKind::ALL {
                let mut e = [0.0; SEVERITIES];
                for (s, slot) in e.iter_mut().enumerate() {
                    let images = corrupt(&test.images, k, s + 1, cfg.eval.corruption_seed, &cfg.eval.corruption_grid)?;
                    let x = represent(cfg, encoder, &images, parallel)?;
                    *slot = error_pct(clf.accuracy(&x, &y_test)?);
                }
                rows.push(RobustRow {
                    kind: k.name().into(),
                    errors: e,
                });
                errors.insert(k.name().to_string(), e);
            }
            let increase = rows
                .iter()
                .flat_map(|r| r.errors.iter().map(|e| e - clean))
                .sum::<f64>()
                / (rows.len() * SEVERITIES) as f64;
            let table = ErrorTable {
                errors,
                clean,
                normalizers: cfg.eval.normalizers.clone(),
            };
            json!({
                "clean_error": clean,
                "rows": to_value(&rows)?,
                "mean_error_increase": increase,
                "report": to_value(&mce_rce(&table)?)?,
            })
        }
        EvalKind::Graph => {
            let x = reps(test)?;
            let n = cfg.eval.graph_points.min(x.rows());
            let idx: Vec<usize> = (0..n).collect();
            to_value(&overlap_graph_diagnostics(
                &x.select_rows(&idx),
                cfg.eval.graph_radius,
                cfg.eval.er.as_ref(),
            )?)?
        }
    };
    let mut obj = json!({ "kind": kind.name() });
    if let (Value::Object(o), Value::Object(b)) = (&mut obj, body) {
        o.extend(b);
    }
    Ok(obj)
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub record: MetricsRecord,
}

impl EvalOutcome {
    /// `key  value` lines for the scalar entries of the result.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        if let Some(Value::Object(o)) = &self.record.eval {
            for (k, v) in o {
                let shown = match v {
                    Value::Number(_) | Value::String(_) | Value::Bool(_) | Value::Null => v.to_string(),
                    Value::Array(a) => format!("[{} entries]", a.len()),
                    Value::Object(m) => format!("{{{} fields}}", m.len()),
                };
                out.push_str(&format!("{k:<22}{shown}\n"));
            }
        }
        out
    }
}

/// Loads the checkpoint's encoder, evaluates and appends to the run log in
/// the checkpoint's directory. `test_path` overrides the configured test set.
pub fn run_eval(
    kind: EvalKind,
    checkpoint: &Path,
    cfg: &RunConfig,
    test_path: Option<&Path>,
    single_thread: bool,
) -> Result<EvalOutcome> {
    cfg.validate()?;
    let spec = cfg.model_spec()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let state = TrainState::from_checkpoint(cfg, &spec, &ckpt)?;
    let train = train_dataset(cfg)?;
    let test = match test_path {
        Some(p) => deserialize_dataset(p)?,
        None => test_dataset(cfg)?,
    };
    let mut value = evaluate(kind, cfg, &state.online.encoder, &train, &test, !single_thread)?;
    if let Value::Object(o) = &mut value {
        o.insert("checkpoint_step".into(), json!(ckpt.step));
    }
    let run_dir = checkpoint.parent().unwrap_or(Path::new("."));
    let log = MetricsLog::new(run_dir.join(METRICS_FILE));
    // Evaluation records carry the run's latest step so steps never decrease.
    let step = log.last_step()?.unwrap_or(0).max(ckpt.step);
    let record = MetricsRecord::eval(step, value);
    log.append(&record)?;
    Ok(EvalOutcome { record })
}
