//! Run configuration in TOML.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentationSpec;
use crate::datagen::{ContentStyleConfig, CorruptionGrid};
use crate::error::{Error, Result};
use crate::metrics::{alexnet_normalizers, ErParams, Normalizer, ProbeConfig};
use crate::nn::{NetworkSpec, OptimizerConfig};
use crate::objective::{preset, ModelSpec, ObjectiveConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training set file; generated from `generate` and `seed` when absent.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub generate: ContentStyleConfig,
    /// Seed offsets of the generated splits.
    pub train_seed: u64,
    pub test_seed: u64,
    pub test_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_path: None,
            test_path: None,
            generate: ContentStyleConfig::default(),
            train_seed: 1,
            test_seed: 2,
            test_samples: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_widths: Vec<usize>,
    pub normalize_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![128, 64],
            normalize_encoder: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub log_every: u64,
    /// Zero keeps only the initial and final checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            log_every: 10,
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub corruption_grid: CorruptionGrid,
    pub corruption_seed: u64,
    /// Keyed by corruption name.
    pub normalizers: BTreeMap<String, Normalizer>,
    pub graph_radius: f64,
    /// Rows of the test set used for the overlap graph.
    pub graph_points: usize,
    pub er: Option<ErParams>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            corruption_grid: CorruptionGrid::default(),
            corruption_seed: 7,
            normalizers: alexnet_normalizers(),
            graph_radius: 0.25,
            graph_points: 200,
            er: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub augment: AugmentationSpec,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            augment: AugmentationSpec::default(),
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Replaces the objective with a named preset.
    pub fn with_preset(mut self, name: &str) -> Result<Self> {
        self.objective = preset(name)?;
        Ok(self)
    }

    /// Checks every section, listing all offending keys at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        let mut sub = |section: &str, r: Result<()>| {
            match r {
                Ok(()) => {}
                Err(Error::Config(m)) => bad.push(format!("[{section}] {m}")),
                Err(e) => bad.push(format!("[{section}] {e}")),
            }
        };
        sub("data.generate", self.data.generate.validate());
        sub("augment", self.augment.validate());
        sub("objective", self.objective.validate());
        sub("optimizer", self.optimizer.validate());
        sub("eval.probe", self.eval.probe.validate());
        sub("model", self.model_spec().map(|_| ()));
        if self.train.log_every == 0 {
            bad.push("train.log_every".into());
        }
        if self.optimizer.batch_size < 2 {
            bad.push("optimizer.batch_size".into());
        }
        if self.data.test_samples < 2 {
            bad.push("data.test_samples".into());
        }
        if !(self.eval.graph_radius >= 0.0) {
            bad.push("eval.graph_radius".into());
        }
        if self.eval.graph_points < 2 {
            bad.push("eval.graph_points".into());
        }
        if self.data.generate.height != self.augment.out_size[0]
            || self.data.generate.width != self.augment.out_size[1]
        {
            bad.push("augment.out_size (must match the image size)".into());
        }
        if self.augment.mean.len() != self.data.generate.channels {
            bad.push("augment.mean/std (one entry per channel)".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("invalid keys: {}", bad.join("; "))))
        }
    }

    pub fn input_dim(&self) -> usize {
        let [h, w] = self.augment.out_size;
        h * w * self.data.generate.channels
    }

    pub fn encoder_spec(&self) -> NetworkSpec {
        NetworkSpec::new(
            self.input_dim(),
            self.model.encoder_widths.clone(),
            self.model.normalize_encoder,
        )
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        self.objective.model_spec(&self.encoder_spec())
    }

    /// SHA-256 of the serialized config with the output directory blanked,
    /// so a run can be resumed or compared from another location.
    pub fn hash(&self) -> Result<[u8; 32]> {
        let canonical = RunConfig {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        Ok(Sha256::digest(canonical.to_toml_string()?.as_bytes()).into())
    }
}
