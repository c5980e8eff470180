//! Pre-training driver.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;

use super::checkpoint::{Checkpoint, VERSION};
use super::config::RunConfig;
use super::log::{MetricsLog, MetricsRecord};
use crate::augment::{augment_view, AugmentationSpec, ImageBatch};
use crate::datagen::{deserialize_dataset, generate_content_style, write_atomic, ContentStyleConfig, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{cosine_schedule, ema_blend, ema_tau, encode, Lars, Layer, Parameters};
use crate::objective::{loss_and_grads, LossValues, ModelParams, ModelSpec, TargetMode};
use crate::rng::{derive_seed, seeded, Rng, RngState};
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub single_thread: bool,
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) before this step.
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub step: u64,
    pub checkpoint: PathBuf,
    pub last_loss: Option<LossValues>,
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("ckpt-{step:08}.rlck"))
}

/// Checkpoints in `run_dir` sorted by step.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(run_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rlck"))
        .collect();
    out.sort();
    Ok(out)
}

pub struct Optimizers {
    pub encoder: Lars,
    pub critic: Option<Lars>,
    pub predictor: Option<Lars>,
}

pub struct TrainState {
    pub step: u64,
    pub online: ModelParams,
    pub target: Option<ModelParams>,
    pub opt: Optimizers,
    /// Draws the minibatch indices.
    pub sampler: Rng,
}

fn target_spec(spec: &ModelSpec) -> ModelSpec {
    ModelSpec {
        predictor: None,
        ..spec.clone()
    }
}

fn named_layers<'a>(prefix: &str, parts: impl Iterator<Item = (&'a str, &'a [Layer])>) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (part, layers) in parts {
        for (i, l) in layers.iter().enumerate() {
            out.push((format!("{prefix}.{part}.{i}.weight"), l.weight.clone()));
            out.push((format!("{prefix}.{part}.{i}.bias"), l.bias.clone()));
        }
    }
    out
}

fn model_parts(m: &ModelParams) -> impl Iterator<Item = (&str, &[Layer])> {
    [("encoder", Some(&m.encoder)), ("critic", m.critic.as_ref()), ("predictor", m.predictor.as_ref())]
        .into_iter()
        .filter_map(|(n, p)| p.map(|p| (n, p.layers.as_slice())))
}

fn layers_from(tensors: &[Tensor]) -> Result<Vec<Layer>> {
    if !tensors.len().is_multiple_of(2) {
        return Err(Error::format(0, "momentum buffers are not weight/bias pairs"));
    }
    Ok(tensors
        .chunks(2)
        .map(|c| Layer {
            weight: c[0].clone(),
            bias: c[1].clone(),
        })
        .collect())
}

impl TrainState {
    pub fn init(cfg: &RunConfig, spec: &ModelSpec) -> Result<Self> {
        let online = ModelParams::init(spec, &mut seeded(derive_seed(&[cfg.seed, 0x1417])))?;
        let target = (cfg.objective.target_mode == TargetMode::Ema).then(|| online.target_copy());
        let opt = Optimizers {
            encoder: Lars::new(&online.encoder),
            critic: online.critic.as_ref().map(Lars::new),
            predictor: online.predictor.as_ref().map(Lars::new),
        };
        Ok(Self {
            step: 0,
            online,
            target,
            opt,
            sampler: seeded(derive_seed(&[cfg.seed, 0xBA7C])),
        })
    }

    pub fn to_checkpoint(&self, config_hash: [u8; 32]) -> Checkpoint {
        let mut tensors = named_layers("online", model_parts(&self.online));
        if let Some(t) = &self.target {
            tensors.extend(named_layers("target", model_parts(t)));
        }
        let lars = [
            ("encoder", Some(&self.opt.encoder)),
            ("critic", self.opt.critic.as_ref()),
            ("predictor", self.opt.predictor.as_ref()),
        ];
        tensors.extend(named_layers(
            "lars",
            lars.into_iter().filter_map(|(n, l)| l.map(|l| (n, l.buffers()))),
        ));
        Checkpoint {
            version: VERSION,
            config_hash,
            step: self.step,
            tensors,
            rng_states: vec![RngState::capture(&self.sampler)],
        }
    }

    pub fn from_checkpoint(cfg: &RunConfig, spec: &ModelSpec, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config_hash != cfg.hash()? {
            return Err(Error::format(6, "checkpoint was written under a different config"));
        }
        let step = ckpt.step;
        let online = ModelParams::from_tensors(spec, &ckpt.with_prefix("online."), step)?;
        let target = match cfg.objective.target_mode {
            TargetMode::Ema => Some(ModelParams::from_tensors(&target_spec(spec), &ckpt.with_prefix("target."), 0)?),
            TargetMode::Shared => None,
        };
        let lars = |part: &str| -> Result<Option<Lars>> {
            let t = ckpt.with_prefix(&format!("lars.{part}."));
            Ok((!t.is_empty()).then(|| layers_from(&t)).transpose()?.map(Lars::from_buffers))
        };
        let opt = Optimizers {
            encoder: lars("encoder")?.ok_or_else(|| Error::format(0, "missing encoder momentum"))?,
            critic: lars("critic")?,
            predictor: lars("predictor")?,
        };
        let sampler = ckpt
            .rng_states
            .first()
            .ok_or_else(|| Error::format(0, "missing sampler state"))?
            .restore();
        Ok(Self {
            step,
            online,
            target,
            opt,
            sampler,
        })
    }
}

pub struct StepOutput {
    pub loss: LossValues,
    pub lr: f64,
    pub ema_tau: Option<f64>,
}

/// One optimisation step on a fresh minibatch.
pub fn train_step(
    cfg: &RunConfig,
    spec: &ModelSpec,
    data: &ImageBatch,
    state: &mut TrainState,
    parallel: bool,
) -> Result<StepOutput> {
    let k = state.step;
    let opt = &cfg.optimizer;
    if opt.batch_size > data.n {
        return Err(Error::config(format!(
            "batch_size {} exceeds the {} training images",
            opt.batch_size, data.n
        )));
    }
    let idx = sample(&mut state.sampler, data.n, opt.batch_size).into_vec();
    let batch = data.select(&idx);
    let views = (0..cfg.objective.num_views())
        .map(|v| augment_view(&cfg.augment, &batch, cfg.seed, k, v as u64, parallel)?.to_tensor())
        .collect::<Result<Vec<_>>>()?;
    let (loss, grads) = loss_and_grads(spec, &cfg.objective, &state.online, state.target.as_ref(), &views)?;
    let lr = cosine_schedule(k, opt)?;
    let on = &mut state.online;
    state.opt.encoder.step(&mut on.encoder, &grads.encoder, opt, lr, "encoder")?;
    for (name, p, g, l) in [
        ("critic", on.critic.as_mut(), grads.critic.as_ref(), state.opt.critic.as_mut()),
        ("predictor", on.predictor.as_mut(), grads.predictor.as_ref(), state.opt.predictor.as_mut()),
    ] {
        if let (Some(p), Some(g), Some(l)) = (p, g, l) {
            l.step(p, g, opt, lr, name)?;
        }
    }
    let mut ema = None;
    if let Some(t) = state.target.as_mut() {
        let tau = ema_tau(k, opt.total_steps, cfg.objective.ema_tau_base)?;
        t.encoder = ema_blend(&state.online.encoder, &t.encoder, tau)?;
        if let (Some(o), Some(tc)) = (&state.online.critic, t.critic.as_mut()) {
            *tc = ema_blend(o, tc, tau)?;
        }
        ema = Some(tau);
    }
    state.step += 1;
    Ok(StepOutput { loss, lr, ema_tau: ema })
}

fn load_or_generate(path: &Option<PathBuf>, gen: &ContentStyleConfig, seed: u64) -> Result<LabeledDataset> {
    match path {
        Some(p) => deserialize_dataset(p),
        None => generate_content_style(gen, seed),
    }
}

pub fn train_dataset(cfg: &RunConfig) -> Result<LabeledDataset> {
    load_or_generate(&cfg.data.train_path, &cfg.data.generate, cfg.data.train_seed)
}

pub fn test_dataset(cfg: &RunConfig) -> Result<LabeledDataset> {
    let gen = ContentStyleConfig {
        n_samples: cfg.data.test_samples,
        ..cfg.data.generate.clone()
    };
    load_or_generate(&cfg.data.test_path, &gen, cfg.data.test_seed)
}

/// Encoder outputs on un-augmented, normalised images.
pub fn represent(cfg: &RunConfig, params: &Parameters, images: &ImageBatch, parallel: bool) -> Result<Tensor> {
    let spec = AugmentationSpec {
        mean: cfg.augment.mean.clone(),
        std: cfg.augment.std.clone(),
        ..AugmentationSpec::disabled(cfg.augment.out_size)
    };
    let x = augment_view(&spec, images, 0, 0, 0, parallel)?.to_tensor()?;
    encode(params, &cfg.encoder_spec(), &x)
}

/// Trains per `cfg` in `cfg.out_dir`, starting fresh or from `opts.resume`.
pub fn run_pretrain(cfg: &RunConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let spec = cfg.model_spec()?;
    let hash = cfg.hash()?;
    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let log = MetricsLog::new(dir.join(METRICS_FILE));

    let mut state = match &opts.resume {
        Some(p) => {
            let state = TrainState::from_checkpoint(cfg, &spec, &Checkpoint::load(p)?)?;
            log.truncate_before(state.step)?;
            state
        }
        None => {
            write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml_string()?.as_bytes())?;
            write_atomic(log.path(), b"")?;
            let state = TrainState::init(cfg, &spec)?;
            state.to_checkpoint(hash).save(&checkpoint_path(&dir, 0))?;
            state
        }
    };

    let data = train_dataset(cfg)?;
    let total = cfg.optimizer.total_steps;
    let stop = opts.stop_at.map_or(total, |s| s.min(total));
    let parallel = !opts.single_thread;
    let started = Instant::now();
    let mut last_loss = None;
    while state.step < stop {
        let k = state.step;
        let out = train_step(cfg, &spec, &data.images, &mut state, parallel)?;
        last_loss = Some(out.loss);
        if k % cfg.train.log_every == 0 || k + 1 == total {
            log.append(&MetricsRecord {
                step: k,
                loss: Some(out.loss),
                lr: Some(out.lr),
                ema_tau: out.ema_tau,
                wall_time: parallel.then(|| started.elapsed().as_secs_f64()),
                eval: None,
            })?;
        }
        let every = cfg.train.checkpoint_every;
        if state.step == stop || (every > 0 && state.step % every == 0) {
            state.to_checkpoint(hash).save(&checkpoint_path(&dir, state.step))?;
        }
    }
    let checkpoint = checkpoint_path(&dir, state.step);
    if !checkpoint.exists() {
        state.to_checkpoint(hash).save(&checkpoint)?;
    }
    check_run_dir(&dir)?;
    Ok(RunSummary {
        run_dir: dir,
        step: state.step,
        checkpoint,
        last_loss,
    })
}

/// A run directory holds the resolved config, a metrics log and at least
/// one checkpoint.
pub fn check_run_dir(dir: &Path) -> Result<()> {
    for f in [CONFIG_FILE, METRICS_FILE] {
        if !dir.join(f).is_file() {
            return Err(Error::State(format!("run directory lacks {f}")));
        }
    }
    if list_checkpoints(dir)?.is_empty() {
        return Err(Error::State("run directory has no checkpoint".into()));
    }
    Ok(())
}
