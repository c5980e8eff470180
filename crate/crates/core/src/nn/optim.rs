//! LARS with momentum, the warmup + cosine learning-rate schedule and the
//! EMA target-network update.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::network::{Gradients, Layer, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Large-scale recipe is batch 4096, 1000 epochs with 10 of warmup, base lr
/// 0.3 and weight decay 1.5e-6; the defaults here are sized for a laptop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lars_eta: f64,
    /// Biases skip trust-ratio scaling and weight decay.
    pub exclude_bias_and_norm: bool,
    /// Upper clamp on the trust ratio.
    pub trust_clip: f64,
    /// Whether the last layer of each network is weight-decayed.
    pub decay_final_layer: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.3,
            batch_size: 256,
            warmup_steps: 100,
            total_steps: 2000,
            weight_decay: 1.5e-6,
            momentum: 0.9,
            lars_eta: 0.001,
            exclude_bias_and_norm: true,
            trust_clip: 10.0,
            decay_final_layer: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.base_lr > 0.0) {
            bad.push("base_lr");
        }
        if self.batch_size == 0 {
            bad.push("batch_size");
        }
        if self.warmup_steps > self.total_steps {
            bad.push("warmup_steps");
        }
        if !(self.weight_decay >= 0.0) {
            bad.push("weight_decay");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bad.push("momentum");
        }
        if !(self.lars_eta > 0.0) {
            bad.push("lars_eta");
        }
        if !(self.trust_clip > 0.0) {
            bad.push("trust_clip");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer keys: {}", bad.join(", "))))
        }
    }

    /// `base_lr · batch_size / 256`
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }
}

/// Linear warmup to the peak rate, then half-cosine decay to zero.
pub fn cosine_schedule(step: u64, cfg: &OptimizerConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::contract(format!(
            "schedule step {step} beyond total {}",
            cfg.total_steps
        )));
    }
    let peak = cfg.peak_lr();
    if step < cfg.warmup_steps {
        return Ok(peak * step as f64 / cfg.warmup_steps as f64);
    }
    let decay_len = cfg.total_steps - cfg.warmup_steps;
    if decay_len == 0 {
        return Ok(peak);
    }
    let progress = (step - cfg.warmup_steps) as f64 / decay_len as f64;
    Ok(peak * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Target-network mixing coefficient `1 − (1 − τ_base)(cos(πk/K) + 1)/2`.
pub fn ema_tau(k: u64, total: u64, tau_base: f64) -> Result<f64> {
    if total == 0 || k > total {
        return Err(Error::contract(format!("ema step {k} outside 0..={total}")));
    }
    let c = (PI * k as f64 / total as f64).cos();
    Ok(1.0 - (1.0 - tau_base) * (c + 1.0) / 2.0)
}

/// `τ·target + (1−τ)·online`, elementwise.
pub fn ema_blend(online: &Parameters, target: &Parameters, tau: f64) -> Result<Parameters> {
    if online.layers.len() != target.layers.len() {
        return Err(Error::InvalidShape {
            op: "ema_update",
            lhs: vec![online.layers.len()],
            rhs: vec![target.layers.len()],
        });
    }
    let mix = |o: &Tensor, t: &Tensor| -> Result<Tensor> {
        if o.shape() != t.shape() {
            return Err(Error::InvalidShape {
                op: "ema_update",
                lhs: o.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let data = t
            .data()
            .iter()
            .zip(o.data())
            .map(|(tv, ov)| tau * tv + (1.0 - tau) * ov)
            .collect();
        Ok(Tensor::from_parts(t.shape().to_vec(), data))
    };
    let layers = online
        .layers
        .iter()
        .zip(&target.layers)
        .map(|(o, t)| {
            Ok(Layer {
                weight: mix(&o.weight, &t.weight)?,
                bias: mix(&o.bias, &t.bias)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Parameters {
        layers,
        step: target.step,
    })
}

/// EMA update at step `k` of `total` using the cosine-increasing τ.
pub fn ema_update(
    online: &Parameters,
    target: &Parameters,
    k: u64,
    total: u64,
    tau_base: f64,
) -> Result<Parameters> {
    ema_blend(online, target, ema_tau(k, total, tau_base)?)
}

/// Momentum buffers for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Lars {
    velocity: Vec<Layer>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Lars {
    pub fn new(params: &Parameters) -> Self {
        Self {
            velocity: params
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }

    pub fn from_buffers(velocity: Vec<Layer>) -> Self {
        Self { velocity }
    }

    pub fn buffers(&self) -> &[Layer] {
        &self.velocity
    }

    /// One LARS update in place. `network` labels errors.
    pub fn step(
        &mut self,
        params: &mut Parameters,
        grads: &Gradients,
        cfg: &OptimizerConfig,
        lr: f64,
        network: &str,
    ) -> Result<()> {
        if grads.layers.len() != params.layers.len() || self.velocity.len() != params.layers.len()
        {
            return Err(Error::contract("gradient/parameter layer count mismatch"));
        }
        for (i, (g, p)) in grads.layers.iter().zip(&params.layers).enumerate() {
            if g.weight.shape() != p.weight.shape() || g.bias.shape() != p.bias.shape() {
                return Err(Error::InvalidShape {
                    op: "lars_step",
                    lhs: p.weight.shape().to_vec(),
                    rhs: g.weight.shape().to_vec(),
                });
            }
            if !g.weight.data().iter().chain(g.bias.data()).all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    network: network.to_string(),
                    layer: i,
                });
            }
        }

        let last = params.layers.len() - 1;
        for (i, ((layer, grad), vel)) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.velocity)
            .enumerate()
        {
            let wd = if i == last && !cfg.decay_final_layer {
                0.0
            } else {
                cfg.weight_decay
            };
            update(&mut layer.weight, &grad.weight, &mut vel.weight, wd, true, cfg, lr);
            if cfg.exclude_bias_and_norm {
                update(&mut layer.bias, &grad.bias, &mut vel.bias, 0.0, false, cfg, lr);
            } else {
                update(&mut layer.bias, &grad.bias, &mut vel.bias, wd, true, cfg, lr);
            }
        }
        params.step += 1;
        Ok(())
    }
}

fn update(
    w: &mut Tensor,
    g: &Tensor,
    v: &mut Tensor,
    wd: f64,
    adapt: bool,
    cfg: &OptimizerConfig,
    lr: f64,
) {
    let trust = if adapt {
        let (wn, gn) = (norm(w.data()), norm(g.data()));
        let denom = gn + wd * wn;
        if wn > 0.0 && denom > 0.0 {
            (cfg.lars_eta * wn / denom).clamp(0.0, cfg.trust_clip)
        } else {
            1.0
        }
    } else {
        1.0
    };
    let mut wv = std::mem::replace(w, Tensor::scalar(0.0)).into_data();
    let mut vv = std::mem::replace(v, Tensor::scalar(0.0)).into_data();
    for ((wi, gi), vi) in wv.iter_mut().zip(g.data()).zip(vv.iter_mut()) {
        let direction = trust * (gi + wd * *wi);
        *vi = cfg.momentum * *vi + direction;
        *wi -= lr * *vi;
    }
    *w = Tensor::from_parts(g.shape().to_vec(), wv);
    *v = Tensor::from_parts(g.shape().to_vec(), vv);
}

/// Functional LARS step starting from zero momentum.
pub fn lars_step(
    params: &Parameters,
    grads: &Gradients,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<Parameters> {
    let mut out = params.clone();
    Lars::new(params).step(&mut out, grads, cfg, lr, "network")?;
    Ok(out)
}
