//! Contrastive instance discrimination with an invariance penalty between
//! the predictive distributions of different augmentation pairs.
//!
//! For an augmentation pair `(l, k)` each anchor `g(f(x_i^l))` is scored
//! against every candidate `g(h(x_j^k))` of the other view; `p(j | i)` is the
//! row softmax of those scores over `τ`. The loss sums the cross-entropy at
//! the positives over pairs and adds `α` times the symmetrised KL between the
//! distributions of different pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BoundNetwork, Gradients, NetworkSpec, Parameters};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var, NORM_EPS};

/// Probabilities are floored at this value inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    Identity,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    KlSymmetric,
    /// Squared distance between encoder features of the two views.
    Euclidean,
    None,
    /// Squared distance between the normalised online prediction and the
    /// normalised, gradient-stopped target projection.
    PredictorL2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Candidates use the online networks, gradients flow through both sides.
    Shared,
    /// Candidates use an exponential moving average of the online networks.
    Ema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub tau: f64,
    pub alpha: f64,
    pub critic: CriticKind,
    pub critic_widths: Vec<usize>,
    pub normalize_critic: bool,
    pub regularizer: Regularizer,
    pub target_mode: TargetMode,
    pub contrastive: bool,
    /// Candidates per anchor; unset means the whole other view.
    pub contrast_size: Option<usize>,
    /// Empty means no predictor head.
    pub predictor_widths: Vec<usize>,
    /// Augmentation pairs `(anchor view, candidate view)`.
    pub pairs: Vec<(usize, usize)>,
    pub ema_tau_base: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        preset("relic").expect("known preset")
    }
}

/// Named configurations recovering related methods.
pub fn preset(name: &str) -> Result<ObjectiveConfig> {
    let base = ObjectiveConfig {
        tau: 0.1,
        alpha: 1.0,
        critic: CriticKind::Mlp,
        critic_widths: vec![64, 32],
        normalize_critic: true,
        regularizer: Regularizer::KlSymmetric,
        target_mode: TargetMode::Ema,
        contrastive: true,
        contrast_size: None,
        predictor_widths: Vec::new(),
        pairs: vec![(0, 1), (1, 0)],
        ema_tau_base: 0.996,
    };
    Ok(match name {
        "relic" => base,
        "simclr" => ObjectiveConfig {
            alpha: 0.0,
            regularizer: Regularizer::None,
            target_mode: TargetMode::Shared,
            ..base
        },
        "amdim_style" => ObjectiveConfig {
            alpha: 0.0,
            critic: CriticKind::Identity,
            critic_widths: Vec::new(),
            regularizer: Regularizer::None,
            target_mode: TargetMode::Shared,
            ..base
        },
        "byol_style" => ObjectiveConfig {
            contrastive: false,
            regularizer: Regularizer::PredictorL2,
            predictor_widths: vec![32],
            ..base
        },
        other => return Err(Error::config(format!("unknown preset {other:?}"))),
    })
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            bad.push("tau");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            bad.push("alpha");
        }
        if self.critic == CriticKind::Mlp && self.critic_widths.is_empty() {
            bad.push("critic_widths");
        }
        if self.contrast_size == Some(0) {
            bad.push("contrast_size");
        }
        if self.pairs.is_empty() || self.pairs.iter().any(|(l, k)| l == k) {
            bad.push("pairs");
        }
        if self.regularizer == Regularizer::PredictorL2 && self.predictor_widths.is_empty() {
            bad.push("predictor_widths");
        }
        if !self.contrastive && self.regularizer == Regularizer::None {
            bad.push("contrastive");
        }
        if !(0.0..=1.0).contains(&self.ema_tau_base) {
            bad.push("ema_tau_base");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("invalid objective keys: {}", bad.join(", "))))
        }
    }

    pub fn num_views(&self) -> usize {
        self.pairs.iter().map(|&(l, k)| l.max(k) + 1).max().unwrap_or(2)
    }

    /// Shapes of the online networks given the encoder.
    pub fn model_spec(&self, encoder: &NetworkSpec) -> Result<ModelSpec> {
        self.validate()?;
        encoder.validate()?;
        let critic = match self.critic {
            CriticKind::Identity => None,
            CriticKind::Mlp => Some(NetworkSpec::new(
                encoder.output_dim(),
                self.critic_widths.clone(),
                false,
            )),
        };
        let proj_dim = critic.as_ref().map_or(encoder.output_dim(), NetworkSpec::output_dim);
        let predictor = if self.predictor_widths.is_empty() {
            None
        } else {
            let p = NetworkSpec::new(proj_dim, self.predictor_widths.clone(), false);
            if p.output_dim() != proj_dim {
                return Err(Error::config(format!(
                    "predictor must map back to the projection width {proj_dim}"
                )));
            }
            Some(p)
        };
        Ok(ModelSpec {
            encoder: encoder.clone(),
            critic,
            predictor,
            normalize_critic: self.normalize_critic,
        })
    }
}

/// Encoder `f`, optional critic `g` and optional predictor `q`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub encoder: NetworkSpec,
    pub critic: Option<NetworkSpec>,
    pub predictor: Option<NetworkSpec>,
    pub normalize_critic: bool,
}

impl ModelSpec {
    fn parts(&self) -> impl Iterator<Item = &NetworkSpec> {
        std::iter::once(&self.encoder)
            .chain(self.critic.as_ref())
            .chain(self.predictor.as_ref())
    }

    pub fn num_tensors(&self) -> usize {
        self.parts().map(|s| 2 * s.layer_widths.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: Parameters,
    pub critic: Option<Parameters>,
    pub predictor: Option<Parameters>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub encoder: Gradients,
    pub critic: Option<Gradients>,
    pub predictor: Option<Gradients>,
}

impl ModelParams {
    pub fn init(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            encoder: Parameters::init(&spec.encoder, rng)?,
            critic: spec.critic.as_ref().map(|s| Parameters::init(s, rng)).transpose()?,
            predictor: spec
                .predictor
                .as_ref()
                .map(|s| Parameters::init(s, rng))
                .transpose()?,
        })
    }

    /// Encoder, then critic, then predictor tensors.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = self.encoder.tensors();
        for p in self.critic.iter().chain(self.predictor.iter()) {
            out.extend(p.tensors());
        }
        out
    }

    pub fn from_tensors(spec: &ModelSpec, tensors: &[Tensor], step: u64) -> Result<Self> {
        if tensors.len() != spec.num_tensors() {
            return Err(Error::contract("tensor count does not match the model spec"));
        }
        let mut rest = tensors;
        let mut take = |s: &NetworkSpec| {
            let (head, tail) = rest.split_at(2 * s.layer_widths.len());
            rest = tail;
            Parameters::from_tensors(s, head, step)
        };
        Ok(Self {
            encoder: take(&spec.encoder)?,
            critic: spec.critic.as_ref().map(&mut take).transpose()?,
            predictor: spec.predictor.as_ref().map(&mut take).transpose()?,
        })
    }

    /// The networks a target copy tracks (encoder and critic).
    pub fn target_copy(&self) -> Self {
        Self {
            encoder: self.encoder.clone(),
            critic: self.critic.clone(),
            predictor: None,
        }
    }

    pub fn conforms_to(&self, spec: &ModelSpec) -> bool {
        let opt = |p: &Option<Parameters>, s: &Option<NetworkSpec>| match (p, s) {
            (Some(p), Some(s)) => p.conforms_to(s),
            (None, None) => true,
            _ => false,
        };
        self.encoder.conforms_to(&spec.encoder)
            && opt(&self.critic, &spec.critic)
            && opt(&self.predictor, &spec.predictor)
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundModel<'t> {
        BoundModel {
            encoder: self.encoder.bind(tape, trainable),
            critic: self.critic.as_ref().map(|p| p.bind(tape, trainable)),
            predictor: self.predictor.as_ref().map(|p| p.bind(tape, trainable)),
        }
    }
}

/// Model networks recorded on a tape.
pub struct BoundModel<'t> {
    encoder: BoundNetwork<'t>,
    critic: Option<BoundNetwork<'t>>,
    predictor: Option<BoundNetwork<'t>>,
}

impl<'t> BoundModel<'t> {
    /// Model over variables laid out as [`ModelParams::tensors`].
    pub fn from_vars(spec: &ModelSpec, vars: &[Var<'t>]) -> Result<Self> {
        if vars.len() != spec.num_tensors() {
            return Err(Error::contract("variable count does not match the model spec"));
        }
        let mut rest = vars;
        let mut take = |s: &NetworkSpec| {
            let (head, tail) = rest.split_at(2 * s.layer_widths.len());
            rest = tail;
            BoundNetwork::from_vars(head)
        };
        Ok(Self {
            encoder: take(&spec.encoder)?,
            critic: spec.critic.as_ref().map(&mut take).transpose()?,
            predictor: spec.predictor.as_ref().map(&mut take).transpose()?,
        })
    }

    pub fn embed(&self, spec: &ModelSpec, x: Var<'t>) -> Result<Var<'t>> {
        self.encoder.forward(x, spec.encoder.normalize_output)
    }

    /// Critic output `g(·)` of encoder features.
    pub fn project(&self, spec: &ModelSpec, features: Var<'t>) -> Result<Var<'t>> {
        let g = match &self.critic {
            Some(c) => c.forward(features, false)?,
            None => features,
        };
        if spec.normalize_critic {
            g.l2_normalize(1, NORM_EPS)
        } else {
            Ok(g)
        }
    }

    fn predict(&self, projection: Var<'t>) -> Result<Var<'t>> {
        match &self.predictor {
            Some(p) => p.forward(projection, false),
            None => Err(Error::contract("model has no predictor head")),
        }
    }

    pub fn gradients(&self) -> Option<ModelGrads> {
        Some(ModelGrads {
            encoder: self.encoder.gradients()?,
            critic: match &self.critic {
                Some(c) => Some(c.gradients()?),
                None => None,
            },
            predictor: match &self.predictor {
                Some(p) => Some(p.gradients()?),
                None => None,
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Tape-level pieces

/// Scores of anchors against candidates over `τ`, with a mask marking each
/// row's positive.
///
/// With the full contrast set the positive of row `i` is candidate `i`. With
/// `contrast_size = m` row `i` sees candidates `i, i+1, …, i+m−1` (mod N) and
/// the positive sits in column 0.
pub fn score_matrix<'t>(
    anchors: Var<'t>,
    candidates: Var<'t>,
    tau: f64,
    contrast_size: Option<usize>,
) -> Result<(Var<'t>, Tensor)> {
    if !(tau > 0.0) {
        return Err(Error::config("tau must be positive"));
    }
    let (a_shape, c_shape) = (anchors.shape(), candidates.shape());
    if a_shape.len() != 2 || a_shape != c_shape {
        return Err(Error::InvalidShape {
            op: "score_matrix",
            lhs: a_shape,
            rhs: c_shape,
        });
    }
    let (n, k) = (a_shape[0], a_shape[1]);
    let m = contrast_size.unwrap_or(n);
    if m == 0 || m > n {
        return Err(Error::contract(format!("contrast size {m} outside 1..={n}")));
    }
    if m == n {
        let s = anchors.matmul(candidates.transpose()?)?.scale(1.0 / tau)?;
        return Ok((s, Tensor::eye(n)));
    }
    let tape = anchors.tape();
    let ones = tape.constant(Tensor::full(&[k, 1], 1.0));
    let mut cols = Vec::with_capacity(m);
    for shift in 0..m {
        let mut perm = vec![0.0; n * n];
        for i in 0..n {
            perm[i * n + (i + shift) % n] = 1.0;
        }
        let shifted = tape
            .constant(Tensor::from_parts(vec![n, n], perm))
            .matmul(candidates)?;
        cols.push(anchors.mul(shifted)?.matmul(ones)?.transpose()?);
    }
    let s = Var::concat_rows(&cols)?.transpose()?.scale(1.0 / tau)?;
    let mut mask = vec![0.0; n * m];
    for i in 0..n {
        mask[i * m] = 1.0;
    }
    Ok((s, Tensor::from_parts(vec![n, m], mask)))
}

/// Mean over rows of `−log max(p, floor)` at the masked positives.
pub fn contrastive_var<'t>(probs: Var<'t>, positives: &Tensor) -> Result<Var<'t>> {
    let rows = probs.shape()[0] as f64;
    let mask = probs.tape().constant(positives.clone());
    probs
        .clamp_min(PROB_FLOOR)?
        .log()?
        .mul(mask)?
        .sum()?
        .scale(-1.0 / rows)
}

/// Mean over rows of `½[KL(p‖q) + KL(q‖p)]` with floored logs.
pub fn symmetric_kl_var<'t>(p: Var<'t>, q: Var<'t>) -> Result<Var<'t>> {
    let lp = p.clamp_min(PROB_FLOOR)?.log()?;
    let lq = q.clamp_min(PROB_FLOOR)?.log()?;
    p.sub(q)?.mul(lp.sub(lq)?)?.sum_axis(Some(1))?.mean()?.scale(0.5)
}

fn squared_distance_var<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let d = a.sub(b)?;
    d.mul(d)?.sum_axis(Some(1))?.mean()
}

/// Loss and its two parts as tape variables.
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub contrastive: Var<'t>,
    pub penalty: Var<'t>,
}

/// Scalar values of a loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub contrastive: f64,
    pub penalty: f64,
}

impl LossTerms<'_> {
    pub fn values(&self) -> LossValues {
        LossValues {
            total: self.total.item(),
            contrastive: self.contrastive.item(),
            penalty: self.penalty.item(),
        }
    }
}

/// The full objective on a set of augmented views (each `N × D`).
///
/// `target = None` shares the online networks between anchors and
/// candidates.
pub fn relic_loss<'t>(
    spec: &ModelSpec,
    cfg: &ObjectiveConfig,
    online: &BoundModel<'t>,
    target: Option<&BoundModel<'t>>,
    views: &[Var<'t>],
) -> Result<LossTerms<'t>> {
    cfg.validate()?;
    if views.len() < cfg.num_views() {
        return Err(Error::contract(format!(
            "{} views supplied, pairs need {}",
            views.len(),
            cfg.num_views()
        )));
    }
    let tape = views[0].tape();
    let n = views[0].shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::contract("batch needs at least two samples"));
    }

    let mut feats = Vec::with_capacity(views.len());
    let mut proj = Vec::with_capacity(views.len());
    let mut t_feats = Vec::with_capacity(views.len());
    let mut t_proj = Vec::with_capacity(views.len());
    for &x in views {
        let f = online.embed(spec, x)?;
        let g = online.project(spec, f)?;
        feats.push(f);
        proj.push(g);
        match target {
            Some(t) => {
                let tf = t.embed(spec, x)?;
                t_proj.push(t.project(spec, tf)?);
                t_feats.push(tf);
            }
            None => {
                t_feats.push(f);
                t_proj.push(g);
            }
        }
    }
    if cfg.regularizer == Regularizer::PredictorL2 {
        for v in t_proj.iter_mut().chain(t_feats.iter_mut()) {
            *v = v.detach();
        }
    }

    let zero = || tape.constant(Tensor::scalar(0.0));
    let mut dists = Vec::new();
    let mut contrastive = zero();
    if cfg.contrastive || cfg.regularizer == Regularizer::KlSymmetric {
        for &(l, k) in &cfg.pairs {
            let (scores, mask) = score_matrix(proj[l], t_proj[k], cfg.tau, cfg.contrast_size)?;
            let p = scores.row_softmax()?;
            if cfg.contrastive {
                contrastive = contrastive.add(contrastive_var(p, &mask)?)?;
            }
            dists.push(p);
        }
    }

    let penalty = match cfg.regularizer {
        Regularizer::None => zero(),
        Regularizer::KlSymmetric => {
            let mut acc = zero();
            let mut count = 0usize;
            for a in 0..dists.len() {
                for b in a + 1..dists.len() {
                    acc = acc.add(symmetric_kl_var(dists[a], dists[b])?)?;
                    count += 1;
                }
            }
            if count > 1 {
                acc = acc.scale(1.0 / count as f64)?;
            }
            acc
        }
        Regularizer::Euclidean => {
            let mut acc = zero();
            for &(l, k) in &cfg.pairs {
                acc = acc.add(squared_distance_var(feats[l], t_feats[k])?)?;
            }
            acc.scale(1.0 / cfg.pairs.len() as f64)?
        }
        Regularizer::PredictorL2 => {
            let mut acc = zero();
            for &(l, k) in &cfg.pairs {
                let q = online.predict(proj[l])?.l2_normalize(1, NORM_EPS)?;
                let t = t_proj[k].l2_normalize(1, NORM_EPS)?;
                acc = acc.add(squared_distance_var(q, t)?)?;
            }
            acc
        }
    };
    let total = contrastive.add(penalty.scale(cfg.alpha)?)?;
    Ok(LossTerms {
        total,
        contrastive,
        penalty,
    })
}

/// Logistic form with an identity critic:
/// `mean_i log(1 + Σ_{m≠i} exp(−f_lᵢᵀ(f_kᵢ − f_kₘ)))` plus
/// `rho · mean_i ‖f(xᵢ) − f_kᵢ‖²`.
pub fn euclidean_objective_var<'t>(
    clean: Var<'t>,
    fl: Var<'t>,
    fk: Var<'t>,
    rho_weight: f64,
) -> Result<Var<'t>> {
    let n = fl.shape()[0];
    let tape = fl.tape();
    let s = fl.matmul(fk.transpose()?)?;
    let eye = tape.constant(Tensor::eye(n));
    let off = tape.constant(Tensor::eye(n).map(|v| 1.0 - v));
    let diag = s.mul(eye)?.sum_axis(Some(0))?;
    // neg_gap[i][m] = s[i][m] − s[i][i]
    let neg_gap = s.transpose()?.sub(diag)?.transpose()?;
    let one = tape.constant(Tensor::scalar(1.0));
    let logistic = neg_gap
        .exp()?
        .mul(off)?
        .sum_axis(Some(1))?
        .add(one)?
        .log()?
        .mean()?;
    logistic.add(squared_distance_var(clean, fk)?.scale(rho_weight)?)
}

/// [`euclidean_objective_var`] on images through the encoder of `params`.
pub fn euclidean_objective(
    spec: &ModelSpec,
    params: &ModelParams,
    clean: &Tensor,
    view_l: &Tensor,
    view_k: &Tensor,
    rho_weight: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let m = params.bind(&tape, false);
    let f = |x: &Tensor| m.embed(spec, tape.constant(x.clone()));
    Ok(euclidean_objective_var(f(clean)?, f(view_l)?, f(view_k)?, rho_weight)?.item())
}

/// Loss values and online-network gradients for one batch of views.
pub fn loss_and_grads(
    spec: &ModelSpec,
    cfg: &ObjectiveConfig,
    online: &ModelParams,
    target: Option<&ModelParams>,
    views: &[Tensor],
) -> Result<(LossValues, ModelGrads)> {
    let tape = Tape::new();
    let on = online.bind(&tape, true);
    let tg = target.map(|t| t.bind(&tape, false));
    let xs: Vec<Var<'_>> = views.iter().map(|v| tape.constant(v.clone())).collect();
    let terms = relic_loss(spec, cfg, &on, tg.as_ref(), &xs)?;
    let values = terms.values();
    if !values.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    tape.backward(terms.total)?;
    let grads = on
        .gradients()
        .ok_or_else(|| Error::State("online gradients missing".into()))?;
    Ok((values, grads))
}

/// Loss values without gradients.
pub fn loss_values(
    spec: &ModelSpec,
    cfg: &ObjectiveConfig,
    online: &ModelParams,
    target: Option<&ModelParams>,
    views: &[Tensor],
) -> Result<LossValues> {
    let tape = Tape::new();
    let on = online.bind(&tape, false);
    let tg = target.map(|t| t.bind(&tape, false));
    let xs: Vec<Var<'_>> = views.iter().map(|v| tape.constant(v.clone())).collect();
    Ok(relic_loss(spec, cfg, &on, tg.as_ref(), &xs)?.values())
}

// ---------------------------------------------------------------------------
// Tensor-level probability model

/// Row-stochastic `p(j | i)` for one augmentation pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyDistribution {
    pub probs: Tensor,
    pub pair: (usize, usize),
}

/// Softmax over `⟨g(a_i), g(c_j)⟩ / τ` for embeddings `anchors` (`N × K`) and
/// `candidates` (`M × K`); `critic = None` is the identity critic.
pub fn proxy_distribution(
    anchors: &Tensor,
    candidates: &Tensor,
    critic: Option<(&NetworkSpec, &Parameters)>,
    cfg: &ObjectiveConfig,
    pair: (usize, usize),
) -> Result<ProxyDistribution> {
    if !(cfg.tau > 0.0) {
        return Err(Error::config("tau must be positive"));
    }
    if anchors.rank() != 2 || candidates.rank() != 2 || anchors.cols() != candidates.cols() {
        return Err(Error::InvalidShape {
            op: "proxy_distribution",
            lhs: anchors.shape().to_vec(),
            rhs: candidates.shape().to_vec(),
        });
    }
    let tape = Tape::new();
    let net = critic.map(|(_, p)| p.bind(&tape, false));
    let project = |x: &Tensor| -> Result<Var<'_>> {
        let mut g = tape.constant(x.clone());
        if let Some(n) = &net {
            g = n.forward(g, false)?;
        }
        if cfg.normalize_critic {
            g = g.l2_normalize(1, NORM_EPS)?;
        }
        Ok(g)
    };
    let (a, c) = (project(anchors)?, project(candidates)?);
    let probs = a
        .matmul(c.transpose()?)?
        .scale(1.0 / cfg.tau)?
        .row_softmax()?
        .value();
    Ok(ProxyDistribution { probs, pair })
}

/// Mean over rows of `−log max(p[row, positive], floor)`.
pub fn contrastive_term(dist: &ProxyDistribution, positives: &[usize]) -> Result<f64> {
    let (rows, cols) = (dist.probs.rows(), dist.probs.cols());
    if positives.len() != rows || positives.iter().any(|&j| j >= cols) {
        return Err(Error::contract("one valid positive index per row required"));
    }
    let total: f64 = positives
        .iter()
        .enumerate()
        .map(|(i, &j)| -dist.probs.at(i, j).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / rows as f64)
}

/// Mean over unordered pairs of distributions and over rows of the
/// symmetrised KL divergence with floored logs.
pub fn invariance_penalty(dists: &[ProxyDistribution]) -> Result<f64> {
    if let Some(first) = dists.first() {
        if dists.iter().any(|d| d.probs.shape() != first.probs.shape()) {
            return Err(Error::contract("distributions differ in shape"));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for a in 0..dists.len() {
        for b in a + 1..dists.len() {
            let (p, q) = (&dists[a].probs, &dists[b].probs);
            let mut acc = 0.0;
            for (&pv, &qv) in p.data().iter().zip(q.data()) {
                acc += (pv - qv) * (pv.max(PROB_FLOOR).ln() - qv.max(PROB_FLOOR).ln());
            }
            total += 0.5 * acc / p.rows() as f64;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
