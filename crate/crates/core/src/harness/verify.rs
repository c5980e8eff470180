//! Verification drivers: invariance-implication sweeps and the gradient suite.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::Rng as _;
use serde::Serialize;

use crate::causal::{sweep_fuzz, sweep_grid, uniform_grid, Fuzzer, GridEnumeration, Limits, SweepSummary};
use crate::datagen::write_atomic;
use crate::error::{Error, Result};
use crate::nn::NetworkSpec;
use crate::objective::{euclidean_objective_var, preset, relic_loss, BoundModel, ModelParams, TargetMode};
use crate::rng::{derive_seed, seeded, Rng};
use crate::tensor::gradcheck::{check_gradients, GradCheckReport, Tolerance};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifyMode {
    Theorem1Grid,
    Theorem1Fuzz,
    GradientSuite,
}

impl VerifyMode {
    pub fn name(self) -> &'static str {
        match self {
            VerifyMode::Theorem1Grid => "theorem1-grid",
            VerifyMode::Theorem1Fuzz => "theorem1-fuzz",
            VerifyMode::GradientSuite => "gradient-suite",
        }
    }
}

impl fmt::Display for VerifyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VerifyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [VerifyMode::Theorem1Grid, VerifyMode::Theorem1Fuzz, VerifyMode::GradientSuite]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown verify mode {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub grid_limits: Limits,
    /// Denominator of the probability grid.
    pub grid_q: u32,
    pub fuzz_limits: Limits,
    pub fuzz_count: u64,
    pub tol: f64,
    /// Random configurations per gradient check.
    pub gradient_configs: usize,
    pub parallel: bool,
    /// Where a counterexample is archived.
    pub out_dir: Option<PathBuf>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            grid_limits: Limits::grid_default(),
            grid_q: 4,
            fuzz_limits: Limits::fuzz_default(),
            fuzz_count: 100_000,
            tol: 1e-9,
            gradient_configs: 20,
            parallel: true,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradEntry {
    pub name: String,
    pub configs: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub failures: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub mode: String,
    pub models: u64,
    pub antecedent_true: u64,
    pub violations: u64,
    pub skipped_cells: u64,
    pub counterexample: Option<String>,
    pub gradients: Vec<GradEntry>,
    pub passed: bool,
}

impl VerifyReport {
    fn from_sweep(mode: VerifyMode, s: SweepSummary) -> Self {
        Self {
            mode: mode.name().into(),
            models: s.models,
            antecedent_true: s.antecedent_true,
            violations: s.violations,
            skipped_cells: s.skipped_cells,
            passed: s.violations == 0,
            counterexample: s.first_counterexample.map(|(_, t)| t),
            gradients: Vec::new(),
        }
    }

    pub fn headline(&self) -> String {
        if self.gradients.is_empty() {
            format!("{} violations / {} models checked", self.violations, self.models)
        } else {
            let failed = self.gradients.iter().filter(|g| g.failures > 0).count();
            format!("{failed} failing / {} gradient checks", self.gradients.len())
        }
    }
}

pub fn run_verify(mode: VerifyMode, opts: &VerifyOptions) -> Result<VerifyReport> {
    let report = match mode {
        VerifyMode::Theorem1Grid => {
            let e = GridEnumeration::new(&opts.grid_limits, &uniform_grid(opts.grid_q))?;
            VerifyReport::from_sweep(mode, sweep_grid(&e, 0..e.len(), opts.tol, opts.parallel))
        }
        VerifyMode::Theorem1Fuzz => {
            let fz = Fuzzer::new(opts.fuzz_limits.clone(), opts.seed)?;
            VerifyReport::from_sweep(mode, sweep_fuzz(&fz, 0..opts.fuzz_count, opts.tol, opts.parallel))
        }
        VerifyMode::GradientSuite => {
            let gradients = gradient_suite(opts.seed, opts.gradient_configs)?;
            VerifyReport {
                mode: mode.name().into(),
                models: 0,
                antecedent_true: 0,
                violations: 0,
                skipped_cells: 0,
                counterexample: None,
                passed: gradients.iter().all(|g| g.failures == 0),
                gradients,
            }
        }
    };
    if let (Some(text), Some(dir)) = (&report.counterexample, &opts.out_dir) {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join(format!("{}-counterexample.txt", mode.name())), text.as_bytes())?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Gradient suite

type Case = fn(&mut Rng) -> (Vec<Tensor>, Loss);
type Loss = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync>;

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values bounded away from zero, for kinks and poles.
fn away(rng: &mut Rng, shape: &[usize], positive: bool) -> Tensor {
    randn(rng, shape).map(|v| {
        let m = 0.2 + v.abs();
        if positive || v >= 0.0 {
            m
        } else {
            -m
        }
    })
}

fn dims(rng: &mut Rng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=4))
}

/// Contracts `out` with a fixed random weight so every output entry matters.
fn weighted<'t>(out: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    out.mul(out.tape().constant(w.clone()))?.sum()
}

macro_rules! unary {
    ($name:literal, $gen:expr, $m:ident($($arg:expr),*)) => {
        ($name, |rng: &mut Rng| {
            let (r, c) = dims(rng);
            let x: Tensor = $gen(rng, &[r, c]);
            let w = randn(rng, &[r, c]);
            let loss: Loss = Box::new(move |_, v| weighted(v[0].$m($($arg),*)?, &w));
            (vec![x], loss)
        })
    };
}

macro_rules! binary {
    ($name:literal, $gen:expr, $m:ident) => {
        ($name, |rng: &mut Rng| {
            let (r, c) = dims(rng);
            let a = randn(rng, &[r, c]);
            let b: Tensor = $gen(rng, &[r, c]);
            let w = randn(rng, &[r, c]);
            let loss: Loss = Box::new(move |_, v| weighted(v[0].$m(v[1])?, &w));
            (vec![a, b], loss)
        })
    };
}

macro_rules! reduce_axis {
    ($name:literal, $m:ident) => {
        ($name, |rng: &mut Rng| {
            let (r, c) = dims(rng);
            let x = randn(rng, &[r, c]);
            let axis = rng.random_range(0..2usize);
            let w = randn(rng, &[if axis == 0 { c } else { r }]);
            let loss: Loss = Box::new(move |_, v| weighted(v[0].$m(Some(axis))?, &w));
            (vec![x], loss)
        })
    };
}

fn preset_case(name: &'static str, rng: &mut Rng) -> (Vec<Tensor>, Loss) {
    let n = rng.random_range(2..=4);
    let d = rng.random_range(2..=5);
    let cfg = crate::objective::ObjectiveConfig {
        critic_widths: vec![4, 3],
        predictor_widths: if name == "byol_style" { vec![3] } else { vec![] },
        tau: rng.random_range(0.3..1.0),
        ..preset(name).expect("known preset")
    };
    let enc = NetworkSpec::new(d, vec![4, 3], false);
    let spec = cfg.model_spec(&enc).expect("valid spec");
    let mut online = ModelParams::init(&spec, rng).expect("init");
    // Zero biases let a dead hidden layer produce an all-zero embedding,
    // where normalisation is not differentiable.
    for p in [Some(&mut online.encoder), online.critic.as_mut(), online.predictor.as_mut()].into_iter().flatten() {
        for l in &mut p.layers {
            l.bias = randn(rng, l.bias.shape()).map(|v| 0.5 * v);
        }
    }
    let mut target = online.target_copy();
    for l in &mut target.encoder.layers {
        l.weight = l.weight.map(|v| 0.9 * v);
    }
    let views = [randn(rng, &[n, d]), randn(rng, &[n, d])];
    let ema = cfg.target_mode == TargetMode::Ema;
    let loss: Loss = Box::new(move |tape, vars| {
        let on = BoundModel::from_vars(&spec, vars)?;
        let tg = ema.then(|| target.bind(tape, false));
        let xs: Vec<Var<'_>> = views.iter().map(|v| tape.constant(v.clone())).collect();
        Ok(relic_loss(&spec, &cfg, &on, tg.as_ref(), &xs)?.total)
    });
    (online.tensors(), loss)
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        binary!("add", randn, add),
        binary!("sub", randn, sub),
        binary!("mul", randn, mul),
        binary!("div", |r: &mut Rng, s: &[usize]| away(r, s, false), div),
        unary!("scale", randn, scale(-1.7)),
        unary!("relu", |r: &mut Rng, s: &[usize]| away(r, s, false), relu()),
        unary!("exp", randn, exp()),
        unary!("log", |r: &mut Rng, s: &[usize]| away(r, s, true), log()),
        unary!("neg", randn, neg()),
        unary!("clamp_min", |r: &mut Rng, s: &[usize]| away(r, s, false), clamp_min(0.0)),
        ("sum", |rng: &mut Rng| {
            let (r, c) = dims(rng);
            let x = randn(rng, &[r, c]);
            let loss: Loss = Box::new(move |_, v| {
                let s = v[0].sum()?;
                s.mul(s)
            });
            (vec![x], loss)
        }),
        ("mean", |rng: &mut Rng| {
            let (r, c) = dims(rng);
            let x = randn(rng, &[r, c]);
            let loss: Loss = Box::new(move |_, v| {
                let s = v[0].mean()?;
                s.mul(s)
            });
            (vec![x], loss)
        }),
        unary!("row_softmax", randn, row_softmax()),
        unary!("row_log_softmax", randn, row_log_softmax()),
        unary!("l2_normalize_rows", |r: &mut Rng, s: &[usize]| away(r, s, false), l2_normalize(1, 1e-12)),
        unary!("l2_normalize_cols", |r: &mut Rng, s: &[usize]| away(r, s, false), l2_normalize(0, 1e-12)),
        reduce_axis!("sum_axis", sum_axis),
        reduce_axis!("mean_axis", mean_axis),
        ("transpose", |rng: &mut Rng| {
            let (r, c) = dims(rng);
            let x = randn(rng, &[r, c]);
            let w = randn(rng, &[c, r]);
            let loss: Loss = Box::new(move |_, v| weighted(v[0].transpose()?, &w));
            (vec![x], loss)
        }),
        ("matmul", |rng: &mut Rng| {
            let (r, k) = dims(rng);
            let c = rng.random_range(1..=4);
            let (a, b) = (randn(rng, &[r, k]), randn(rng, &[k, c]));
            let w = randn(rng, &[r, c]);
            let loss: Loss = Box::new(move |_, v| weighted(v[0].matmul(v[1])?, &w));
            (vec![a, b], loss)
        }),
        ("concat_rows", |rng: &mut Rng| {
            let (r1, c) = dims(rng);
            let r2 = rng.random_range(1..=4);
            let (a, b) = (randn(rng, &[r1, c]), randn(rng, &[r2, c]));
            let w = randn(rng, &[r1 + r2, c]);
            let loss: Loss = Box::new(move |_, v| weighted(Var::concat_rows(&[v[0], v[1]])?, &w));
            (vec![a, b], loss)
        }),
        ("euclidean_objective", |rng: &mut Rng| {
            let n = rng.random_range(2..=4);
            let d = rng.random_range(1..=4);
            let rho = rng.random_range(0.0..2.0);
            let xs = vec![randn(rng, &[n, d]), randn(rng, &[n, d]), randn(rng, &[n, d])];
            let loss: Loss = Box::new(move |_, v| euclidean_objective_var(v[0], v[1], v[2], rho));
            (xs, loss)
        }),
        ("preset:simclr", |rng: &mut Rng| preset_case("simclr", rng)),
        ("preset:relic", |rng: &mut Rng| preset_case("relic", rng)),
        ("preset:amdim_style", |rng: &mut Rng| preset_case("amdim_style", rng)),
        ("preset:byol_style", |rng: &mut Rng| preset_case("byol_style", rng)),
    ]
}

/// Central finite differences for every op and preset loss at `configs`
/// random configurations each.
pub fn gradient_suite(seed: u64, configs: usize) -> Result<Vec<GradEntry>> {
    use rayon::prelude::*;
    cases()
        .into_par_iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut total = GradCheckReport::default();
            for c in 0..configs {
                let mut rng = seeded(derive_seed(&[seed, i as u64, c as u64]));
                let (inputs, loss) = case(&mut rng);
                let r = check_gradients(&inputs, |t, v| loss(t, v), Tolerance::default())?;
                total.merge(&r);
            }
            Ok(GradEntry {
                name: name.into(),
                configs,
                max_rel_err: total.max_rel_err,
                max_abs_err: total.max_abs_err,
                failures: total.failures,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_configs() {
        let entries = gradient_suite(1, 3).unwrap();
        assert!(entries.len() >= 20);
        for e in entries {
            assert_eq!(e.failures, 0, "{e:?}");
        }
    }

    #[test]
    fn modes_parse() {
        for m in ["theorem1-grid", "theorem1-fuzz", "gradient-suite"] {
            assert_eq!(m.parse::<VerifyMode>().unwrap().name(), m);
        }
        assert!("nope".parse::<VerifyMode>().is_err());
    }

    #[test]
    fn small_fuzz_is_clean() {
        let opts = VerifyOptions {
            fuzz_count: 300,
            ..VerifyOptions::default()
        };
        let r = run_verify(VerifyMode::Theorem1Fuzz, &opts).unwrap();
        assert_eq!(r.models, 300);
        assert!(r.passed);
    }
}
