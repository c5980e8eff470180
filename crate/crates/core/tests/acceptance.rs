//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line and
//! the process exits non-zero if any criterion fails. Runs without the libtest
//! harness so the lines are always shown.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use relic_core::augment::{solarize, ImageBatch};
use relic_core::harness::{run_eval, run_pretrain, run_verify, EvalKind, RunConfig, RunOptions, VerifyMode, VerifyOptions};
use relic_core::metrics::{
    alexnet_normalizers, er_connectivity, erdos_renyi, mce_rce, ErParams, ErrorTable, Graph,
};
use relic_core::nn::{cosine_schedule, ema_tau, OptimizerConfig};
use relic_core::objective::{contrastive_term, ProxyDistribution};
use relic_core::refine::{is_finer, meet_refinement, Partition};
use relic_core::rng::seeded;
use relic_core::Tensor;
use serde_json::Value;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
}

fn report(id: usize, name: &'static str, passed: bool, detail: String) -> Outcome {
    println!("criterion {id:>2} {:<4} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    Outcome { id, name, passed }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let r = run_verify(VerifyMode::GradientSuite, &VerifyOptions::default()).unwrap();
    let worst = r.gradients.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = r.gradients.iter().filter(|g| g.failures > 0).map(|g| g.name.as_str()).collect();
    let elapsed = t.elapsed();
    report(
        1,
        "gradient suite",
        r.passed && failing.is_empty() && elapsed < Duration::from_secs(30),
        format!(
            "{} cases x 20 configs, worst rel err {worst:.2e}, failing {failing:?}, {:.1}s",
            r.gradients.len(),
            secs(elapsed)
        ),
    )
}

fn brute_force() -> Outcome {
    let t = Instant::now();
    let opts = VerifyOptions::default();
    let grid = run_verify(VerifyMode::Theorem1Grid, &opts).unwrap();
    let fuzz = run_verify(VerifyMode::Theorem1Fuzz, &opts).unwrap();
    let elapsed = t.elapsed();
    report(
        2,
        "invariance implication, grid and fuzz",
        grid.passed
            && fuzz.passed
            && grid.violations == 0
            && fuzz.violations == 0
            && fuzz.models == 100_000
            && elapsed < Duration::from_secs(300),
        format!("grid {}; fuzz {}; {:.1}s", grid.headline(), fuzz.headline(), secs(elapsed)),
    )
}

fn formulas() -> Outcome {
    let mut bad = Vec::new();

    let b = ImageBatch::new(1, 1, 3, 1, vec![0.3, 0.7, 0.5]).unwrap();
    if solarize(&b).unwrap().pixels != vec![0.3, 1.0 - 0.7, 0.5] {
        bad.push("solarize");
    }

    if ema_tau(0, 2000, 0.996).unwrap() != 0.996 || ema_tau(2000, 2000, 0.996).unwrap() != 1.0 {
        bad.push("ema endpoints");
    }

    let cfg = OptimizerConfig::default();
    let w = cfg.warmup_steps;
    let at = cosine_schedule(w, &cfg).unwrap();
    let ramp = cfg.peak_lr() * w as f64 / w as f64;
    let after = cosine_schedule(w + 1, &cfg).unwrap();
    if (at - ramp).abs() > 1e-12 || (after - at).abs() > 1e-4 * at {
        bad.push("schedule continuity");
    }

    for m in [2usize, 7, 64, 256] {
        let d = ProxyDistribution {
            probs: Tensor::full(&[m, m], 1.0 / m as f64),
            pair: (0, 1),
        };
        let pos: Vec<usize> = (0..m).collect();
        if (contrastive_term(&d, &pos).unwrap() - (m as f64).ln()).abs() > 1e-12 {
            bad.push("uniform contrastive");
        }
    }

    let normalizers = alexnet_normalizers();
    let table = ErrorTable {
        errors: normalizers.iter().map(|(k, n)| (k.clone(), n.errors)).collect::<BTreeMap<_, _>>(),
        clean: normalizers.values().next().unwrap().clean,
        normalizers,
    };
    let r = mce_rce(&table).unwrap();
    if r.mce != Some(100.0) || r.mrce != Some(100.0) || r.kinds.iter().any(|k| k.ce != Some(100.0)) {
        bad.push("mCE/rCE identity");
    }
    if table.normalizers["gaussian_noise"].errors.iter().sum::<f64>() / 5.0 != 88.6 {
        bad.push("gaussian normalizer");
    }

    report(
        3,
        "formula checks",
        bad.is_empty(),
        if bad.is_empty() { "all exact".into() } else { format!("mismatch in {bad:?}") },
    )
}

// ---------------------------------------------------------------------------
// Synthetic benchmark: 4 content classes, 4 styles, 16x16, 2000 samples,
// 2000 steps, three seeds, relic against the same model with alpha = 0.

const SEEDS: [u64; 3] = [0, 1, 2];

fn benchmark_config(dir: &Path, seed: u64, alpha: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.out_dir = dir.to_path_buf();
    cfg.objective.alpha = alpha;
    cfg.objective.tau = 0.5;
    // Full-strength jitter, so augmentations span the rendered styles.
    cfg.augment.crop_area_range = [0.3, 1.0];
    cfg.augment.brightness = 0.8;
    cfg.augment.contrast = 0.8;
    cfg.augment.saturation = 0.8;
    cfg.augment.hue = 0.2;
    cfg.model.normalize_encoder = true;
    cfg.optimizer.batch_size = 128;
    cfg.optimizer.base_lr = 1.2;
    cfg.optimizer.warmup_steps = 100;
    cfg.optimizer.total_steps = 2000;
    cfg.train.log_every = 100;
    cfg.train.checkpoint_every = 0;
    cfg
}

#[derive(Debug)]
struct BenchRun {
    variance: f64,
    lda: f64,
    accuracy: f64,
    increase: f64,
}

fn bench_run(seed: u64, alpha: f64) -> BenchRun {
    let dir = tempfile::tempdir().unwrap();
    let cfg = benchmark_config(dir.path(), seed, alpha);
    let s = run_pretrain(&cfg, &RunOptions::default()).unwrap();
    let eval = |k| -> Value { run_eval(k, &s.checkpoint, &cfg, None, false).unwrap().record.eval.unwrap() };
    BenchRun {
        variance: eval(EvalKind::Variance)["mean_per_class"].as_f64().unwrap(),
        lda: eval(EvalKind::Lda)["median"].as_f64().unwrap_or(f64::INFINITY),
        accuracy: eval(EvalKind::Linear)["accuracy"].as_f64().unwrap(),
        increase: eval(EvalKind::Robust)["mean_error_increase"].as_f64().unwrap(),
    }
}

fn benchmark() -> Vec<Outcome> {
    let t = Instant::now();
    let runs: Vec<(BenchRun, BenchRun)> = SEEDS.iter().map(|&s| (bench_run(s, 1.0), bench_run(s, 0.0))).collect();
    let elapsed = t.elapsed();
    for (s, (a, b)) in SEEDS.iter().zip(&runs) {
        println!("  seed {s}: relic {a:?}");
        println!("  seed {s}: alpha0 {b:?}");
    }
    let list = |f: &dyn Fn(&BenchRun, &BenchRun) -> String| runs.iter().map(|(a, b)| f(a, b)).collect::<Vec<_>>().join(", ");

    let ratios: Vec<f64> = runs.iter().map(|(a, b)| a.variance / b.variance).collect();
    let c4 = report(
        4,
        "class variance contraction",
        ratios.iter().all(|&r| r <= 0.9) && elapsed < Duration::from_secs(600),
        format!(
            "ratios {} ({:.0}s for 6 runs)",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", "),
            secs(elapsed)
        ),
    );
    let c5 = report(
        5,
        "LDA median shift",
        runs.iter().all(|(a, b)| a.lda > b.lda),
        format!("relic vs alpha0: {}", list(&|a, b| format!("{:.3e} vs {:.3e}", a.lda, b.lda))),
    );
    let c6 = report(
        6,
        "linear probe usefulness",
        runs.iter().all(|(a, b)| a.accuracy >= b.accuracy - 0.01 && a.accuracy >= 0.9),
        format!("relic vs alpha0: {}", list(&|a, b| format!("{:.3} vs {:.3}", a.accuracy, b.accuracy))),
    );
    let c7 = report(
        7,
        "corruption error increase",
        runs.iter().all(|(a, b)| a.increase <= b.increase + 1e-9),
        format!("relic vs alpha0: {}", list(&|a, b| format!("{:.2} vs {:.2}", a.increase, b.increase))),
    );
    vec![c4, c5, c6, c7]
}

// ---------------------------------------------------------------------------

fn refinement_algebra() -> Outcome {
    let t = Instant::now();
    let mut checked = 0u64;
    let mut bad = Vec::new();
    for n in 0..=6 {
        let all = Partition::all(n);
        let finer: Vec<Vec<bool>> = all
            .iter()
            .map(|a| all.iter().map(|b| is_finer(a, b).unwrap()).collect())
            .collect();
        for i in 0..all.len() {
            if !finer[i][i] {
                bad.push(format!("reflexivity n={n}"));
            }
            for j in 0..all.len() {
                if i != j && finer[i][j] && finer[j][i] {
                    bad.push(format!("antisymmetry n={n}"));
                }
                for k in 0..all.len() {
                    if finer[i][j] && finer[j][k] && !finer[i][k] {
                        bad.push(format!("transitivity n={n}"));
                    }
                }
                if n == 0 {
                    continue;
                }
                // Coarsest common refinement by exhaustive search.
                let common: Vec<usize> = (0..all.len()).filter(|&c| finer[c][i] && finer[c][j]).collect();
                let top: Vec<usize> = common
                    .iter()
                    .copied()
                    .filter(|&c| common.iter().all(|&d| finer[d][c]))
                    .collect();
                let meet = meet_refinement(&[all[i].clone(), all[j].clone()]).unwrap();
                if top.len() != 1 || meet != all[top[0]] {
                    bad.push(format!("meet n={n}"));
                }
                checked += 1;
            }
        }
    }
    let elapsed = t.elapsed();
    report(
        8,
        "refinement algebra",
        bad.is_empty() && elapsed < Duration::from_secs(60),
        format!("{checked} pairs up to n=6, {} failures, {:.1}s", bad.len(), secs(elapsed)),
    )
}

fn determinism() -> Outcome {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let cfg = |d: &Path| {
        let mut c = RunConfig::default();
        c.seed = 3;
        c.out_dir = d.to_path_buf();
        c.data.generate.n_samples = 256;
        c.data.test_samples = 128;
        c.optimizer.batch_size = 64;
        c.optimizer.warmup_steps = 5;
        c.optimizer.total_steps = 40;
        c.train.log_every = 5;
        c.train.checkpoint_every = 20;
        c
    };
    let single = RunOptions {
        single_thread: true,
        ..RunOptions::default()
    };
    let mut finals = Vec::new();
    for d in &dirs[..2] {
        let c = cfg(d.path());
        let s = run_pretrain(&c, &single).unwrap();
        for k in [EvalKind::Linear, EvalKind::Lda, EvalKind::Variance, EvalKind::Robust] {
            run_eval(k, &s.checkpoint, &c, None, true).unwrap();
        }
        finals.push(s.checkpoint);
    }
    let logs_equal = std::fs::read(dirs[0].path().join("metrics.jsonl")).unwrap()
        == std::fs::read(dirs[1].path().join("metrics.jsonl")).unwrap();

    let c = cfg(dirs[2].path());
    let half = run_pretrain(&c, &RunOptions { stop_at: Some(23), ..single.clone() }).unwrap();
    let resumed = run_pretrain(&c, &RunOptions { resume: Some(half.checkpoint), ..single }).unwrap();
    let uninterrupted = dirs[0].path().join("metrics.jsonl");
    let log_prefix = std::fs::read_to_string(&uninterrupted).unwrap();
    let resumed_log = std::fs::read_to_string(dirs[2].path().join("metrics.jsonl")).unwrap();
    let resume_equal = std::fs::read(&finals[0]).unwrap() == std::fs::read(&resumed.checkpoint).unwrap()
        && log_prefix.starts_with(&resumed_log);
    report(
        9,
        "single-thread determinism and resume",
        logs_equal && resume_equal,
        format!("logs identical {logs_equal}, resume bitwise identical {resume_equal}"),
    )
}

fn floyd_warshall_diameter(g: &Graph) -> Option<usize> {
    let n = g.len();
    let inf = usize::MAX / 2;
    let mut d = vec![vec![inf; n]; n];
    for i in 0..n {
        d[i][i] = 0;
        for &j in &g.adj[i] {
            d[i][j] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                d[i][j] = d[i][j].min(d[i][k] + d[k][j]);
            }
        }
    }
    let m = d.iter().flatten().copied().max().unwrap_or(0);
    (m < inf).then_some(m)
}

fn erdos_renyi_diagnostics() -> Outcome {
    let er = er_connectivity(&ErParams {
        n: 200,
        c: 2.0,
        samples: 500,
        seed: 0,
    })
    .unwrap();
    let mut rng = seeded(99);
    let mut mismatches = 0;
    let mut graphs = 0;
    for n in 1..=50 {
        for p in [0.02, 0.05, 0.1, 0.3] {
            let g = erdos_renyi(n, p, &mut rng);
            graphs += 1;
            if g.diameter() != floyd_warshall_diameter(&g) {
                mismatches += 1;
            }
        }
    }
    report(
        10,
        "Erdős–Rényi connectivity and diameter oracle",
        er.connected_rate >= 0.95 && mismatches == 0,
        format!(
            "connected rate {:.3} at p={:.4}; {mismatches}/{graphs} diameter mismatches",
            er.connected_rate, er.p
        ),
    )
}

fn main() {
    let mut outcomes = vec![gradient_suite(), brute_force(), formulas()];
    outcomes.extend(benchmark());
    outcomes.extend([refinement_algebra(), determinism(), erdos_renyi_diagnostics()]);
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("{} {}", o.id, o.name))
        .collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
