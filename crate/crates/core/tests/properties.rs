use proptest::prelude::*;
use relic_core::augment::{apply_draw, gaussian_kernel, sample_draw, solarize, AugmentationSpec, ImageBatch};
use relic_core::causal::{interventional_conditional, intervene, Fuzzer, Limits, Target};
use relic_core::datagen::{corrupt, generate_content_style, ContentStyleConfig, CorruptionGrid, CorruptionKind};
use relic_core::harness::RunConfig;
use relic_core::metrics::{class_variance, fisher_lda};
use relic_core::nn::{
    cosine_schedule, ema_blend, lars_step, Gradients, Layer, NetworkSpec, OptimizerConfig, Parameters,
};
use relic_core::objective::{
    contrastive_term, invariance_penalty, loss_values, preset, proxy_distribution, ModelParams, ObjectiveConfig,
    ProxyDistribution, PROB_FLOOR,
};
use relic_core::refine::{is_finer, union_decomposition, Partition};
use relic_core::rng::seeded;
use relic_core::tensor::{eval_no_grad, forward_op, OpKind, Tape};
use relic_core::Tensor;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn sized_matrix(max_r: usize, max_c: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| matrix(r, c, -5.0, 5.0))
}

fn partition(n: usize) -> impl Strategy<Value = Partition> {
    prop::collection::vec(0..n.max(1), n).prop_map(|l| Partition::from_labels(&l))
}

// ---------------------------------------------------------------------------
// tensors

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in sized_matrix(6, 7).prop_map(|t| t.map(|v| v * 40.0))) {
        let p = eval_no_grad(&[x], |_, v| v[0].row_softmax()).unwrap();
        for i in 0..p.rows() {
            let row = p.row(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_op_is_deterministic(a in matrix(3, 4, -2.0, 2.0), b in matrix(3, 4, 0.5, 2.0)) {
        for kind in [OpKind::Add, OpKind::Sub, OpKind::Mul, OpKind::Div, OpKind::Relu, OpKind::Exp,
                     OpKind::Neg, OpKind::Sum, OpKind::Mean, OpKind::Transpose, OpKind::RowSoftmax,
                     OpKind::RowLogSoftmax] {
            let run = || {
                let tape = Tape::new();
                let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
                let inputs = if matches!(kind, OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div) {
                    vec![x, y]
                } else {
                    vec![x]
                };
                forward_op(kind, &inputs).unwrap().value()
            };
            let (o1, o2) = (run(), run());
            prop_assert_eq!(o1.shape(), o2.shape());
            prop_assert!(o1.data().iter().zip(o2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}

// ---------------------------------------------------------------------------
// augment

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn blur_kernel_sums_to_one(sigma in 0.05f64..5.0, half in 0usize..6) {
        let k = gaussian_kernel(sigma, 2 * half + 1).unwrap();
        prop_assert!((k.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn pipeline_keeps_pixels_in_range(seed in any::<u64>(), pixels in prop::collection::vec(0.0f64..=1.0, 8 * 8 * 3)) {
        let spec = AugmentationSpec {
            out_size: [8, 8],
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
            ..AugmentationSpec::default()
        };
        let draw = sample_draw(&spec, 8, 8, &mut seeded(seed));
        let out = apply_draw(&spec, &pixels, 8, 8, 3, &draw).unwrap();
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        let again = apply_draw(&spec, &pixels, 8, 8, 3, &draw).unwrap();
        prop_assert_eq!(out, again);
    }

    #[test]
    fn solarize_involution_below_half(v in prop::collection::vec(0.0f64..0.5, 1..20)) {
        let mut px = v.clone();
        px.push(0.5);
        let b = ImageBatch::new(1, 1, px.len(), 1, px.clone()).unwrap();
        let twice = solarize(&solarize(&b).unwrap()).unwrap();
        prop_assert_eq!(twice.pixels, px);
    }
}

// ---------------------------------------------------------------------------
// optimisation

fn small_params(seed: u64) -> (NetworkSpec, Parameters) {
    let spec = NetworkSpec::new(3, vec![4, 2], false);
    let p = Parameters::init(&spec, &mut seeded(seed)).unwrap();
    (spec, p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_continuous_at_warmup(warm in 1u64..500, extra in 1u64..5000, lr in 0.01f64..5.0, batch in 1usize..4096) {
        let cfg = OptimizerConfig {
            base_lr: lr,
            batch_size: batch,
            warmup_steps: warm,
            total_steps: warm + extra,
            ..OptimizerConfig::default()
        };
        let at = cosine_schedule(warm, &cfg).unwrap();
        let ramp_end = cfg.peak_lr() * warm as f64 / warm as f64;
        prop_assert!((at - ramp_end).abs() <= 1e-12);
        let before = cosine_schedule(warm - 1, &cfg).unwrap();
        prop_assert!(before <= at);
    }

    #[test]
    fn ema_endpoints(seed in any::<u64>()) {
        let (_, online) = small_params(seed);
        let (_, target) = small_params(seed.wrapping_add(1));
        prop_assert_eq!(ema_blend(&online, &target, 1.0).unwrap().layers, target.layers.clone());
        prop_assert_eq!(ema_blend(&online, &target, 0.0).unwrap().layers, online.layers);
    }

    #[test]
    fn lars_zero_gradient_is_identity(seed in any::<u64>(), lr in 0.0f64..10.0) {
        let (_, p) = small_params(seed);
        let grads = Gradients {
            layers: p.layers.iter().map(|l| Layer {
                weight: Tensor::zeros(l.weight.shape()),
                bias: Tensor::zeros(l.bias.shape()),
            }).collect(),
        };
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        let next = lars_step(&p, &grads, &cfg, lr).unwrap();
        prop_assert_eq!(next.layers, p.layers);
    }
}

// ---------------------------------------------------------------------------
// objective

fn model(name: &str, seed: u64) -> (relic_core::objective::ModelSpec, ObjectiveConfig, ModelParams) {
    let cfg = ObjectiveConfig {
        critic_widths: vec![5, 4],
        ..preset(name).unwrap()
    };
    let spec = cfg.model_spec(&NetworkSpec::new(6, vec![7, 5], false)).unwrap();
    let params = ModelParams::init(&spec, &mut seeded(seed)).unwrap();
    (spec, cfg, params)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn alpha_zero_total_is_the_contrastive_sum(seed in any::<u64>(), a in matrix(5, 6, -1.0, 1.0), b in matrix(5, 6, -1.0, 1.0)) {
        let (spec, mut cfg, params) = model("relic", seed);
        cfg.alpha = 0.0;
        let v = loss_values(&spec, &cfg, &params, Some(&params.target_copy()), &[a, b]).unwrap();
        prop_assert_eq!(v.total, v.contrastive);
    }

    #[test]
    fn penalty_nonnegative_and_zero_on_equal(a in matrix(4, 3, -2.0, 2.0), b in matrix(4, 3, -2.0, 2.0), tau in 0.05f64..2.0) {
        let cfg = ObjectiveConfig { tau, ..preset("amdim_style").unwrap() };
        let p = proxy_distribution(&a, &b, None, &cfg, (0, 1)).unwrap();
        let q = proxy_distribution(&b, &a, None, &cfg, (1, 0)).unwrap();
        prop_assert!(invariance_penalty(&[p.clone(), q]).unwrap() >= 0.0);
        prop_assert_eq!(invariance_penalty(&[p.clone(), p]).unwrap(), 0.0);
    }

    #[test]
    fn contrastive_per_anchor_bounds(a in matrix(4, 3, -3.0, 3.0), b in matrix(4, 3, -3.0, 3.0), tau in 0.01f64..2.0) {
        let cfg = ObjectiveConfig { tau, ..preset("amdim_style").unwrap() };
        let d = proxy_distribution(&a, &b, None, &cfg, (0, 1)).unwrap();
        for i in 0..4 {
            let one = ProxyDistribution { probs: d.probs.select_rows(&[i]), pair: d.pair };
            let l = contrastive_term(&one, &[i]).unwrap();
            prop_assert!(l >= 0.0 && l <= -PROB_FLOOR.ln() + 1e-12);
        }
    }

    #[test]
    fn uniform_scores_give_ln_m(m in 2usize..40) {
        let probs = Tensor::full(&[m, m], 1.0 / m as f64);
        let d = ProxyDistribution { probs, pair: (0, 1) };
        let pos: Vec<usize> = (0..m).collect();
        prop_assert!((contrastive_term(&d, &pos).unwrap() - (m as f64).ln()).abs() <= 1e-12);
    }

    #[test]
    fn candidate_permutation_moves_the_positive(a in matrix(5, 3, -2.0, 2.0), b in matrix(5, 3, -2.0, 2.0), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let cfg = ObjectiveConfig { tau: 0.3, ..preset("amdim_style").unwrap() };
        let d = proxy_distribution(&a, &b, None, &cfg, (0, 1)).unwrap();
        let dp = proxy_distribution(&a, &b.select_rows(&perm), None, &cfg, (0, 1)).unwrap();
        let mut inv = vec![0; 5];
        for (pos, &orig) in perm.iter().enumerate() {
            inv[orig] = pos;
        }
        let l1 = contrastive_term(&d, &[0, 1, 2, 3, 4]).unwrap();
        let l2 = contrastive_term(&dp, &inv).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-12);
    }
}

// ---------------------------------------------------------------------------
// partitions

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fineness_is_a_partial_order((a, b, c) in (1usize..=8).prop_flat_map(|n| (partition(n), partition(n), partition(n)))) {
        prop_assert!(is_finer(&a, &a).unwrap());
        if is_finer(&a, &b).unwrap() && is_finer(&b, &a).unwrap() {
            prop_assert_eq!(&a, &b);
        }
        if is_finer(&a, &b).unwrap() && is_finer(&b, &c).unwrap() {
            prop_assert!(is_finer(&a, &c).unwrap());
        }
    }

    #[test]
    fn coarse_blocks_are_unions_of_fine_blocks((fine, merge) in (1usize..=8).prop_flat_map(|n| (partition(n), prop::collection::vec(0usize..3, n)))) {
        // Coarsen by relabelling fine blocks.
        let labels: Vec<usize> = fine.block_of().iter().map(|&b| merge[b]).collect();
        let coarse = Partition::from_labels(&labels);
        prop_assert!(is_finer(&fine, &coarse).unwrap());
        let parts = union_decomposition(&fine, &coarse).unwrap();
        let fine_blocks = fine.blocks();
        for (block, members) in coarse.blocks().iter().zip(&parts) {
            let mut u: Vec<usize> = members.iter().flat_map(|&j| fine_blocks[j].clone()).collect();
            u.sort_unstable();
            prop_assert_eq!(&u, block);
        }
    }
}

// ---------------------------------------------------------------------------
// causal

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interventional_joints_normalised_and_factorisation_agrees(seed in any::<u64>(), index in 0u64..1000) {
        let fz = Fuzzer::new(Limits::fuzz_default(), seed).unwrap();
        let (scm, f) = fz.get(index);
        for s in 0..scm.n_s {
            let j = intervene(&scm, s).unwrap();
            prop_assert!((j.total() - 1.0).abs() <= 1e-10);
            let mut targets = vec![Target::Refinement];
            targets.extend((0..scm.tasks.len()).map(Target::Task));
            for t in targets {
                let direct = j.conditional(&f, t).unwrap();
                let factored = interventional_conditional(&scm, &f, t, s).unwrap();
                for (a, b) in direct.iter().zip(&factored) {
                    match (a, b) {
                        (Some(a), Some(b)) => {
                            for (x, y) in a.iter().zip(b) {
                                prop_assert!((x - y).abs() <= 1e-12);
                            }
                        }
                        (None, None) => {}
                        _ => prop_assert!(false, "support differs"),
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// datagen

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn corruptions_stay_in_range(seed in any::<u64>(), sev in 1usize..=5) {
        let cfg = ContentStyleConfig { n_samples: 6, ..ContentStyleConfig::default() };
        let ds = generate_content_style(&cfg, seed).unwrap();
        for k in CorruptionKind::ALL {
            let out = corrupt(&ds.images, k, sev, seed, &CorruptionGrid::default()).unwrap();
            prop_assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generation_is_pure(seed in any::<u64>()) {
        let cfg = ContentStyleConfig { n_samples: 10, ..ContentStyleConfig::default() };
        prop_assert_eq!(generate_content_style(&cfg, seed).unwrap(), generate_content_style(&cfg, seed).unwrap());
    }
}

// ---------------------------------------------------------------------------
// metrics

fn labelled_points() -> impl Strategy<Value = (Tensor, Vec<usize>)> {
    (2usize..4, 2usize..5, 1usize..4).prop_flat_map(|(k, per, d)| {
        let n = k * per;
        (matrix(n, d, -3.0, 3.0), Just((0..n).map(|i| i % k).collect::<Vec<_>>()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lda_invariant_under_isometry((x, y) in labelled_points(), theta in 0.0f64..6.3, shift in prop::collection::vec(-10.0f64..10.0, 3)) {
        let d = x.cols();
        // Rotation in the plane of the first two axes (if present) plus a shift.
        let mut moved = Vec::with_capacity(x.numel());
        for i in 0..x.rows() {
            let r = x.row(i);
            for j in 0..d {
                let v = match (j, d) {
                    (0, 2..) => theta.cos() * r[0] - theta.sin() * r[1],
                    (1, _) => theta.sin() * r[0] + theta.cos() * r[1],
                    _ => r[j],
                };
                moved.push(v + shift[j]);
            }
        }
        let moved = Tensor::matrix(x.rows(), d, moved).unwrap();
        let a = fisher_lda(&x, &y).unwrap();
        let b = fisher_lda(&moved, &y).unwrap();
        for (p, q) in a.pairs.iter().zip(&b.pairs) {
            prop_assert_eq!(p.degenerate, q.degenerate);
            if !p.degenerate {
                prop_assert!((p.ratio - q.ratio).abs() <= 1e-9 * p.ratio.max(1.0));
            }
        }
    }

    #[test]
    fn class_variance_is_covariance_trace((x, y) in labelled_points()) {
        let r = class_variance(&x, &y).unwrap();
        for (label, v) in r.per_class {
            let idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == label).collect();
            let n = idx.len() as f64;
            let mut trace = 0.0;
            for j in 0..x.cols() {
                let mean = idx.iter().map(|&i| x.at(i, j)).sum::<f64>() / n;
                trace += idx.iter().map(|&i| (x.at(i, j) - mean).powi(2)).sum::<f64>() / n;
            }
            prop_assert!((v - trace).abs() <= 1e-10);
        }
    }
}

// ---------------------------------------------------------------------------
// harness

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn config_round_trip(seed in 0u64..1 << 40, alpha in 0.0f64..4.0, tau in 0.01f64..1.0, lr in 1e-4f64..3.0, widths in prop::collection::vec(1usize..64, 1..3), pre in prop::sample::select(vec!["relic", "simclr", "amdim_style", "byol_style"])) {
        let mut cfg = RunConfig::default().with_preset(pre).unwrap();
        cfg.seed = seed;
        cfg.objective.alpha = alpha;
        cfg.objective.tau = tau;
        cfg.optimizer.base_lr = lr;
        cfg.model.encoder_widths = widths;
        prop_assume!(cfg.validate().is_ok());
        let text = cfg.to_toml_string().unwrap();
        prop_assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }
}
