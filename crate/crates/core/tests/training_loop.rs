use iag_core::autodiff::Tape;
use iag_core::backbone::{BackboneConfig, ModelParams, ParamVars};
use iag_core::baselines::{LossPaths, Variant, VariantConfig};
use iag_core::data::{generate_samples, GeneratorParams, VolumeSample};
use iag_core::local::PositiveCounts;
use iag_core::objective::{sample_objective, Branch, ObjectiveContext};
use iag_core::separation::SeparationCost;
use iag_core::training::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_set(seed: u64) -> Vec<VolumeSample> {
    generate_samples(&GeneratorParams {
        num: 8,
        dims: [8, 12, 12],
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_config(variant: Variant, iters: usize) -> TrainConfig {
    TrainConfig {
        max_iters: iters,
        variant: VariantConfig::new(variant),
        backbone: BackboneConfig {
            depth: 2,
            width: 4,
            kernel: 3,
        },
        ..Default::default()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bce(p: f64, y: f64) -> f64 {
    -(y * p.max(1e-12).ln() + (1.0 - y) * (1.0 - p).max(1e-12).ln())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Plain {
    features: Vec<Vec<f64>>,
    p: Vec<f64>,
    pg: f64,
}

/// Recomputes the heads from the tape's feature rows with plain loops.
fn plain_heads(features: &[f64], c: usize, params: &ModelParams) -> Plain {
    let rows: Vec<Vec<f64>> = features.chunks(c).map(<[f64]>::to_vec).collect();
    let a: Vec<f64> = rows.iter().map(|f| dot(f, params.w_attention.data())).collect();
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut h = vec![0.0; c];
    for (f, w) in rows.iter().zip(&e) {
        for j in 0..c {
            h[j] += w / z * f[j];
        }
    }
    Plain {
        p: a.iter().map(|&v| sigmoid(v)).collect(),
        pg: sigmoid(dot(&h, params.w_global.data())),
        features: rows,
    }
}

fn context(samples: &[VolumeSample], paths: LossPaths) -> ObjectiveContext {
    ObjectiveContext {
        beta: 20.0,
        counts: PositiveCounts::of(samples),
        paths,
        separation_cost: SeparationCost::L1,
    }
}

#[test]
fn labeled_objective_matches_plain_computation() {
    let set = tiny_set(1);
    let params = ModelParams::init(&tiny_config(Variant::Full, 0).backbone, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let ctx = context(&set, LossPaths::default());
    let s = set.iter().find(|s| s.has_voxel_labels).unwrap();
    let slices = [0, 2, 4];
    let mut t = Tape::new();
    let vars = ParamVars::register(&mut t, &params, true);
    let terms = sample_objective(&mut t, &vars, s, &slices, &ctx, None, None).unwrap();
    assert_eq!(terms.branch, Branch::Labeled);

    let plain = plain_heads(t.data(terms.forward.features.features), 4, &params);
    let mask = s.mask_for_slices(&slices);
    let l_g = bce(plain.pg, 1.0);
    let l_att: f64 = plain.p.iter().zip(&mask).map(|(&p, &y)| bce(p, y)).sum();
    let l_inst: f64 = plain.features.iter().zip(&mask).map(|(f, &y)| bce(sigmoid(dot(f, params.w_local.data())), y)).sum();
    let expected = l_g + 20.0 * (l_att + l_inst) / ctx.counts.labeled as f64;
    let got = t.scalar(terms.total).unwrap();
    assert!((got - expected).abs() <= 1e-10 * expected, "{got} vs {expected}");
    assert!((t.scalar(terms.global.unwrap()).unwrap() - l_g).abs() < 1e-12);
}

#[test]
fn unlabeled_objective_matches_plain_computation() {
    let set = tiny_set(2);
    let params = ModelParams::init(&tiny_config(Variant::Full, 0).backbone, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let ctx = context(&set, LossPaths::default());
    let s = set.iter().find(|s| s.is_positive() && !s.has_voxel_labels).unwrap();
    let slices: Vec<usize> = (0..6).collect();
    let mut t = Tape::new();
    let vars = ParamVars::register(&mut t, &params, true);
    let terms = sample_objective(&mut t, &vars, s, &slices, &ctx, None, None).unwrap();
    assert_eq!(terms.branch, Branch::Unlabeled);
    assert!(!terms.degenerate);

    let plain = plain_heads(t.data(terms.forward.features.features), 4, &params);
    // Best threshold split of p under the L1 cost, by enumeration.
    let cost = |idx: &[usize]| {
        let m = idx.iter().map(|&i| plain.p[i]).sum::<f64>() / idx.len() as f64;
        idx.iter().map(|&i| (plain.p[i] - m).abs()).sum::<f64>()
    };
    let mut sorted = plain.p.clone();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut best = (f64::INFINITY, Vec::new(), Vec::new());
    for w in sorted.windows(2) {
        let th = 0.5 * (w[0] + w[1]);
        let fg: Vec<usize> = (0..plain.p.len()).filter(|&i| plain.p[i] >= th).collect();
        let bg: Vec<usize> = (0..plain.p.len()).filter(|&i| plain.p[i] < th).collect();
        let c = cost(&fg) + cost(&bg);
        if c < best.0 {
            best = (c, fg, bg);
        }
    }
    let frozen = terms.frozen.as_ref().unwrap();
    assert_eq!(frozen.separation.foreground, best.1);
    let mean_prob = |idx: &[usize]| {
        let mut h = vec![0.0; 4];
        for &i in idx {
            for j in 0..4 {
                h[j] += plain.features[i][j] / idx.len() as f64;
            }
        }
        sigmoid(dot(&h, params.w_local.data()))
    };
    let lambda = plain.p.iter().copied().fold(0.0, f64::max);
    assert_eq!(frozen.lambda, lambda);
    let l_u = -(mean_prob(&best.1).ln() + (1.0 - mean_prob(&best.2)).ln());
    let expected = bce(plain.pg, 1.0) + 20.0 * lambda * l_u / ctx.counts.unlabeled as f64;
    let got = t.scalar(terms.total).unwrap();
    assert!((got - expected).abs() <= 1e-10 * expected, "{got} vs {expected}");
}

#[test]
fn negatives_only_carry_the_global_term() {
    let set = tiny_set(3);
    let params = ModelParams::init(&tiny_config(Variant::Full, 0).backbone, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let ctx = context(&set, LossPaths::default());
    let s = set.iter().find(|s| !s.is_positive()).unwrap();
    let mut t = Tape::new();
    let vars = ParamVars::register(&mut t, &params, true);
    let terms = sample_objective(&mut t, &vars, s, &[1, 3], &ctx, None, None).unwrap();
    assert_eq!(terms.branch, Branch::Negative);
    let plain = plain_heads(t.data(terms.forward.features.features), 4, &params);
    assert!((t.scalar(terms.total).unwrap() - bce(plain.pg, 0.0)).abs() < 1e-12);
}

#[test]
fn training_is_bitwise_deterministic() {
    let set = tiny_set(4);
    let config = tiny_config(Variant::Full, 40);
    let a = train(&set, &config).unwrap();
    let b = train(&set, &config).unwrap();
    assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    assert_eq!(a.history, b.history);
    let c = train(&set, &TrainConfig { seed: 1, ..config }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn zero_iterations_returns_the_initialization() {
    let set = tiny_set(5);
    let config = tiny_config(Variant::Full, 0);
    let state = train(&set, &config).unwrap();
    let init = ModelParams::init(&config.backbone, &mut ChaCha8Rng::seed_from_u64(config.seed)).unwrap();
    assert_eq!(state.params, init);
    assert!(state.history.is_empty());
}

#[test]
fn labeled_only_never_runs_the_unlabeled_branch() {
    let set = tiny_set(6);
    let state = train(&set, &tiny_config(Variant::LabeledOnly, 60)).unwrap();
    assert_eq!(state.unlabeled_branch_count, 0);
    assert!(state.history.iter().all(|r| r.unlabeled_local_loss == 0.0));
    let full = train(&set, &tiny_config(Variant::Full, 60)).unwrap();
    assert!(full.unlabeled_branch_count + full.skipped_degenerate > 0);
}

#[test]
fn slice_intervals_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut hist = [0usize; 6];
    let draws = 10_000;
    for _ in 0..draws {
        let s = sample_slices(60, &mut rng).unwrap();
        let k = if s.len() > 1 { s[1] - s[0] } else { 60 };
        assert_eq!(s[0], 0);
        assert!(s.windows(2).all(|w| w[1] - w[0] == k));
        assert!(*s.last().unwrap() + k >= 60);
        hist[k] += 1;
    }
    for (k, &n) in hist.iter().enumerate().skip(1) {
        let f = n as f64 / draws as f64;
        assert!((f - 0.2).abs() <= 0.02, "interval {k} frequency {f}");
    }
    assert_eq!(sample_slices(1, &mut rng).unwrap(), vec![0]);
}

#[test]
fn learning_rate_decays_on_schedule() {
    let set = tiny_set(7);
    let config = TrainConfig {
        decay_interval: Some(5),
        decay_gamma: 0.5,
        ..tiny_config(Variant::Full, 12)
    };
    let state = train(&set, &config).unwrap();
    let lrs: Vec<f64> = state.history.iter().map(|r| r.lr).collect();
    let lr = config.lr;
    assert_eq!(&lrs[..5], &[lr; 5]);
    assert_eq!(&lrs[5..10], &[lr * 0.5; 5]);
    assert_eq!(&lrs[10..], &[lr * 0.25; 2]);
    assert_eq!(state.lr, lr * 0.25);
}

#[test]
fn loss_history_csv_has_one_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let state = train(&tiny_set(8), &tiny_config(Variant::Full, 7)).unwrap();
    let path = dir.path().join("h.csv");
    state.write_history_csv(&path).unwrap();
    let mut r = csv::Reader::from_path(&path).unwrap();
    let rows: Vec<LossRecord> = r.deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(rows, state.history);
}

#[test]
fn invalid_configs_are_rejected() {
    let set = tiny_set(9);
    let base = tiny_config(Variant::Full, 1);
    for bad in [
        TrainConfig { lr: 0.0, ..base.clone() },
        TrainConfig { beta: -1.0, ..base.clone() },
        TrainConfig { momentum: 1.0, ..base.clone() },
        TrainConfig { slice_interval_range: (0, 3), ..base.clone() },
        TrainConfig { decay_interval: Some(0), ..base.clone() },
    ] {
        assert!(train(&set, &bad).is_err());
    }
    assert!(train(&[], &base).is_err());
}

#[test]
fn smoothed_total_loss_falls_by_half() {
    let set = generate_samples(&GeneratorParams {
        num: 16,
        dims: [8, 16, 16],
        seed: 10,
        ..Default::default()
    })
    .unwrap();
    let config = TrainConfig {
        max_iters: 600,
        backbone: BackboneConfig {
            depth: 3,
            width: 8,
            kernel: 3,
        },
        ..Default::default()
    };
    let state = train(&set, &config).unwrap();
    let totals: Vec<f64> = state.history.iter().map(|r| r.total(config.beta)).collect();
    let s = smoothed(&totals, 100);
    assert!(s[s.len() - 1] < 0.5 * s[99], "{} -> {}", s[99], s[s.len() - 1]);
}
