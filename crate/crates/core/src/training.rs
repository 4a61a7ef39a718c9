//! Single-sample stochastic training loop: pick a volume, sample slices,
//! assemble the branch-specific objective, take one gradient step.

use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{BackboneConfig, ModelParams, ParamVars};
use crate::baselines::{LossPaths, Variant, VariantConfig};
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::local::PositiveCounts;
use crate::objective::{sample_objective, Branch, ObjectiveContext};
use crate::separation::SeparationCost;

/// Step size of the `global_only` variant, whose loss is `l_G` alone.
pub const GLOBAL_ONLY_LR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr: f64,
    pub decay_gamma: f64,
    /// Iterations between learning-rate decays; `None` means
    /// `max(1, max_iters / 100)`.
    pub decay_interval: Option<usize>,
    pub max_iters: usize,
    pub seed: u64,
    /// Inclusive range of the random slice interval.
    pub slice_interval_range: (usize, usize),
    pub variant: VariantConfig,
    /// Heavy-ball coefficient; 0 is plain gradient descent.
    pub momentum: f64,
    /// Rescale the whole gradient to at most this L2 norm before the step.
    pub clip_norm: Option<f64>,
    pub backbone: BackboneConfig,
    pub separation_cost: SeparationCost,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 20.0,
            lr: 1e-5,
            decay_gamma: 0.99,
            decay_interval: None,
            max_iters: 6000,
            seed: 0,
            slice_interval_range: (1, 5),
            variant: VariantConfig::default(),
            momentum: 0.9,
            clip_norm: Some(1000.0),
            backbone: BackboneConfig::default(),
            separation_cost: SeparationCost::L1,
        }
    }
}

impl TrainConfig {
    /// Defaults for `variant`. The summed per-voxel local losses put the
    /// full objective three orders of magnitude above `l_G` alone, so
    /// `global_only` gets its own step size.
    pub fn for_variant(variant: Variant) -> Self {
        let base = TrainConfig {
            variant: VariantConfig::new(variant),
            ..Default::default()
        };
        match variant {
            Variant::GlobalOnly => TrainConfig {
                lr: GLOBAL_ONLY_LR,
                momentum: 0.0,
                clip_norm: None,
                ..base
            },
            _ => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::invalid(msg)) };
        check(self.beta > 0.0 && self.beta.is_finite(), format!("beta must be > 0, got {}", self.beta))?;
        check(self.lr > 0.0 && self.lr.is_finite(), format!("lr must be > 0, got {}", self.lr))?;
        check(
            self.decay_gamma > 0.0 && self.decay_gamma <= 1.0,
            format!("decay_gamma must be in (0, 1], got {}", self.decay_gamma),
        )?;
        check(self.decay_interval != Some(0), "decay_interval must be >= 1".into())?;
        let (lo, hi) = self.slice_interval_range;
        check(lo >= 1 && lo <= hi, format!("bad slice interval range {lo}..={hi}"))?;
        check(
            (0.0..1.0).contains(&self.momentum),
            format!("momentum must be in [0, 1), got {}", self.momentum),
        )?;
        if let Some(c) = self.clip_norm {
            check(c > 0.0 && c.is_finite(), format!("clip_norm must be > 0, got {c}"))?;
        }
        self.backbone.validate()?;
        self.variant.validate()
    }

    pub fn effective_decay_interval(&self) -> usize {
        self.decay_interval.unwrap_or((self.max_iters / 100).max(1))
    }

    pub fn context(&self, counts: PositiveCounts, paths: LossPaths) -> ObjectiveContext {
        ObjectiveContext {
            beta: self.beta,
            counts,
            paths,
            separation_cost: self.separation_cost,
        }
    }
}

/// Loss components of one iteration. `labeled_local` and `unlabeled_local`
/// are the positive-count-normalized terms before the `beta` weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub global_loss: f64,
    pub labeled_local_loss: f64,
    pub unlabeled_local_loss: f64,
    pub lr: f64,
}

impl LossRecord {
    pub fn total(&self, beta: f64) -> f64 {
        self.global_loss + beta * (self.labeled_local_loss + self.unlabeled_local_loss)
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    /// Iterations completed.
    pub iteration: usize,
    pub lr: f64,
    pub rng: ChaCha8Rng,
    velocity: Option<Vec<Vec<f64>>>,
    pub history: Vec<LossRecord>,
    /// Iterations that ran the bag MIL branch.
    pub unlabeled_branch_count: usize,
    /// Iterations whose unlabeled term was skipped on a flat field.
    pub skipped_degenerate: usize,
}

impl TrainState {
    /// Parameters drawn from the seeded generator; the same generator then
    /// drives sample and slice selection.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(&config.backbone, &mut rng)?;
        Ok(TrainState {
            params,
            iteration: 0,
            lr: config.lr,
            rng,
            velocity: None,
            history: Vec::new(),
            unlabeled_branch_count: 0,
            skipped_degenerate: 0,
        })
    }

    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.history {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws the slice interval `k` uniformly from `range` and returns
/// `0, k, 2k, ...` below `depth`.
pub fn sample_slices_in(depth: usize, range: (usize, usize), rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if depth == 0 {
        return Err(Error::invalid("sample_slices: depth must be >= 1"));
    }
    let k = rng.random_range(range.0..=range.1);
    Ok((0..depth).step_by(k).collect())
}

pub fn sample_slices(depth: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    sample_slices_in(depth, (1, 5), rng)
}

/// `p <- p - lr * g` for every parameter tensor.
pub fn sgd_step(params: &mut ModelParams, grads: &[Vec<f64>], lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (t, g) in params.tensors_mut().zip(grads) {
        for (p, d) in t.data_mut().iter_mut().zip(g) {
            *p -= lr * d;
        }
    }
    Ok(())
}

fn check_grads(params: &ModelParams, grads: &[Vec<f64>]) -> Result<()> {
    let n = params.tensors().count();
    if grads.len() != n {
        return Err(Error::invalid(format!("expected {n} gradient tensors, got {}", grads.len())));
    }
    for (i, (t, g)) in params.tensors().zip(grads).enumerate() {
        if t.len() != g.len() {
            return Err(Error::shape("sgd_step", format!("gradient {i} has {} entries, parameter has {}", g.len(), t.len())));
        }
    }
    Ok(())
}

/// Scales all gradients by `min(1, max_norm / ||g||)`; returns the norm
/// before clipping.
pub fn clip_to_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

fn momentum_step(state: &mut TrainState, grads: Vec<Vec<f64>>, mu: f64) -> Result<()> {
    check_grads(&state.params, &grads)?;
    let velocity = state.velocity.get_or_insert_with(|| grads.iter().map(|g| vec![0.0; g.len()]).collect());
    for (v, g) in velocity.iter_mut().zip(&grads) {
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = mu * *vi + gi;
        }
    }
    let v = velocity.clone();
    sgd_step(&mut state.params, &v, state.lr)
}

/// Runs the configured variant end to end. `pvpl` is routed through the
/// two-stage teacher-student schedule.
pub fn train(dataset: &[VolumeSample], config: &TrainConfig) -> Result<TrainState> {
    if config.variant.variant == Variant::Pvpl {
        return crate::baselines::pvpl_self_training(dataset, config).map(|o| o.state);
    }
    let mut state = TrainState::new(config)?;
    let paths = config.variant.loss_paths();
    run_iterations(&mut state, dataset, config, &paths, config.max_iters, None)?;
    Ok(state)
}

/// Advances `state` by `iters` iterations with the given loss paths.
/// `pseudo_masks`, when given, is indexed like `dataset`.
pub(crate) fn run_iterations(
    state: &mut TrainState,
    dataset: &[VolumeSample],
    config: &TrainConfig,
    paths: &LossPaths,
    iters: usize,
    pseudo_masks: Option<&[Option<Vec<u8>>]>,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(pm) = pseudo_masks {
        if pm.len() != dataset.len() {
            return Err(Error::shape("train", "one pseudo-mask slot per training sample required"));
        }
    }
    let counts = PositiveCounts::of(dataset);
    if (paths.attention_supervision || paths.instance_supervision) && counts.labeled == 0 {
        return Err(Error::invalid("local stream needs at least one voxel-labeled positive"));
    }
    let ctx = config.context(counts, *paths);
    let interval = config.effective_decay_interval();
    if state.iteration == 0 {
        info!(
            "training {} samples ({} labeled / {} unlabeled positives), {} iterations, lr {}",
            dataset.len(),
            counts.labeled,
            counts.unlabeled,
            iters,
            state.lr
        );
    }

    for _ in 0..iters {
        let idx = state.rng.random_range(0..dataset.len());
        let sample = &dataset[idx];
        let slices = sample_slices_in(sample.depth(), config.slice_interval_range, &mut state.rng)?;
        let pseudo = pseudo_masks.and_then(|p| p[idx].as_deref());

        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &state.params, true);
        let terms = sample_objective(&mut tape, &vars, sample, &slices, &ctx, pseudo, None)?;
        let read = |v: Option<crate::autodiff::Var>| v.map_or(Ok(0.0), |v| tape.scalar(v));
        let record = LossRecord {
            iteration: state.iteration + 1,
            global_loss: read(terms.global)?,
            labeled_local_loss: read(terms.labeled_local)?,
            unlabeled_local_loss: read(terms.unlabeled_local)?,
            lr: state.lr,
        };
        let total = tape.scalar(terms.total)?;
        if !total.is_finite() {
            return Err(Error::NonFinite {
                iteration: record.iteration,
                detail: format!("loss {total} on sample {} ({:?} branch)", sample.id, terms.branch),
            });
        }
        if terms.branch == Branch::Unlabeled {
            if terms.degenerate {
                state.skipped_degenerate += 1;
                debug!("iteration {}: flat attention on {}, unlabeled term skipped", record.iteration, sample.id);
            } else {
                state.unlabeled_branch_count += 1;
            }
        }

        let grads = tape.backward(terms.total)?;
        let mut grads = vars.collect_grads(&grads, &state.params);
        if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                iteration: record.iteration,
                detail: format!("gradient of {} on sample {}", state.params.tensor_names()[i], sample.id),
            });
        }
        if let Some(c) = config.clip_norm {
            clip_to_norm(&mut grads, c);
        }
        if config.momentum > 0.0 {
            momentum_step(state, grads, config.momentum)?;
        } else {
            sgd_step(&mut state.params, &grads, state.lr)?;
        }

        state.history.push(record);
        state.iteration += 1;
        if state.iteration % interval == 0 {
            state.lr *= config.decay_gamma;
        }
        if state.iteration % 500 == 0 {
            debug!("iteration {}: total {:.4}, lr {:.3e}", state.iteration, record.total(config.beta), state.lr);
        }
    }
    Ok(())
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smoothed(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, &v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
