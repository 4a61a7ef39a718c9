//! Central finite-difference check of the full training objective.
//!
//! Separation membership and `lambda` are taken from the unperturbed pass
//! and held fixed, matching the stop-gradient treatment in training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{BackboneConfig, ModelParams, ParamVars};
use crate::baselines::LossPaths;
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::local::PositiveCounts;
use crate::objective::{dataset_objective, FrozenSeparation, ObjectiveContext};
use crate::separation::SeparationCost;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub dims: [usize; 3],
    pub backbone: BackboneConfig,
    pub beta: f64,
    pub step: f64,
    /// Floor of the relative-error denominator, in units of the
    /// finite-difference roundoff `eps * |L| / step`.
    pub noise_multiple: f64,
    /// Step halvings allowed when a probe crosses a relu kink.
    pub max_halvings: u32,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            dims: [4, 8, 8],
            backbone: BackboneConfig {
                depth: 3,
                width: 4,
                kernel: 3,
            },
            beta: 20.0,
            step: 1e-5,
            noise_multiple: 1e4,
            max_halvings: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries whose probes crossed a relu kink at every tried step; their
    /// finite difference is not a derivative and they are not scored.
    pub nonsmooth: usize,
    /// Entries that needed a reduced step to stay on one linear piece.
    pub reduced_step: usize,
    pub loss: f64,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// A voxel-labeled positive, an image-label-only positive and a negative,
/// each with random intensities and a brighter box lesion on positives.
pub fn toy_dataset(dims: [usize; 3], seed: u64) -> Result<Vec<VolumeSample>> {
    let [d, h, w] = dims;
    if d < 2 || h < 4 || w < 4 {
        return Err(Error::invalid(format!("toy volume {dims:?} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |id: &str, positive: bool, labeled: bool| {
        let n = d * h * w;
        let mut voxels: Vec<f32> = (0..n).map(|_| rng.random_range(0.1..0.5)).collect();
        let mut mask = vec![0u8; n];
        if positive {
            for z in 0..d / 2 + 1 {
                for y in h / 4..h / 2 + 1 {
                    for x in w / 4..w / 2 + 1 {
                        let i = (z * h + y) * w + x;
                        mask[i] = 1;
                        voxels[i] = rng.random_range(0.6..0.9);
                    }
                }
            }
        }
        VolumeSample {
            id: id.to_string(),
            dims,
            voxels,
            mask,
            image_label: u8::from(positive),
            has_voxel_labels: labeled,
        }
    };
    Ok(vec![
        make("labeled", true, true),
        make("unlabeled", true, false),
        make("negative", false, false),
    ])
}

fn objective_value(
    params: &ModelParams,
    samples: &[VolumeSample],
    ctx: &ObjectiveContext,
    frozen: &[Option<FrozenSeparation>],
) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false);
    let (loss, _) = dataset_objective(&mut tape, &vars, samples, ctx, Some(frozen))?;
    Ok((tape.scalar(loss)?, tape.relu_pattern()))
}

/// Compares reverse-mode gradients of the full-batch objective with a
/// fourth-order central difference for every parameter entry.
///
/// The objective is piecewise smooth (relu). A probe set whose relu signs
/// differ from the base point straddles a kink, so the step is halved until
/// all probes share the base pattern. The relative-error denominator is
/// floored at `noise_multiple * eps * |L| / step`, the scale below which the
/// difference quotient is dominated by rounding in `L`.
pub fn check_gradients(params: &ModelParams, samples: &[VolumeSample], ctx: &ObjectiveContext, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, true);
    let (loss, frozen) = dataset_objective(&mut tape, &vars, samples, ctx, None)?;
    let loss_value = tape.scalar(loss)?;
    let base_pattern = tape.relu_pattern();
    let grads = tape.backward(loss)?;
    let analytic = vars.collect_grads(&grads, params);

    let names = params.tensor_names();
    let mut report = GradCheckReport {
        checked: 0,
        nonsmooth: 0,
        reduced_step: 0,
        loss: loss_value,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = params.clone();
    for (ti, g) in analytic.iter().enumerate() {
        for (j, &a) in g.iter().enumerate() {
            let orig = tensor_mut(&mut probe, ti).data()[j];
            let mut step = config.step;
            let mut found = None;
            for halving in 0..=config.max_halvings {
                let mut values = [0.0; 4];
                let mut smooth = true;
                for (v, offset) in values.iter_mut().zip([step, -step, 2.0 * step, -2.0 * step]) {
                    tensor_mut(&mut probe, ti).data_mut()[j] = orig + offset;
                    let (value, pattern) = objective_value(&probe, samples, ctx, &frozen)?;
                    *v = value;
                    smooth &= pattern == base_pattern;
                }
                if smooth {
                    found = Some((values, step, halving > 0));
                    break;
                }
                step *= 0.5;
            }
            tensor_mut(&mut probe, ti).data_mut()[j] = orig;
            let Some(([p1, m1, p2, m2], step, reduced)) = found else {
                report.nonsmooth += 1;
                continue;
            };
            report.reduced_step += usize::from(reduced);
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let floor = config.noise_multiple * f64::EPSILON * loss_value.abs() / step;
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_param = names[ti].clone();
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn tensor_mut(params: &mut ModelParams, i: usize) -> &mut crate::tensor::Tensor {
    params.tensors_mut().nth(i).expect("tensor index in range")
}

/// Runs the check on the built-in toy set with the full objective.
pub fn run_gradcheck(config: &GradCheckConfig) -> Result<GradCheckReport> {
    let samples = toy_dataset(config.dims, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let params = ModelParams::init(&config.backbone, &mut rng)?;
    let ctx = ObjectiveContext {
        beta: config.beta,
        counts: PositiveCounts::of(&samples),
        paths: LossPaths::default(),
        separation_cost: SeparationCost::L1,
    };
    check_gradients(&params, &samples, &ctx, config)
}
