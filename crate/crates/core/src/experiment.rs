//! Train-then-evaluate harness shared by the `ablate` command and the
//! acceptance suite.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{Variant, VariantConfig};
use crate::data::{generate_samples, GeneratorParams, VolumeSample};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsReport};
use crate::training::{train, TrainConfig, TrainState};

/// Seed offset separating a test split from its training split.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: TrainState,
    pub report: MetricsReport,
    pub seconds: f64,
}

/// Trains `config` on `train_set` and scores it on `test_set` with the
/// variant's pooling and decoding rule.
pub fn run_variant(train_set: &[VolumeSample], test_set: &[VolumeSample], config: &TrainConfig) -> Result<RunOutcome> {
    let start = Instant::now();
    let state = train(train_set, config)?;
    let paths = config.variant.loss_paths();
    let echo = serde_json::to_value(config)?;
    let report = evaluate(&state.params, test_set, paths.pool, config.variant.segmentation_rule(), echo)?;
    Ok(RunOutcome {
        state,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Keeps every negative, the first `labeled` voxel-labeled positives and
/// the first `unlabeled` image-label-only positives, in input order.
pub fn subset_training_set(samples: &[VolumeSample], labeled: Option<usize>, unlabeled: Option<usize>) -> Result<Vec<VolumeSample>> {
    let (mut l, mut u) = (0, 0);
    let mut out = Vec::new();
    for s in samples {
        let keep = if !s.is_positive() {
            true
        } else if s.has_voxel_labels {
            l += 1;
            labeled.is_none_or(|n| l <= n)
        } else {
            u += 1;
            unlabeled.is_none_or(|n| u <= n)
        };
        if keep {
            out.push(s.clone());
        }
    }
    for (want, have, what) in [(labeled, l, "labeled"), (unlabeled, u, "unlabeled")] {
        if let Some(n) = want {
            if n > have {
                return Err(Error::invalid(format!("asked for {n} {what} positives, dataset has {have}")));
            }
        }
    }
    Ok(out)
}

/// Synthetic train/test splits for one experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: GeneratorParams,
    pub test_num: usize,
}

impl SplitSpec {
    pub fn generate(&self, seed: u64) -> Result<(Vec<VolumeSample>, Vec<VolumeSample>)> {
        let train = generate_samples(&GeneratorParams {
            seed,
            ..self.train.clone()
        })?;
        let mut test = generate_samples(&GeneratorParams {
            num: self.test_num,
            seed: seed.wrapping_add(TEST_SEED_OFFSET),
            ..self.train.clone()
        })?;
        for s in &mut test {
            s.id = format!("test_{}", s.id);
        }
        Ok((train, test))
    }
}

/// Mean test DSC per variant for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub variant: Variant,
    pub seed: u64,
    pub mean_dsc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub seconds: f64,
}

impl VariantScore {
    pub fn of(config: &TrainConfig, outcome: &RunOutcome) -> Self {
        VariantScore {
            variant: config.variant.variant,
            seed: config.seed,
            mean_dsc: outcome.report.mean_dsc(),
            sensitivity: outcome.report.classification.sensitivity,
            specificity: outcome.report.classification.specificity,
            seconds: outcome.seconds,
        }
    }
}

/// Runs each variant on the same split and seed.
pub fn compare_variants(
    train_set: &[VolumeSample],
    test_set: &[VolumeSample],
    base: &TrainConfig,
    variants: &[Variant],
) -> Result<Vec<(VariantScore, RunOutcome)>> {
    variants
        .iter()
        .map(|&v| {
            let config = TrainConfig {
                variant: VariantConfig {
                    variant: v,
                    ..base.variant
                },
                ..base.clone()
            };
            let out = run_variant(train_set, test_set, &config)?;
            Ok((VariantScore::of(&config, &out), out))
        })
        .collect()
}
