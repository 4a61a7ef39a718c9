//! Ablation variants and the per-voxel pseudo-label (teacher-student)
//! baseline.

use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::ParamVars;
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::evaluation::{segment_attention, SegmentationRule};
use crate::global::PoolMode;
use crate::local::PositiveCounts;
use crate::objective::forward;
use crate::training::{run_iterations, TrainConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    GlobalOnly,
    LocalOnly,
    MaxPool,
    AvgPool,
    ConstLambda,
    Pvpl,
    LabeledOnly,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::GlobalOnly,
        Variant::LocalOnly,
        Variant::MaxPool,
        Variant::AvgPool,
        Variant::ConstLambda,
        Variant::Pvpl,
        Variant::LabeledOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::GlobalOnly => "global_only",
            Variant::LocalOnly => "local_only",
            Variant::MaxPool => "max_pool",
            Variant::AvgPool => "avg_pool",
            Variant::ConstLambda => "const_lambda",
            Variant::Pvpl => "pvpl",
            Variant::LabeledOnly => "labeled_only",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub variant: Variant,
    /// Weight of the unlabeled term under `const_lambda`.
    pub lambda_const: f64,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            variant: Variant::Full,
            lambda_const: 1.0,
        }
    }
}

impl VariantConfig {
    pub fn new(variant: Variant) -> Self {
        VariantConfig {
            variant,
            ..Default::default()
        }
    }

    /// Loss paths this variant trains with. For `pvpl` these are the
    /// teacher-stage paths.
    pub fn loss_paths(&self) -> LossPaths {
        let full = LossPaths::default();
        match self.variant {
            Variant::Full => full,
            Variant::GlobalOnly => LossPaths {
                attention_supervision: false,
                instance_supervision: false,
                unlabeled_mil: false,
                ..full
            },
            Variant::LocalOnly => LossPaths { global: false, ..full },
            Variant::MaxPool => LossPaths {
                pool: PoolMode::Max,
                ..full
            },
            Variant::AvgPool => LossPaths {
                pool: PoolMode::Average,
                ..full
            },
            Variant::ConstLambda => LossPaths {
                lambda: LambdaRule::Constant(self.lambda_const),
                ..full
            },
            Variant::LabeledOnly => LossPaths {
                unlabeled_mil: false,
                ..full
            },
            Variant::Pvpl => LossPaths {
                instance_supervision: false,
                unlabeled_mil: false,
                ..full
            },
        }
    }

    /// Decoding rule used at test time.
    pub fn segmentation_rule(&self) -> SegmentationRule {
        match self.variant {
            Variant::Pvpl => SegmentationRule::AttentionOnly,
            _ => SegmentationRule::Joint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::ConstLambda && !(self.lambda_const.is_finite() && self.lambda_const >= 0.0) {
            return Err(Error::invalid(format!("lambda_const must be finite and >= 0, got {}", self.lambda_const)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    /// Maximum attention probability of the sample.
    Adaptive,
    Constant(f64),
}

/// Which loss terms a training run assembles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPaths {
    pub global: bool,
    pub pool: PoolMode,
    /// Attention cross-entropy on voxel-labeled positives.
    pub attention_supervision: bool,
    /// Instance cross-entropy through `w_l` on voxel-labeled positives.
    pub instance_supervision: bool,
    /// Bag MIL loss on image-label-only positives.
    pub unlabeled_mil: bool,
    /// Attention cross-entropy against per-voxel pseudo-labels on
    /// image-label-only positives (teacher-student student stage).
    pub pseudo_attention: bool,
    pub lambda: LambdaRule,
}

impl Default for LossPaths {
    fn default() -> Self {
        LossPaths {
            global: true,
            pool: PoolMode::Attention,
            attention_supervision: true,
            instance_supervision: true,
            unlabeled_mil: true,
            pseudo_attention: false,
            lambda: LambdaRule::Adaptive,
        }
    }
}

impl LossPaths {
    pub fn any_local(&self) -> bool {
        self.attention_supervision || self.instance_supervision || self.unlabeled_mil || self.pseudo_attention
    }

    pub fn lambda_for(&self, adaptive: f64) -> f64 {
        match self.lambda {
            LambdaRule::Adaptive => adaptive,
            LambdaRule::Constant(c) => c,
        }
    }
}

/// Fraction of the iteration budget spent on the teacher stage.
pub const TEACHER_BUDGET: f64 = 0.4;
/// Attention probability at or above which a voxel is pseudo-labeled positive.
pub const PSEUDO_LABEL_THRESHOLD: f64 = 0.5;

/// Outcome of the teacher-student baseline.
#[derive(Debug)]
pub struct PvplOutcome {
    pub teacher_iters: usize,
    pub student_iters: usize,
    pub state: TrainState,
    /// Pseudo-labeled voxel masks, indexed like the training set; `None`
    /// for samples that were not pseudo-labeled.
    pub pseudo_masks: Vec<Option<Vec<u8>>>,
}

/// Teacher: attention and global streams on the training set (no bag MIL).
/// Pseudo-labels: teacher `p_x >= 0.5` on image-label-only positives.
/// Student: continues from the teacher, supervising attention on both the
/// voxel-labeled and the pseudo-labeled positives.
pub fn pvpl_self_training(dataset: &[VolumeSample], config: &TrainConfig) -> Result<PvplOutcome> {
    let counts = PositiveCounts::of(dataset);
    if counts.labeled == 0 {
        return Err(Error::invalid("pvpl needs at least one voxel-labeled positive"));
    }
    config.validate()?;
    let teacher_iters = (config.max_iters as f64 * TEACHER_BUDGET).round() as usize;
    let student_iters = config.max_iters - teacher_iters;

    let teacher_paths = VariantConfig::new(Variant::Pvpl).loss_paths();
    let mut state = TrainState::new(config)?;
    run_iterations(&mut state, dataset, config, &teacher_paths, teacher_iters, None)?;

    let pseudo_masks = dataset
        .iter()
        .map(|s| {
            if s.is_positive() && !s.has_voxel_labels {
                pseudo_label(&state, s).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let minted = pseudo_masks.iter().flatten().count();
    info!(
        "pvpl: teacher ran {teacher_iters} iterations, minted {minted} pseudo-labeled volumes, student runs {student_iters}"
    );

    let student_paths = LossPaths {
        pseudo_attention: true,
        ..teacher_paths
    };
    run_iterations(&mut state, dataset, config, &student_paths, student_iters, Some(&pseudo_masks))?;
    Ok(PvplOutcome {
        teacher_iters,
        student_iters,
        state,
        pseudo_masks,
    })
}

fn pseudo_label(state: &TrainState, sample: &VolumeSample) -> Result<Vec<u8>> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &state.params, false);
    let slices: Vec<usize> = (0..sample.depth()).collect();
    let f = forward(&mut tape, &vars, sample, &slices, PoolMode::Attention)?;
    Ok(segment_attention(tape.data(f.probs), PSEUDO_LABEL_THRESHOLD))
}
