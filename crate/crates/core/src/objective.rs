//! Forward pass of the full network and assembly of the per-sample and
//! dataset-level training objectives.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_loss, attention_probs, attention_values, attention_weights};
use crate::autodiff::{Tape, Var};
use crate::backbone::{extract_features, FeatureMap, ParamVars};
use crate::baselines::LossPaths;
use crate::data::{gather_slices, VolumeSample};
use crate::error::{Error, Result};
use crate::global::{global_loss, global_prob, pool_bag_feature, pool_score_ablation, PoolMode};
use crate::local::{
    adaptive_lambda, bag_feature, bag_prob, instance_prob, labeled_instance_loss, local_loss, unlabeled_mil_loss,
    LocalBranch, PositiveCounts,
};
use crate::separation::{separate_regions_with, Separation, SeparationCost};
use crate::tensor::Tensor;

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub features: FeatureMap,
    /// Raw attention scores `a_x`.
    pub raw: Var,
    /// Attention probabilities `p_x`.
    pub probs: Var,
    /// Softmax pooling weights; absent under score pooling.
    pub weights: Option<Var>,
    pub global_logit: Var,
    pub global_prob: Var,
}

pub fn forward(
    tape: &mut Tape,
    vars: &ParamVars,
    sample: &VolumeSample,
    slices: &[usize],
    pool: PoolMode,
) -> Result<Forward> {
    let features = extract_features(tape, vars, sample, slices)?;
    let raw = attention_values(tape, &features, vars.w_attention)?;
    let probs = attention_probs(tape, raw);
    let (weights, global_logit, global_prob) = match pool {
        PoolMode::Attention => {
            let w = attention_weights(tape, raw);
            let h = pool_bag_feature(tape, &features, w)?;
            let (logit, prob) = global_prob(tape, h, vars.w_global)?;
            (Some(w), logit, prob)
        }
        mode => {
            let logit = pool_score_ablation(tape, raw, mode)?;
            (None, logit, tape.sigmoid(logit))
        }
    };
    Ok(Forward {
        features,
        raw,
        probs,
        weights,
        global_logit,
        global_prob,
    })
}

/// Everything the per-sample objective needs besides the sample itself.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveContext {
    pub beta: f64,
    pub counts: PositiveCounts,
    pub paths: LossPaths,
    pub separation_cost: SeparationCost,
}

/// Bag membership and reliability weight of an unlabeled sample, held fixed
/// across repeated evaluations (finite differences).
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenSeparation {
    pub separation: Separation,
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Labeled,
    Unlabeled,
    PseudoLabeled,
    /// Positive without voxel labels whose local branch is switched off.
    ImageOnly,
    Negative,
}

#[derive(Clone, Debug)]
pub struct SampleTerms {
    pub forward: Forward,
    pub branch: Branch,
    /// `l_G`, when the global stream is active.
    pub global: Option<Var>,
    /// Local contribution of a labeled (or pseudo-labeled) positive, already
    /// divided by its positive count.
    pub labeled_local: Option<Var>,
    /// `lambda * l_u / N_p^u`.
    pub unlabeled_local: Option<Var>,
    /// Separation used by the unlabeled branch.
    pub frozen: Option<FrozenSeparation>,
    /// The unlabeled branch was skipped because the field was flat.
    pub degenerate: bool,
    /// `l_G + beta * local`.
    pub total: Var,
}

/// Builds one sample's contribution to the training objective.
///
/// `pseudo_mask` (full-volume, 0/1) switches an image-label-only positive
/// onto per-voxel attention supervision when `paths.pseudo_attention` is on.
/// `frozen` replays a previous separation instead of recomputing it.
pub fn sample_objective(
    tape: &mut Tape,
    vars: &ParamVars,
    sample: &VolumeSample,
    slices: &[usize],
    ctx: &ObjectiveContext,
    pseudo_mask: Option<&[u8]>,
    frozen: Option<&FrozenSeparation>,
) -> Result<SampleTerms> {
    let paths = &ctx.paths;
    let fwd = forward(tape, vars, sample, slices, paths.pool)?;
    let global = if paths.global {
        Some(global_loss(tape, fwd.global_prob, sample.image_label)?)
    } else {
        None
    };

    let mut branch = Branch::Negative;
    let mut labeled_local = None;
    let mut unlabeled_local = None;
    let mut frozen_out = None;
    let mut degenerate = false;

    if sample.is_positive() && sample.has_voxel_labels {
        branch = Branch::Labeled;
        let mask = sample.mask_for_slices(slices);
        let attention = if paths.attention_supervision {
            Some(attention_loss(tape, fwd.probs, &mask)?)
        } else {
            None
        };
        let instance = if paths.instance_supervision {
            let q = instance_prob(tape, &fwd.features, vars.w_local)?;
            Some(labeled_instance_loss(tape, q, &mask)?)
        } else {
            None
        };
        labeled_local = local_loss(tape, LocalBranch::Labeled { attention, instance }, ctx.counts)?;
    } else if sample.is_positive() {
        branch = Branch::ImageOnly;
        if let (true, Some(pm)) = (paths.pseudo_attention, pseudo_mask) {
            branch = Branch::PseudoLabeled;
            if pm.len() != sample.num_voxels() {
                return Err(Error::shape(
                    "sample_objective",
                    format!("pseudo mask has {} voxels, volume has {}", pm.len(), sample.num_voxels()),
                ));
            }
            if ctx.counts.unlabeled > 0 {
                let mask = gather_slices(pm, sample.plane(), slices);
                let l = attention_loss(tape, fwd.probs, &mask)?;
                labeled_local = Some(tape.scale(l, 1.0 / ctx.counts.unlabeled as f64));
            }
        } else if paths.unlabeled_mil {
            branch = Branch::Unlabeled;
            let fixed = match frozen {
                Some(f) => Some(f.clone()),
                None => {
                    let p = tape.data(fwd.probs);
                    match separate_regions_with(p, ctx.separation_cost) {
                        Ok(separation) => Some(FrozenSeparation {
                            separation,
                            lambda: paths.lambda_for(adaptive_lambda(p)?),
                        }),
                        Err(Error::Degenerate { .. }) => None,
                        Err(e) => return Err(e),
                    }
                }
            };
            match fixed {
                Some(f) => {
                    let fg = bag_feature(tape, &fwd.features, &f.separation.foreground)?;
                    let bg = bag_feature(tape, &fwd.features, &f.separation.background)?;
                    let p_fg = bag_prob(tape, fg, vars.w_local)?;
                    let p_bg = bag_prob(tape, bg, vars.w_local)?;
                    let mil = unlabeled_mil_loss(tape, p_fg, p_bg)?;
                    unlabeled_local = local_loss(tape, LocalBranch::Unlabeled { mil, lambda: f.lambda }, ctx.counts)?;
                    frozen_out = Some(f);
                }
                None => degenerate = true,
            }
        }
    }

    let local = match (labeled_local, unlabeled_local) {
        (Some(a), Some(b)) => Some(tape.add(a, b)?),
        (a, b) => a.or(b),
    };
    let total = overall_loss(tape, global, local, ctx.beta)?;
    Ok(SampleTerms {
        forward: fwd,
        branch,
        global,
        labeled_local,
        unlabeled_local,
        frozen: frozen_out,
        degenerate,
        total,
    })
}

/// `L_IAG = L_global + beta * L_local`; a missing term counts as zero.
pub fn overall_loss(tape: &mut Tape, global: Option<Var>, local: Option<Var>, beta: f64) -> Result<Var> {
    Ok(match (global, local) {
        (Some(g), Some(l)) => {
            let wl = tape.scale(l, beta);
            tape.add(g, wl)?
        }
        (Some(g), None) => g,
        (None, Some(l)) => tape.scale(l, beta),
        (None, None) => tape.constant(Tensor::scalar(0.0)),
    })
}

/// Full-batch objective over a set of samples, each seen on all slices:
/// mean `l_G` plus `beta` times the sum of positive-count-normalized local
/// terms. Returns the loss and the separations used, so a caller can
/// re-evaluate with membership and `lambda` frozen.
pub fn dataset_objective(
    tape: &mut Tape,
    vars: &ParamVars,
    samples: &[VolumeSample],
    ctx: &ObjectiveContext,
    frozen: Option<&[Option<FrozenSeparation>]>,
) -> Result<(Var, Vec<Option<FrozenSeparation>>)> {
    if samples.is_empty() {
        return Err(Error::invalid("dataset_objective: empty dataset"));
    }
    if let Some(f) = frozen {
        if f.len() != samples.len() {
            return Err(Error::shape("dataset_objective", "one frozen entry per sample required"));
        }
    }
    let mut globals = Vec::with_capacity(samples.len());
    let mut locals = Vec::new();
    let mut used = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let slices: Vec<usize> = (0..s.depth()).collect();
        let fz = frozen.and_then(|f| f[i].as_ref());
        let terms = sample_objective(tape, vars, s, &slices, ctx, None, fz)?;
        globals.extend(terms.global);
        locals.extend(terms.labeled_local);
        locals.extend(terms.unlabeled_local);
        used.push(terms.frozen);
    }
    let global = if globals.is_empty() {
        None
    } else {
        Some(crate::global::global_loss_dataset(tape, &globals)?)
    };
    let local = match locals.split_first() {
        None => None,
        Some((&first, rest)) => {
            let mut acc = first;
            for &l in rest {
                acc = tape.add(acc, l)?;
            }
            Some(acc)
        }
    };
    Ok((overall_loss(tape, global, local, ctx.beta)?, used))
}
