//! Local (instance-level) classifier `w_l`.
//!
//! On volumes without voxel labels the separated foreground and background
//! bags are averaged into bag features and scored with `w_l`; on labeled
//! volumes every instance is supervised directly. Because `w_l` is linear,
//! scoring the mean feature equals averaging the instance scores, so the
//! same head yields per-voxel probabilities `q_x`.

use serde::{Deserialize, Serialize};

use crate::attention::check_mask;
use crate::autodiff::{Tape, Var};
use crate::backbone::FeatureMap;
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::separation::{BACKGROUND_LABEL, FOREGROUND_LABEL};

/// Mean feature of a bag. Gradients reach the features, never the membership.
pub fn bag_feature(tape: &mut Tape, fm: &FeatureMap, members: &[usize]) -> Result<Var> {
    if members.is_empty() {
        return Err(Error::invalid("bag_feature: empty member set"));
    }
    tape.mean_rows(fm.features, members)
}

pub fn bag_prob(tape: &mut Tape, bag: Var, w_local: Var) -> Result<Var> {
    let logit = tape.dot(bag, w_local)?;
    Ok(tape.sigmoid(logit))
}

/// Per-location probabilities `q_x = sigmoid(w_l . f_x)`.
pub fn instance_prob(tape: &mut Tape, fm: &FeatureMap, w_local: Var) -> Result<Var> {
    let logits = tape.matvec(fm.features, w_local)?;
    Ok(tape.sigmoid(logits))
}

/// `-[ln P_fg + ln(1 - P_bg)]` with the bag pseudo-labels 1 and 0.
pub fn unlabeled_mil_loss(tape: &mut Tape, p_foreground: Var, p_background: Var) -> Result<Var> {
    let fg = tape.bce_sum(p_foreground, &[FOREGROUND_LABEL])?;
    let bg = tape.bce_sum(p_background, &[BACKGROUND_LABEL])?;
    tape.add(fg, bg)
}

pub fn labeled_instance_loss(tape: &mut Tape, q: Var, mask: &[f64]) -> Result<Var> {
    check_mask("labeled_instance_loss", tape.value(q).len(), mask)?;
    tape.bce_sum(q, mask)
}

/// Reliability weight for the unlabeled term: the largest attention
/// probability on the lattice. Used as a constant.
pub fn adaptive_lambda(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::invalid("adaptive_lambda: empty field"));
    }
    Ok(probs.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Positive-sample counts `N_p^l` and `N_p^u` of a training split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositiveCounts {
    pub labeled: usize,
    pub unlabeled: usize,
}

impl PositiveCounts {
    pub fn of(samples: &[VolumeSample]) -> Self {
        let mut c = PositiveCounts::default();
        for s in samples.iter().filter(|s| s.is_positive()) {
            if s.has_voxel_labels {
                c.labeled += 1;
            } else {
                c.unlabeled += 1;
            }
        }
        c
    }
}

/// Per-sample pieces of the local objective, already computed on the tape.
#[derive(Clone, Copy, Debug)]
pub enum LocalBranch {
    /// Voxel-labeled positive: attention loss plus instance loss; either
    /// may be switched off by an ablation.
    Labeled { attention: Option<Var>, instance: Option<Var> },
    /// Image-label-only positive: bag MIL loss with its weight `lambda`.
    Unlabeled { mil: Var, lambda: f64 },
    /// Negatives and skipped samples contribute nothing.
    None,
}

/// Stochastic per-sample estimate of the local objective: labeled terms are
/// divided by `N_p^l`, the unlabeled term is `lambda * l_u / N_p^u`.
pub fn local_loss(tape: &mut Tape, branch: LocalBranch, counts: PositiveCounts) -> Result<Option<Var>> {
    match branch {
        LocalBranch::Labeled { attention, instance } => {
            if counts.labeled == 0 {
                return Err(Error::invalid("labeled positive present but N_p^l = 0"));
            }
            let sum = match (attention, instance) {
                (Some(a), Some(b)) => tape.add(a, b)?,
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => return Ok(None),
            };
            Ok(Some(tape.scale(sum, 1.0 / counts.labeled as f64)))
        }
        LocalBranch::Unlabeled { mil, lambda } => {
            if counts.unlabeled == 0 {
                return Ok(None);
            }
            Ok(Some(tape.scale(mil, lambda / counts.unlabeled as f64)))
        }
        LocalBranch::None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Lattice;
    use crate::tensor::Tensor;
    use std::f64::consts::LN_2;

    fn fm(tape: &mut Tape, rows: Vec<f64>, c: usize) -> FeatureMap {
        let n = rows.len() / c;
        FeatureMap {
            features: tape.param(Tensor::new(vec![n, c], rows).unwrap()),
            lattice: Lattice {
                depth: 1,
                height: 1,
                width: n,
            },
            channels: c,
        }
    }

    #[test]
    fn bag_feature_cases() {
        let mut t = Tape::new();
        let m = fm(&mut t, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2);
        let single = bag_feature(&mut t, &m, &[1]).unwrap();
        assert_eq!(t.data(single), &[3.0, 4.0]);
        assert!(bag_feature(&mut t, &m, &[]).is_err());

        let m = fm(&mut t, vec![0.25, -1.5, 0.25, -1.5, 0.25, -1.5], 2);
        let all = bag_feature(&mut t, &m, &[0, 1, 2]).unwrap();
        assert_eq!(t.data(all), &[0.25, -1.5]);
    }

    #[test]
    fn bag_prob_reference_points() {
        let mut t = Tape::new();
        let bag = t.param(Tensor::vector(vec![3f64.ln(), 5.0]));
        let w0 = t.param(Tensor::vector(vec![0.0, 0.0]));
        let p = bag_prob(&mut t, bag, w0).unwrap();
        assert_eq!(t.scalar(p).unwrap(), 0.5);
        let w = t.param(Tensor::vector(vec![1.0, 0.0]));
        let p = bag_prob(&mut t, bag, w).unwrap();
        assert!((t.scalar(p).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn singleton_bag_matches_instance_prob() {
        let mut t = Tape::new();
        let m = fm(&mut t, vec![0.3, -0.2, 1.1, 0.4], 2);
        let w = t.param(Tensor::vector(vec![0.7, -1.3]));
        let q = instance_prob(&mut t, &m, w).unwrap();
        let bag = bag_feature(&mut t, &m, &[1]).unwrap();
        let pc = bag_prob(&mut t, bag, w).unwrap();
        assert_eq!(t.data(q)[1], t.scalar(pc).unwrap());

        let w0 = t.param(Tensor::vector(vec![0.0, 0.0]));
        let q0 = instance_prob(&mut t, &m, w0).unwrap();
        assert_eq!(t.data(q0), &[0.5, 0.5]);
    }

    #[test]
    fn unlabeled_loss_values() {
        let mut t = Tape::new();
        let half = t.param(Tensor::scalar(0.5));
        let l = unlabeled_mil_loss(&mut t, half, half).unwrap();
        assert!((t.scalar(l).unwrap() - 2.0 * LN_2).abs() < 1e-15);

        let fg = t.param(Tensor::scalar(0.8));
        let bg = t.param(Tensor::scalar(0.3));
        let l = unlabeled_mil_loss(&mut t, fg, bg).unwrap();
        assert!((t.scalar(l).unwrap() - 0.579_818_495_252_942).abs() < 1e-12);

        let fg = t.param(Tensor::scalar(1.0 - 1e-13));
        let bg = t.param(Tensor::scalar(1e-13));
        let l = unlabeled_mil_loss(&mut t, fg, bg).unwrap();
        assert!(t.scalar(l).unwrap() < 1e-12);
    }

    #[test]
    fn labeled_instance_loss_values() {
        let mut t = Tape::new();
        let q = t.param(Tensor::vector(vec![0.5; 4]));
        let l = labeled_instance_loss(&mut t, q, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((t.scalar(l).unwrap() - 4.0 * LN_2).abs() < 1e-12);
        assert!(labeled_instance_loss(&mut t, q, &[1.0]).is_err());
    }

    #[test]
    fn lambda_is_the_field_max() {
        assert_eq!(adaptive_lambda(&[0.2, 0.7]).unwrap(), 0.7);
        assert_eq!(adaptive_lambda(&[0.5, 0.5, 0.5]).unwrap(), 0.5);
        assert!(adaptive_lambda(&[]).is_err());
    }

    #[test]
    fn local_loss_weighting() {
        let counts = PositiveCounts { labeled: 4, unlabeled: 2 };
        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(2.0));
        let b = t.param(Tensor::scalar(6.0));
        let l = local_loss(
            &mut t,
            LocalBranch::Labeled {
                attention: Some(a),
                instance: Some(b),
            },
            counts,
        )
        .unwrap()
        .unwrap();
        assert_eq!(t.scalar(l).unwrap(), 2.0);
        let att_only = local_loss(
            &mut t,
            LocalBranch::Labeled {
                attention: Some(a),
                instance: None,
            },
            counts,
        )
        .unwrap()
        .unwrap();
        assert_eq!(t.scalar(att_only).unwrap(), 0.5);
        let u = local_loss(&mut t, LocalBranch::Unlabeled { mil: b, lambda: 0.5 }, counts)
            .unwrap()
            .unwrap();
        assert_eq!(t.scalar(u).unwrap(), 1.5);
        assert!(local_loss(&mut t, LocalBranch::None, counts).unwrap().is_none());
        let none_unlabeled = PositiveCounts { labeled: 1, unlabeled: 0 };
        assert!(local_loss(&mut t, LocalBranch::Unlabeled { mil: b, lambda: 0.5 }, none_unlabeled)
            .unwrap()
            .is_none());
    }
}
