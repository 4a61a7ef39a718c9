//! Explicitly learned attention: raw scores `a_x = w_a . f_x`, their
//! sigmoid probabilities `p_x`, softmax pooling weights, and the per-voxel
//! supervision loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{FeatureMap, Lattice};
use crate::error::{Error, Result};

pub fn attention_values(tape: &mut Tape, fm: &FeatureMap, w_attention: Var) -> Result<Var> {
    tape.matvec(fm.features, w_attention)
}

pub fn attention_probs(tape: &mut Tape, raw: Var) -> Var {
    tape.sigmoid(raw)
}

/// Summed cross-entropy of `probs` against the 0/1 voxel labels.
pub fn attention_loss(tape: &mut Tape, probs: Var, mask: &[f64]) -> Result<Var> {
    check_mask("attention_loss", tape.value(probs).len(), mask)?;
    tape.bce_sum(probs, mask)
}

pub fn attention_weights(tape: &mut Tape, raw: Var) -> Var {
    tape.softmax(raw)
}

pub(crate) fn check_mask(op: &'static str, lattice: usize, mask: &[f64]) -> Result<()> {
    if mask.len() != lattice {
        return Err(Error::shape(op, format!("mask has {} entries, lattice has {lattice}", mask.len())));
    }
    Ok(())
}

/// Plain snapshot of an attention field for export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionField {
    pub lattice: Lattice,
    pub raw: Vec<f64>,
    pub prob: Vec<f64>,
    pub weight: Vec<f64>,
}

impl AttentionField {
    pub fn from_tape(tape: &Tape, lattice: Lattice, raw: Var, prob: Var, weight: Var) -> Self {
        AttentionField {
            lattice,
            raw: tape.data(raw).to_vec(),
            prob: tape.data(prob).to_vec(),
            weight: tape.data(weight).to_vec(),
        }
    }

    /// Lattice dims as three little-endian `u32`, then `raw`, `prob` and
    /// `weight` as little-endian `f64` arrays.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 24 * self.raw.len());
        for d in [self.lattice.depth, self.lattice.height, self.lattice.width] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for field in [&self.raw, &self.prob, &self.weight] {
            for v in field.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::f64::consts::LN_2;

    fn leaf_fm(tape: &mut Tape, rows: Vec<f64>, c: usize) -> FeatureMap {
        let n = rows.len() / c;
        let features = tape.param(Tensor::new(vec![n, c], rows).unwrap());
        FeatureMap {
            features,
            lattice: Lattice {
                depth: 1,
                height: 1,
                width: n,
            },
            channels: c,
        }
    }

    #[test]
    fn zero_head_gives_zero_scores() {
        let mut t = Tape::new();
        let fm = leaf_fm(&mut t, vec![0.3, -1.0, 2.0, 0.5, 1.0, 1.0], 2);
        let w = t.param(Tensor::vector(vec![0.0, 0.0]));
        let a = attention_values(&mut t, &fm, w).unwrap();
        assert_eq!(t.data(a), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn unit_feature_picks_head_entry() {
        let mut t = Tape::new();
        let fm = leaf_fm(&mut t, vec![1.0, 0.0, 0.0], 3);
        let w = t.param(Tensor::vector(vec![2.0, 3.0, 4.0]));
        let a = attention_values(&mut t, &fm, w).unwrap();
        assert_eq!(t.data(a), &[2.0]);
    }

    #[test]
    fn head_dimension_mismatch() {
        let mut t = Tape::new();
        let fm = leaf_fm(&mut t, vec![1.0, 0.0, 0.0], 3);
        let w = t.param(Tensor::vector(vec![2.0, 3.0]));
        assert!(attention_values(&mut t, &fm, w).is_err());
    }

    #[test]
    fn probabilities_reference_points() {
        let mut t = Tape::new();
        let raw = t.param(Tensor::vector(vec![0.0, 3f64.ln()]));
        let p = attention_probs(&mut t, raw);
        assert_eq!(t.data(p)[0], 0.5);
        assert!((t.data(p)[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn loss_at_half_is_n_ln2() {
        let mut t = Tape::new();
        let p = t.param(Tensor::vector(vec![0.5; 7]));
        let mask = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let l = attention_loss(&mut t, p, &mask).unwrap();
        assert!((t.scalar(l).unwrap() - 7.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_probabilities_give_near_zero_loss() {
        let mask = [1.0, 0.0, 1.0, 0.0];
        let mut t = Tape::new();
        let p = t.param(Tensor::vector(mask.to_vec()));
        let l = attention_loss(&mut t, p, &mask).unwrap();
        assert!(t.scalar(l).unwrap().abs() < 1e-12);
        assert!(t.scalar(l).unwrap() >= 0.0);
    }

    #[test]
    fn loss_rejects_misaligned_mask() {
        let mut t = Tape::new();
        let p = t.param(Tensor::vector(vec![0.5; 3]));
        assert!(matches!(attention_loss(&mut t, p, &[1.0, 0.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_reference_values() {
        let mut t = Tape::new();
        let raw = t.param(Tensor::vector(vec![0.0, 2f64.ln(), 4f64.ln()]));
        let w = attention_weights(&mut t, raw);
        for (got, want) in t.data(w).iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        let raw = t.param(Tensor::vector(vec![0.7; 5]));
        let w = attention_weights(&mut t, raw);
        assert!(t.data(w).iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn export_layout() {
        let f = AttentionField {
            lattice: Lattice {
                depth: 1,
                height: 1,
                width: 2,
            },
            raw: vec![0.0, 1.0],
            prob: vec![0.5, 0.7],
            weight: vec![0.3, 0.7],
        };
        let b = f.to_bytes();
        assert_eq!(b.len(), 12 + 3 * 2 * 8);
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12 + 16..12 + 24], &0.5f64.to_le_bytes());
    }
}
