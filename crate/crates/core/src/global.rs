//! Image-level classifier: attention-guided MIL pooling `h = sum_x alpha_x f_x`,
//! `P_g = sigmoid(w_g . h)`, and its cross-entropy. Max and average score
//! pooling are kept as ablation alternatives.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};

/// Bag representation and image-level score, read back from a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct BagScore {
    pub pooled: Option<Vec<f64>>,
    pub logit: f64,
    pub prob: f64,
}

pub fn pool_bag_feature(tape: &mut Tape, fm: &FeatureMap, weights: Var) -> Result<Var> {
    if tape.value(weights).len() != fm.lattice.len() {
        return Err(Error::shape(
            "pool_bag_feature",
            format!("{} weights for a lattice of {}", tape.value(weights).len(), fm.lattice.len()),
        ));
    }
    tape.weighted_row_sum(weights, fm.features)
}

/// Returns `(logit, P_g)`.
pub fn global_prob(tape: &mut Tape, pooled: Var, w_global: Var) -> Result<(Var, Var)> {
    let logit = tape.dot(pooled, w_global)?;
    Ok((logit, tape.sigmoid(logit)))
}

pub fn global_loss(tape: &mut Tape, prob: Var, label: u8) -> Result<Var> {
    tape.bce_sum(prob, &[label as f64])
}

/// Mean of per-sample global losses over a batch.
pub fn global_loss_dataset(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    let (&first, rest) = losses
        .split_first()
        .ok_or_else(|| Error::invalid("global_loss_dataset: empty batch"))?;
    let mut total = first;
    for &l in rest {
        total = tape.add(total, l)?;
    }
    Ok(tape.scale(total, 1.0 / losses.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    Attention,
    Max,
    Average,
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(PoolMode::Attention),
            "max" => Ok(PoolMode::Max),
            "average" | "avg" => Ok(PoolMode::Average),
            other => Err(Error::invalid(format!("unknown pooling mode {other:?}"))),
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Attention => "attention",
            PoolMode::Max => "max",
            PoolMode::Average => "average",
        })
    }
}

/// Image logit from raw attention scores by max or mean pooling.
pub fn pool_score_ablation(tape: &mut Tape, raw: Var, mode: PoolMode) -> Result<Var> {
    match mode {
        PoolMode::Max => Ok(tape.max(raw)),
        PoolMode::Average => Ok(tape.mean(raw)),
        PoolMode::Attention => Err(Error::invalid("attention pooling is not a score-pooling ablation")),
    }
}

impl fmt::Display for BagScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "logit {:.4}, P_g {:.4}", self.logit, self.prob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Lattice;
    use crate::tensor::Tensor;

    fn fm(tape: &mut Tape, rows: &[[f64; 2]]) -> FeatureMap {
        let data = rows.iter().flatten().copied().collect();
        let features = tape.param(Tensor::new(vec![rows.len(), 2], data).unwrap());
        FeatureMap {
            features,
            lattice: Lattice {
                depth: 1,
                height: 1,
                width: rows.len(),
            },
            channels: 2,
        }
    }

    #[test]
    fn uniform_weights_give_mean_and_one_hot_gives_instance() {
        let mut t = Tape::new();
        let m = fm(&mut t, &[[1.0, 2.0], [3.0, -2.0], [5.0, 6.0]]);
        let w = t.constant(Tensor::vector(vec![1.0 / 3.0; 3]));
        let h = pool_bag_feature(&mut t, &m, w).unwrap();
        assert!((t.data(h)[0] - 3.0).abs() < 1e-15 && (t.data(h)[1] - 2.0).abs() < 1e-15);

        let w = t.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let h = pool_bag_feature(&mut t, &m, w).unwrap();
        assert_eq!(t.data(h), &[3.0, -2.0]);

        let w = t.constant(Tensor::vector(vec![0.5, 0.5]));
        assert!(pool_bag_feature(&mut t, &m, w).is_err());
    }

    #[test]
    fn global_prob_reference_points() {
        let mut t = Tape::new();
        let h = t.param(Tensor::vector(vec![1.0, -1.0]));
        let w = t.param(Tensor::vector(vec![2.0, 2.0]));
        let (_, p) = global_prob(&mut t, h, w).unwrap();
        assert_eq!(t.scalar(p).unwrap(), 0.5);
        let w0 = t.param(Tensor::vector(vec![0.0, 0.0]));
        let h2 = t.param(Tensor::vector(vec![9.0, -4.0]));
        let (_, p) = global_prob(&mut t, h2, w0).unwrap();
        assert_eq!(t.scalar(p).unwrap(), 0.5);
        let short = t.param(Tensor::vector(vec![1.0]));
        assert!(global_prob(&mut t, h, short).is_err());
    }

    #[test]
    fn global_loss_values() {
        let mut t = Tape::new();
        let p = t.param(Tensor::scalar(0.5));
        let l = global_loss(&mut t, p, 1).unwrap();
        assert!((t.scalar(l).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let p = t.param(Tensor::scalar(0.25));
        let l = global_loss(&mut t, p, 0).unwrap();
        assert!((t.scalar(l).unwrap() - 0.287_682_072_451_780_9).abs() < 1e-12);
        let p = t.param(Tensor::scalar(1.0 - 1e-15));
        let l = global_loss(&mut t, p, 1).unwrap();
        assert!(t.scalar(l).unwrap() < 1e-14);
    }

    #[test]
    fn dataset_loss_is_a_mean() {
        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(0.7));
        assert!(global_loss_dataset(&mut t, &[]).is_err());
        let one = global_loss_dataset(&mut t, &[a]).unwrap();
        assert_eq!(t.scalar(one).unwrap(), 0.7);
        let two = global_loss_dataset(&mut t, &[a, a]).unwrap();
        assert_eq!(t.scalar(two).unwrap(), 0.7);
    }

    #[test]
    fn score_pooling_ablations() {
        let mut t = Tape::new();
        let raw = t.param(Tensor::vector(vec![1.0, 3.0, 2.0]));
        let mx = pool_score_ablation(&mut t, raw, PoolMode::Max).unwrap();
        let av = pool_score_ablation(&mut t, raw, PoolMode::Average).unwrap();
        assert_eq!(t.scalar(mx).unwrap(), 3.0);
        assert_eq!(t.scalar(av).unwrap(), 2.0);
        assert!(pool_score_ablation(&mut t, raw, PoolMode::Attention).is_err());
        assert!("median".parse::<PoolMode>().is_err());
    }
}
