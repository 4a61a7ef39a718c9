//! Splits an attention field into a high-attention (foreground) bag and a
//! background bag by minimizing the two-cluster deviation cost
//! `sum_c sum_{x in c} |p_x - mean_c|`.
//!
//! In one dimension the optimal two-cluster partition is a threshold split
//! of the sorted values, so an exact scan over the `n - 1` split points
//! replaces iterative Lloyd updates. This runs in the forward pass only.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum spread (max - min) for a field to be separable.
pub const MIN_SPREAD: f64 = 1e-6;

/// Pseudo-label of the foreground bag.
pub const FOREGROUND_LABEL: f64 = 1.0;
/// Pseudo-label of the background bag.
pub const BACKGROUND_LABEL: f64 = 0.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationCost {
    /// Absolute deviations from the cluster mean.
    #[default]
    L1,
    /// Squared deviations (the k-means objective).
    SquaredL2,
}

impl FromStr for SeparationCost {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(SeparationCost::L1),
            "l2" | "squared_l2" => Ok(SeparationCost::SquaredL2),
            other => Err(Error::invalid(format!("unknown separation cost {other:?}"))),
        }
    }
}

impl fmt::Display for SeparationCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeparationCost::L1 => "l1",
            SeparationCost::SquaredL2 => "l2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    /// Lattice indices of the high-attention bag, ascending.
    pub foreground: Vec<usize>,
    /// Lattice indices of the low-attention bag, ascending.
    pub background: Vec<usize>,
    /// Midpoint between the two boundary values.
    pub threshold: f64,
    /// Cost of this partition, evaluated directly.
    pub cost: f64,
}

pub fn separate_regions(probs: &[f64]) -> Result<Separation> {
    separate_regions_with(probs, SeparationCost::L1)
}

pub fn separate_regions_with(probs: &[f64], cost: SeparationCost) -> Result<Separation> {
    if probs.len() < 2 {
        return Err(Error::invalid(format!("separation needs at least 2 values, got {}", probs.len())));
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("separation input contains non-finite values"));
    }
    let (lo, hi) = probs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    if hi - lo < MIN_SPREAD {
        return Err(Error::Degenerate {
            spread: hi - lo,
            min: MIN_SPREAD,
        });
    }

    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| probs[i]).collect();
    let prefix = prefix_sums(sorted.iter().copied());
    let prefix_sq = prefix_sums(sorted.iter().map(|v| v * v));

    let range_cost = |l: usize, r: usize| -> f64 {
        let count = (r - l) as f64;
        let total = prefix[r] - prefix[l];
        match cost {
            SeparationCost::L1 => {
                let mean = total / count;
                let j = l + sorted[l..r].partition_point(|&v| v <= mean);
                let below = (j - l) as f64 * mean - (prefix[j] - prefix[l]);
                let above = (prefix[r] - prefix[j]) - (r - j) as f64 * mean;
                below + above
            }
            SeparationCost::SquaredL2 => ((prefix_sq[r] - prefix_sq[l]) - total * total / count).max(0.0),
        }
    };

    let n = sorted.len();
    let mut best: Option<(usize, f64)> = None;
    for k in 1..n {
        // Equal values stay on the same side of the threshold.
        if sorted[k - 1] == sorted[k] {
            continue;
        }
        let c = range_cost(0, k) + range_cost(k, n);
        if best.is_none_or(|(_, b)| c < b) {
            best = Some((k, c));
        }
    }
    let (split, _) = best.expect("spread > 0 guarantees a split point");

    let mut foreground: Vec<usize> = order[split..].to_vec();
    let mut background: Vec<usize> = order[..split].to_vec();
    foreground.sort_unstable();
    background.sort_unstable();
    let cost_value = clustering_cost(probs, &foreground, &background, cost)?;
    Ok(Separation {
        foreground,
        background,
        threshold: 0.5 * (sorted[split - 1] + sorted[split]),
        cost: cost_value,
    })
}

fn prefix_sums(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut acc = 0.0;
    for v in values {
        acc += v;
        out.push(acc);
    }
    out
}

/// Evaluates the two-cluster cost of an explicit partition.
pub fn clustering_cost(probs: &[f64], a: &[usize], b: &[usize], cost: SeparationCost) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("clustering cost needs two nonempty clusters"));
    }
    Ok(cluster_cost(probs, a, cost)? + cluster_cost(probs, b, cost)?)
}

/// Cost contribution of a single cluster.
pub fn cluster_cost(probs: &[f64], members: &[usize], cost: SeparationCost) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::invalid("empty cluster"));
    }
    if let Some(&bad) = members.iter().find(|&&i| i >= probs.len()) {
        return Err(Error::shape("clustering_cost", format!("index {bad} out of range for {} values", probs.len())));
    }
    let mean = members.iter().map(|&i| probs[i]).sum::<f64>() / members.len() as f64;
    Ok(members
        .iter()
        .map(|&i| {
            let d = probs[i] - mean;
            match cost {
                SeparationCost::L1 => d.abs(),
                SeparationCost::SquaredL2 => d * d,
            }
        })
        .sum())
}
