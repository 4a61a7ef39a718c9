//! Test-time decisions, overlap and classification metrics, and report
//! files (`summary.json` + `cases.csv`).

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{ModelParams, ParamVars};
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::global::PoolMode;
use crate::local::instance_prob;
use crate::objective::forward;

pub const SUMMARY_FILE: &str = "summary.json";
pub const CASES_FILE: &str = "cases.csv";

/// Image label: 1 iff `P_g >= 0.5`.
pub fn predict_image(p_global: f64) -> u8 {
    u8::from(p_global >= 0.5)
}

/// Voxel label: 1 iff `p_x + q_x >= 1`, i.e. their average reaches 0.5.
pub fn predict_voxels(p: &[f64], q: &[f64]) -> Result<Vec<u8>> {
    if p.len() != q.len() {
        return Err(Error::shape("predict_voxels", format!("{} vs {} entries", p.len(), q.len())));
    }
    Ok(p.iter().zip(q).map(|(a, b)| u8::from(a + b >= 1.0)).collect())
}

/// Voxel label from the attention field alone: 1 iff `p_x >= threshold`.
pub fn segment_attention(p: &[f64], threshold: f64) -> Vec<u8> {
    p.iter().map(|&v| u8::from(v >= threshold)).collect()
}

/// Dice overlap `2|A n B| / (|A| + |B|)`; `None` when both masks are empty.
pub fn dsc(pred: &[u8], truth: &[u8]) -> Result<Option<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::shape("dsc", format!("{} vs {} voxels", pred.len(), truth.len())));
    }
    let (mut a, mut b, mut both) = (0u64, 0u64, 0u64);
    for (&x, &y) in pred.iter().zip(truth) {
        let (x, y) = (x != 0, y != 0);
        a += x as u64;
        b += y as u64;
        both += (x && y) as u64;
    }
    if a + b == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * both as f64 / (a + b) as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub confusion: Confusion,
    /// `TP / (TP + FN)`; absent without true positives in the truth.
    pub sensitivity: Option<f64>,
    /// `TN / (TN + FP)`; absent without true negatives in the truth.
    pub specificity: Option<f64>,
}

pub fn classification_metrics(pred: &[u8], truth: &[u8]) -> Result<ClassificationMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::shape("classification_metrics", format!("{} vs {} labels", pred.len(), truth.len())));
    }
    let mut c = Confusion::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(ClassificationMetrics {
        confusion: c,
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DscStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub max: f64,
    pub median: f64,
}

impl DscStats {
    /// `None` for an empty list.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        let median = if m % 2 == 1 {
            sorted[m / 2]
        } else {
            0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
        };
        Some(DscStats {
            count: values.len(),
            mean,
            std: var.sqrt(),
            max: sorted[m - 1],
            median,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationRule {
    /// `p_x + q_x >= 1`.
    #[default]
    Joint,
    /// `p_x >= 0.5`.
    AttentionOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub true_label: u8,
    pub pred_label: u8,
    #[serde(rename = "P_g")]
    pub p_global: f64,
    /// Empty for cases without ground-truth lesion voxels.
    pub dsc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Absent when no test case has lesion voxels.
    pub dsc: Option<DscStats>,
    pub classification: ClassificationMetrics,
    /// Free-form echo of the configuration that produced the report.
    pub config: serde_json::Value,
    #[serde(skip)]
    pub cases: Vec<CaseResult>,
}

impl MetricsReport {
    pub fn from_cases(cases: Vec<CaseResult>, config: serde_json::Value) -> Result<Self> {
        let pred: Vec<u8> = cases.iter().map(|c| c.pred_label).collect();
        let truth: Vec<u8> = cases.iter().map(|c| c.true_label).collect();
        let dscs: Vec<f64> = cases.iter().filter_map(|c| c.dsc).collect();
        Ok(MetricsReport {
            dsc: DscStats::from_values(&dscs),
            classification: classification_metrics(&pred, &truth)?,
            config,
            cases,
        })
    }

    pub fn mean_dsc(&self) -> Option<f64> {
        self.dsc.map(|d| d.mean)
    }

    /// One-line table row: `mean +- std, max, median, sens, spec`.
    pub fn table_row(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
        let dsc = match &self.dsc {
            Some(d) => format!(
                "{:.2} +- {:.2}, max {:.2}, median {:.2}",
                100.0 * d.mean,
                100.0 * d.std,
                100.0 * d.max,
                100.0 * d.median
            ),
            None => "DSC n/a".to_string(),
        };
        format!(
            "{dsc}, sensitivity {}, specificity {}",
            pct(self.classification.sensitivity),
            pct(self.classification.specificity)
        )
    }
}

/// Per-volume predictions on every slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub p_global: f64,
    pub label: u8,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub mask: Vec<u8>,
}

pub fn predict_volume(params: &ModelParams, sample: &VolumeSample, pool: PoolMode, rule: SegmentationRule) -> Result<Prediction> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false);
    let slices: Vec<usize> = (0..sample.depth()).collect();
    let f = forward(&mut tape, &vars, sample, &slices, pool)?;
    let q = instance_prob(&mut tape, &f.features, vars.w_local)?;
    let p = tape.data(f.probs).to_vec();
    let q = tape.data(q).to_vec();
    let mask = match rule {
        SegmentationRule::Joint => predict_voxels(&p, &q)?,
        SegmentationRule::AttentionOnly => segment_attention(&p, 0.5),
    };
    let p_global = tape.scalar(f.global_prob)?;
    Ok(Prediction {
        p_global,
        label: predict_image(p_global),
        p,
        q,
        mask,
    })
}

/// Scores every test case (in parallel, reduced in input order). A volume
/// classified negative gets an empty predicted mask.
pub fn evaluate(
    params: &ModelParams,
    test: &[VolumeSample],
    pool: PoolMode,
    rule: SegmentationRule,
    config: serde_json::Value,
) -> Result<MetricsReport> {
    let cases = test
        .par_iter()
        .map(|s| {
            let pred = predict_volume(params, s, pool, rule)?;
            let dice = if s.mask.iter().any(|&m| m != 0) {
                let mask = if pred.label == 1 {
                    pred.mask
                } else {
                    vec![0; s.num_voxels()]
                };
                dsc(&mask, &s.mask)?
            } else {
                None
            };
            Ok(CaseResult {
                case_id: s.id.clone(),
                true_label: s.image_label,
                pred_label: pred.label,
                p_global: pred.p_global,
                dsc: dice,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_cases(cases, config)
}

pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(report)?)?;
    let mut w = csv::Writer::from_path(dir.join(CASES_FILE))?;
    for c in &report.cases {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a report back and checks that the summary agrees with the
/// statistics recomputed from the per-case file.
pub fn load_report(dir: &Path) -> Result<MetricsReport> {
    let mut report: MetricsReport = serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE))?)?;
    let mut r = csv::Reader::from_path(dir.join(CASES_FILE))?;
    let cases = r.deserialize().collect::<std::result::Result<Vec<CaseResult>, _>>()?;
    let recomputed = MetricsReport::from_cases(cases, report.config.clone())?;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let agree = match (&report.dsc, &recomputed.dsc) {
        (None, None) => true,
        (Some(a), Some(b)) => {
            a.count == b.count && close(a.mean, b.mean) && close(a.std, b.std) && close(a.max, b.max) && close(a.median, b.median)
        }
        _ => false,
    } && report.classification.confusion == recomputed.classification.confusion;
    if !agree {
        return Err(Error::invalid(format!("{SUMMARY_FILE} disagrees with {CASES_FILE} in {}", dir.display())));
    }
    report.cases = recomputed.cases;
    Ok(report)
}
