//! Diagnostic metrics: confusion counts, the ratio suite, ROC sweeps, AUC
//! and Wilson confidence intervals. `Positive` (COVID-19) is the positive
//! class throughout.
//!
//! Accuracy is `(TP + TN) / total`. A ratio whose denominator is zero is
//! undefined: it is stored as `None` and serialized as `null`, with the
//! reason recorded under `undefined`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::label::Label;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("{predictions} predictions but {truth} truth labels")]
    LengthMismatch { predictions: usize, truth: usize },
    #[error("empty input")]
    Empty,
    #[error("confusion counts must be finite and non-negative")]
    NegativeCount,
    #[error("confusion counts sum to zero")]
    ZeroTotal,
    #[error("ROC needs both classes in the ground truth")]
    SingleClass,
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("invalid counts: {correct} correct of {total}")]
    InvalidCounts { correct: u64, total: u64 },
    #[error("confidence level {0} outside (0, 1)")]
    InvalidLevel(f64),
}

/// Confusion counts. Values are non-negative reals so that percentage
/// tables can be fed in directly; every ratio is scale-invariant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: f64,
    pub fp: f64,
    pub tn: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
}

impl ConfusionCounts {
    pub fn new(tp: f64, fp: f64, tn: f64, fn_: f64) -> Result<Self, MetricsError> {
        let c = Self { tp, fp, tn, fn_ };
        if [tp, fp, tn, fn_].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(MetricsError::NegativeCount);
        }
        Ok(c)
    }

    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp: tp as f64, fp: fp as f64, tn: tn as f64, fn_: fn_ as f64 }
    }

    pub fn total(&self) -> f64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn correct(&self) -> f64 {
        self.tp + self.tn
    }

    /// True when all four values are whole numbers.
    pub fn is_integral(&self) -> bool {
        [self.tp, self.fp, self.tn, self.fn_].iter().all(|v| v.fract() == 0.0)
    }

    pub fn add(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

/// Tally predictions against ground truth.
pub fn confusion(predictions: &[Label], truth: &[Label]) -> Result<ConfusionCounts, MetricsError> {
    if predictions.len() != truth.len() {
        return Err(MetricsError::LengthMismatch { predictions: predictions.len(), truth: truth.len() });
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut c = [0u64; 4];
    for (&p, &t) in predictions.iter().zip(truth) {
        let slot = match (p, t) {
            (Label::Positive, Label::Positive) => 0,
            (Label::Positive, Label::Negative) => 1,
            (Label::Negative, Label::Negative) => 2,
            (Label::Negative, Label::Positive) => 3,
        };
        c[slot] += 1;
    }
    Ok(ConfusionCounts::from_counts(c[0], c[1], c[2], c[3]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub npv: Option<f64>,
    pub f1: Option<f64>,
    pub fpr: Option<f64>,
    pub auc: Option<f64>,
    /// Wilson interval for accuracy.
    pub ci95: Option<(f64, f64)>,
    /// Metric name → why it is undefined.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub undefined: BTreeMap<String, String>,
}

fn ratio(
    num: f64,
    den: f64,
    name: &str,
    why: &str,
    undefined: &mut BTreeMap<String, String>,
) -> Option<f64> {
    if den > 0.0 {
        Some(num / den)
    } else {
        undefined.insert(name.to_string(), format!("{why} = 0"));
        None
    }
}

/// Accuracy, sensitivity, specificity, precision, NPV, F1 and FPR.
///
/// `f1 = 2PR / (P + R)` from the computed precision and sensitivity
/// (0 when both are 0); `fpr` is the complement of specificity.
pub fn basic_metrics(c: &ConfusionCounts) -> Result<MetricsReport, MetricsError> {
    let c = ConfusionCounts::new(c.tp, c.fp, c.tn, c.fn_)?;
    if c.total() <= 0.0 {
        return Err(MetricsError::ZeroTotal);
    }
    let mut undefined = BTreeMap::new();
    let accuracy = Some(c.correct() / c.total());
    let sensitivity = ratio(c.tp, c.tp + c.fn_, "sensitivity", "TP + FN", &mut undefined);
    let specificity = ratio(c.tn, c.tn + c.fp, "specificity", "TN + FP", &mut undefined);
    let precision = ratio(c.tp, c.tp + c.fp, "precision", "TP + FP", &mut undefined);
    let npv = ratio(c.tn, c.tn + c.fn_, "npv", "TN + FN", &mut undefined);
    let fpr = specificity.map(|s| 1.0 - s);
    if fpr.is_none() {
        undefined.insert("fpr".into(), "FP + TN = 0".into());
    }
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => {
            undefined.insert("f1".into(), "precision or sensitivity undefined".into());
            None
        }
    };
    Ok(MetricsReport {
        counts: c,
        accuracy,
        sensitivity,
        specificity,
        precision,
        npv,
        f1,
        fpr,
        auc: None,
        ci95: None,
        undefined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Points ordered by decreasing threshold, so FPR and TPR are non-decreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// CSV with header `threshold,fpr,tpr`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "threshold,fpr,tpr")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
        }
        Ok(())
    }
}

/// Sweep every distinct score as a threshold (predict positive iff
/// `score >= t`), plus a sentinel above the maximum that yields (0, 0).
/// Thresholds that reproduce the previous point are dropped, so a sentinel
/// below the minimum would always coincide with the last point (1, 1).
pub fn roc_curve(scores: &[f64], truth: &[Label]) -> Result<RocCurve, MetricsError> {
    if scores.len() != truth.len() {
        return Err(MetricsError::LengthMismatch { predictions: scores.len(), truth: truth.len() });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(i));
    }
    let n_pos = truth.iter().filter(|l| l.is_positive()).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let max = scores[order[0]];
    let mut points = vec![RocPoint { threshold: max + 1.0, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if truth[order[i]].is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    points.dedup_by(|later, earlier| later.fpr == earlier.fpr && later.tpr == earlier.tpr);
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

/// Two-sided standard-normal quantile for a confidence level.
pub fn z_for_level(level: f64) -> Result<f64, MetricsError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(MetricsError::InvalidLevel(level));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(1.0 - (1.0 - level) / 2.0))
}

/// Wilson score interval for a binomial proportion.
pub fn accuracy_ci(correct: u64, total: u64, level: f64) -> Result<(f64, f64), MetricsError> {
    if total == 0 || correct > total {
        return Err(MetricsError::InvalidCounts { correct, total });
    }
    let z = z_for_level(level)?;
    let n = total as f64;
    let p = correct as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = p + z2 / (2.0 * n);
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let lo = if correct == 0 { 0.0 } else { ((centre - half) / denom).clamp(0.0, p) };
    let hi = if correct == total { 1.0 } else { ((centre + half) / denom).clamp(p, 1.0) };
    Ok((lo, hi))
}

/// Full report: ratios, AUC when both classes are present, and a 95% Wilson
/// interval on accuracy when the counts are whole numbers.
pub fn evaluate(predicted: &[Label], scores: &[f64], truth: &[Label]) -> Result<(MetricsReport, Option<RocCurve>), MetricsError> {
    let counts = confusion(predicted, truth)?;
    let mut report = basic_metrics(&counts)?;
    let curve = match roc_curve(scores, truth) {
        Ok(c) => Some(c),
        Err(MetricsError::SingleClass) => {
            report.undefined.insert("auc".into(), "ground truth has a single class".into());
            None
        }
        Err(e) => return Err(e),
    };
    report.auc = curve.as_ref().map(auc);
    report.ci95 = Some(accuracy_ci(counts.correct() as u64, counts.total() as u64, 0.95)?);
    Ok((report, curve))
}
