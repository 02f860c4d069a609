//! Binary classification metrics: confusion matrix, accuracy, precision,
//! recall, F1, ROC curve and trapezoidal AUC.
//!
//! Conventions: a score at exactly the threshold is predicted positive
//! (`>=`); a metric whose denominator is zero is reported as 0 and marked
//! undefined; ROC thresholds sweep the distinct scores in descending order
//! with tied scores grouped into one point.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// A ratio metric; `defined` is false when its denominator was zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric {
    pub value: f64,
    pub defined: bool,
}

fn ratio(num: u64, den: u64) -> Metric {
    if den == 0 {
        Metric {
            value: 0.0,
            defined: false,
        }
    } else {
        Metric {
            value: num as f64 / den as f64,
            defined: true,
        }
    }
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Metric {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> Metric {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Metric {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall.
    pub fn f1(&self) -> Metric {
        let (p, r) = (self.precision().value, self.recall().value);
        if p + r == 0.0 {
            Metric {
                value: 0.0,
                defined: false,
            }
        } else {
            Metric {
                value: 2.0 * p * r / (p + r),
                defined: true,
            }
        }
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            shape: vec![scores.len()],
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidLabel(l));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("NaN score"));
    }
    Ok(())
}

pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    check_inputs(scores, labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>=` this are predicted positive. `+inf` for the origin.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(
            "ROC needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold,
        });
    }
    let last = points[points.len() - 1];
    if last.fpr != 1.0 || last.tpr != 1.0 {
        points.push(RocPoint {
            fpr: 1.0,
            tpr: 1.0,
            threshold: f64::NEG_INFINITY,
        });
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve over the false-positive rate.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub threshold: f64,
    pub n: u64,
    pub cm: ConfusionMatrix,
}

impl EvalReport {
    /// Full report plus the ROC curve it was computed from. AUC is `NaN`-free:
    /// a single-class split reports AUC 0 and returns no curve.
    pub fn compute(
        scores: &[f64],
        labels: &[u8],
        threshold: f64,
    ) -> Result<(Self, Option<RocCurve>)> {
        let cm = confusion(scores, labels, threshold)?;
        let curve = roc_curve(scores, labels).ok();
        let report = Self {
            accuracy: cm.accuracy().value,
            precision: cm.precision().value,
            recall: cm.recall().value,
            f1: cm.f1().value,
            auc: curve.as_ref().map_or(0.0, auc),
            threshold,
            n: cm.total(),
            cm,
        };
        Ok((report, curve))
    }
}
