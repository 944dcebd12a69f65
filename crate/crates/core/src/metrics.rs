//! Multilabel detection metrics over sample x meter cells.

use ndarray::{ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Micro-aggregated confusion counts over every (sample, meter) cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Counts with positive and negative classes swapped.
    pub fn complement(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }

    pub fn tpr(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn fnr(&self) -> f64 {
        ratio(self.fn_, self.tp + self.fn_)
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_shapes(probs: &ArrayView2<f64>, labels: &ArrayView2<f64>) -> Result<()> {
    if probs.dim() != labels.dim() {
        return Err(Error::invalid(format!("prediction shape {:?} differs from label shape {:?}", probs.dim(), labels.dim())));
    }
    Ok(())
}

/// Cell-wise comparison of `prob > threshold` against the 0/1 labels.
pub fn confusion(probs: ArrayView2<f64>, labels: ArrayView2<f64>, threshold: f64) -> Result<ConfusionCounts> {
    check_shapes(&probs, &labels)?;
    let mut c = ConfusionCounts::default();
    Zip::from(&probs).and(&labels).for_each(|&p, &y| tally(&mut c, p > threshold, y > 0.5));
    Ok(c)
}

/// One set of counts per output column (meter).
pub fn confusion_per_location(probs: ArrayView2<f64>, labels: ArrayView2<f64>, threshold: f64) -> Result<Vec<ConfusionCounts>> {
    check_shapes(&probs, &labels)?;
    Ok(probs
        .columns()
        .into_iter()
        .zip(labels.columns())
        .map(|(pc, yc)| {
            let mut c = ConfusionCounts::default();
            pc.iter().zip(yc.iter()).for_each(|(&p, &y)| tally(&mut c, p > threshold, y > 0.5));
            c
        })
        .collect())
}

fn tally(c: &mut ConfusionCounts, predicted: bool, actual: bool) {
    match (predicted, actual) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, false) => c.tn += 1,
        (false, true) => c.fn_ += 1,
    }
}

/// Fraction of samples whose whole label row is predicted exactly.
pub fn subset_accuracy(probs: ArrayView2<f64>, labels: ArrayView2<f64>, threshold: f64) -> Result<f64> {
    check_shapes(&probs, &labels)?;
    let n = probs.nrows();
    let exact = probs
        .rows()
        .into_iter()
        .zip(labels.rows())
        .filter(|(p, y)| p.iter().zip(y.iter()).all(|(&p, &y)| (p > threshold) == (y > 0.5)))
        .count();
    Ok(ratio(exact as u64, n as u64))
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn f1(c: &ConfusionCounts) -> f64 {
    harmonic(precision(c), recall(c))
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    ratio(c.tp + c.tn, c.total())
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub subset_accuracy: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub threshold: f64,
}

impl MetricReport {
    pub fn from_counts(c: &ConfusionCounts, subset_accuracy: f64, threshold: f64) -> Self {
        Self {
            accuracy: accuracy(c),
            precision: precision(c),
            recall: recall(c),
            f1: f1(c),
            subset_accuracy,
            tpr: c.tpr(),
            fpr: c.fpr(),
            fnr: c.fnr(),
            threshold,
        }
    }

    pub fn evaluate(probs: ArrayView2<f64>, labels: ArrayView2<f64>, threshold: f64) -> Result<Self> {
        let c = confusion(probs, labels, threshold)?;
        Ok(Self::from_counts(&c, subset_accuracy(probs, labels, threshold)?, threshold))
    }

    /// Field-wise mean of several reports (one per validation subset).
    pub fn average(reports: &[MetricReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::invalid("no reports to average"))?;
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            accuracy: mean(|r| r.accuracy),
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            f1: mean(|r| r.f1),
            subset_accuracy: mean(|r| r.subset_accuracy),
            tpr: mean(|r| r.tpr),
            fpr: mean(|r| r.fpr),
            fnr: mean(|r| r.fnr),
            threshold: first.threshold,
        })
    }
}

/// Unweighted mean of per-location precision, recall and F1.
pub fn macro_average(per_location: &[ConfusionCounts]) -> (f64, f64, f64) {
    let n = per_location.len().max(1) as f64;
    let p = per_location.iter().map(precision).sum::<f64>() / n;
    let r = per_location.iter().map(recall).sum::<f64>() / n;
    let f = per_location.iter().map(f1).sum::<f64>() / n;
    (p, r, f)
}
