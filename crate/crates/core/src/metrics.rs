//! Confusion-matrix segmentation scores.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::labels::LabelMap;

/// `classes x classes` pixel counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() {
            return Err(Error::Dim {
                op: "evaluate",
                axis: "height",
                expected: gt.height(),
                found: pred.height(),
            });
        }
        if pred.width() != gt.width() {
            return Err(Error::Dim {
                op: "evaluate",
                axis: "width",
                expected: gt.width(),
                found: pred.width(),
            });
        }
        let n = self.classes;
        if pred.classes() > n || gt.classes() > n {
            return Err(invalid(
                "label maps have more classes than the confusion matrix",
            ));
        }
        for (&p, &g) in pred.pixels().iter().zip(gt.pixels()) {
            self.counts[g as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    /// Sums another matrix into this one; merging is order-independent.
    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Dim {
                op: "merge",
                axis: "classes",
                expected: self.classes,
                found: other.classes,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport::from_confusion(self.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub confusion: Confusion,
    pub pixel_acc: f64,
    /// Mean row recall over classes present in the ground truth.
    pub mean_acc: f64,
    /// IoU per class; 0 for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<f64>,
    /// Whether each class occurs in the ground truth or the prediction.
    pub present: Vec<bool>,
    pub mean_iou: f64,
    /// Accuracy over pixels whose ground truth is not background.
    pub fg_acc: f64,
    /// Foreground-macro precision, recall and F1.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl MetricsReport {
    pub fn from_confusion(confusion: Confusion) -> Self {
        let n = confusion.classes;
        let tp: Vec<u64> = (0..n).map(|c| confusion.get(c, c)).collect();
        let row: Vec<u64> = (0..n)
            .map(|g| (0..n).map(|p| confusion.get(g, p)).sum())
            .collect();
        let col: Vec<u64> = (0..n)
            .map(|p| (0..n).map(|g| confusion.get(g, p)).sum())
            .collect();
        let total = confusion.total();
        let present: Vec<bool> = (0..n).map(|c| row[c] + col[c] > 0).collect();
        let per_class_iou: Vec<f64> = (0..n)
            .map(|c| ratio(tp[c], row[c] + col[c] - tp[c]))
            .collect();
        let mean_iou = mean((0..n).filter(|&c| present[c]).map(|c| per_class_iou[c]));
        let mean_acc = mean((0..n).filter(|&c| row[c] > 0).map(|c| ratio(tp[c], row[c])));
        let fg_acc = ratio(tp.iter().skip(1).sum(), row.iter().skip(1).sum());
        let fg: Vec<usize> = (1..n).filter(|&c| present[c]).collect();
        let precision = mean(fg.iter().map(|&c| ratio(tp[c], col[c])));
        let recall = mean(fg.iter().map(|&c| ratio(tp[c], row[c])));
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        MetricsReport {
            pixel_acc: ratio(tp.iter().sum(), total),
            mean_acc,
            per_class_iou,
            present,
            mean_iou,
            fg_acc,
            precision,
            recall,
            f1,
            confusion,
        }
    }
}

/// Scores for one prediction/ground-truth pair over `classes` classes.
pub fn evaluate(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<MetricsReport> {
    let mut c = Confusion::new(classes);
    c.accumulate(pred, gt)?;
    Ok(c.report())
}

/// Scores accumulated over a dataset of `(prediction, ground truth)` pairs.
pub fn evaluate_all<'a>(
    pairs: impl IntoIterator<Item = (&'a LabelMap, &'a LabelMap)>,
    classes: usize,
) -> Result<MetricsReport> {
    let mut c = Confusion::new(classes);
    for (p, g) in pairs {
        c.accumulate(p, g)?;
    }
    Ok(c.report())
}
