//! Confusion matrices and the OA / F1 / IoU report derived from them.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// `counts[i * u + j]` = pixels with ground truth `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    /// Row-major `u x u` counts.
    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(contract!("{} counts do not form a {num_classes}x{num_classes} matrix", counts.len()));
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|k| self.get(k, k)).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.num_classes).map(|j| self.get(k, j)).sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, k)).sum()
    }

    /// Adds one pixel per position; `ignore` labels are skipped.
    pub fn accumulate(&mut self, pred: ArrayView2<u32>, gt: ArrayView2<u32>, ignore: Option<u32>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(contract!("prediction {:?} and labels {:?} differ in shape", pred.dim(), gt.dim()));
        }
        let u = self.num_classes;
        let scored = || pred.iter().zip(gt.iter()).filter(|&(_, &g)| Some(g) != ignore);
        // Validate first so a bad pixel leaves the matrix untouched.
        if let Some((&p, &g)) = scored().find(|&(&p, &g)| g as usize >= u || p as usize >= u) {
            return Err(Error::Data(format!("class index {} out of range for {u} classes", g.max(p))));
        }
        for (&p, &g) in scored() {
            self.counts[g as usize * u + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(contract!("cannot merge {}-class and {}-class matrices", self.num_classes, other.num_classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Convenience wrapper around [`ConfusionMatrix::accumulate`].
pub fn accumulate_confusion(
    pred: ArrayView2<u32>,
    gt: ArrayView2<u32>,
    num_classes: usize,
    ignore: Option<u32>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt, ignore)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// Ground-truth pixel count.
    pub support: u64,
    /// Whether the class enters the means.
    pub scored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "OA")]
    pub oa: f64,
    pub mean_f1: f64,
    pub miou: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    compute_metrics_excluding(cm, &[])
}

/// As [`compute_metrics`], leaving the `excluded` classes out of the means.
pub fn compute_metrics_excluding(cm: &ConfusionMatrix, excluded: &[usize]) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(contract!("metrics of an empty confusion matrix"));
    }
    let mut per_class = Vec::with_capacity(cm.num_classes());
    let (mut f1_sum, mut iou_sum, mut scored) = (0.0, 0.0, 0usize);
    for k in 0..cm.num_classes() {
        let tp = cm.get(k, k);
        let (row, col) = (cm.row_sum(k), cm.col_sum(k));
        let precision = ratio(tp, col);
        let recall = ratio(tp, row);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        let iou = ratio(tp, row + col - tp);
        let is_scored = row + col > 0 && !excluded.contains(&k);
        if is_scored {
            f1_sum += f1;
            iou_sum += iou;
            scored += 1;
        }
        per_class.push(ClassMetrics { class: k, precision, recall, f1, iou, support: row, scored: is_scored });
    }
    let n = scored.max(1) as f64;
    Ok(MetricsReport { oa: ratio(cm.trace(), total), mean_f1: f1_sum / n, miou: iou_sum / n, per_class })
}
