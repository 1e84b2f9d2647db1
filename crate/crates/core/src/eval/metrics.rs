//! Classification metrics and the focal loss.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class recall/F1 summary. Classes without any true sample are left out
/// of both means and listed in `excluded_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    /// Recall of each class in `classes`, same order.
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub classes: Vec<usize>,
    pub excluded_classes: Vec<usize>,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<u64>>,
}

pub fn confusion_matrix(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let mut cm = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::InvalidArgument(format!("label {} outside {num_classes} classes", p.max(t))));
        }
        cm[t][p] += 1;
    }
    Ok(cm)
}

pub fn metrics_from_confusion(cm: Vec<Vec<u64>>) -> Metrics {
    let c = cm.len();
    let mut m = Metrics {
        balanced_accuracy: 0.0,
        macro_f1: 0.0,
        per_class_recall: Vec::new(),
        per_class_f1: Vec::new(),
        classes: Vec::new(),
        excluded_classes: Vec::new(),
        confusion: Vec::new(),
    };
    for k in 0..c {
        let support: u64 = cm[k].iter().sum();
        if support == 0 {
            m.excluded_classes.push(k);
            continue;
        }
        let tp = cm[k][k] as f64;
        let predicted: u64 = (0..c).map(|t| cm[t][k]).sum();
        let recall = tp / support as f64;
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        m.classes.push(k);
        m.per_class_recall.push(recall);
        m.per_class_f1.push(f1);
    }
    let n = m.classes.len().max(1) as f64;
    m.balanced_accuracy = m.per_class_recall.iter().sum::<f64>() / n;
    m.macro_f1 = m.per_class_f1.iter().sum::<f64>() / n;
    m.confusion = cm;
    m
}

/// Balanced accuracy (mean per-class recall), macro F1 and per-class recall.
pub fn balanced_metrics(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<Metrics> {
    Ok(metrics_from_confusion(confusion_matrix(pred, truth, num_classes)?))
}

fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean of `-(1 - p_t)^gamma log p_t` and its gradient with respect to the
/// logits.
pub fn focal_loss(logits: ArrayView2<f64>, labels: &[usize], gamma: f64) -> Result<(f64, Array2<f64>)> {
    let (b, c) = logits.dim();
    if labels.len() != b || b == 0 {
        return Err(Error::Shape(format!("{} labels for {b} logit rows", labels.len())));
    }
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("focal gamma must be >= 0, got {gamma}")));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {l} outside {c} classes")));
    }
    let mut total = 0.0;
    let mut grad = Array2::zeros((b, c));
    for (i, row) in logits.rows().into_iter().enumerate() {
        let lp = log_softmax_row(row);
        let t = labels[i];
        let log_pt = lp[t];
        let pt = log_pt.exp();
        let q = (1.0 - pt).max(0.0);
        let w = q.powf(gamma);
        total += -w * log_pt;
        // dL/dz_j = (gamma q^(gamma-1) p_t log p_t - q^gamma) (delta_tj - p_j)
        let lead = if gamma == 0.0 || q == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * pt * log_pt
        };
        let coef = lead - w;
        for j in 0..c {
            let pj = lp[j].exp();
            let delta = if j == t { 1.0 } else { 0.0 };
            grad[[i, j]] = coef * (delta - pj) / b as f64;
        }
    }
    Ok((total / b as f64, grad))
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    focal_loss(logits, labels, 0.0).map(|r| r.0)
}
