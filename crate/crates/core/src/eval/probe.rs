//! Linear evaluation on frozen features with a focal-loss trained probe.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::extract_features;
use super::metrics::{balanced_metrics, focal_loss, Metrics};
use crate::backbone::Model;
use crate::data::{ImageSource, Normalize};
use crate::error::{Error, Result};
use crate::par::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_trials")]
    pub trials: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_gamma() -> f64 {
    4.0
}
fn d_trials() -> usize {
    3
}
fn d_epochs() -> usize {
    100
}
fn d_lr() -> f64 {
    0.1
}
fn d_batch() -> usize {
    256
}
fn d_momentum() -> f64 {
    0.9
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            gamma: d_gamma(),
            trials: d_trials(),
            epochs: d_epochs(),
            lr: d_lr(),
            batch_size: d_batch(),
            momentum: d_momentum(),
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || self.trials == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!("invalid probe config {self:?}")));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("invalid probe optimizer in {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub val_balanced_accuracy: f64,
    pub val_curve: Vec<f64>,
    pub test: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    /// Means over trials of the test metrics.
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub per_class_recall: Vec<f64>,
    pub classes: Vec<usize>,
    pub excluded_classes: Vec<usize>,
    pub class_names: Vec<String>,
    pub trials: Vec<TrialResult>,
    /// Mean validation balanced accuracy of the selected per-trial models.
    pub selected_trial_val_score: f64,
    #[serde(default)]
    pub backbone_hash: String,
}

impl EvalReport {
    /// Averages trial test metrics; every trial must cover the same classes.
    pub fn from_trials(mode: &str, trials: Vec<TrialResult>, class_names: Vec<String>) -> Result<Self> {
        let first = trials.first().ok_or_else(|| Error::InvalidArgument("no trials".into()))?;
        let classes = first.test.classes.clone();
        if trials.iter().any(|t| t.test.classes != classes) {
            return Err(Error::Structure("trials evaluated on different class sets".into()));
        }
        let n = trials.len() as f64;
        let mean = |f: &dyn Fn(&TrialResult) -> f64| trials.iter().map(f).sum::<f64>() / n;
        let per_class_recall = (0..classes.len())
            .map(|k| mean(&|t: &TrialResult| t.test.per_class_recall[k]))
            .collect();
        Ok(Self {
            mode: mode.to_string(),
            balanced_accuracy: mean(&|t| t.test.balanced_accuracy),
            macro_f1: mean(&|t| t.test.macro_f1),
            per_class_recall,
            excluded_classes: first.test.excluded_classes.clone(),
            classes,
            class_names,
            selected_trial_val_score: mean(&|t| t.val_balanced_accuracy),
            trials,
            backbone_hash: String::new(),
        })
    }
}

/// Index of the first maximum; the selection rule for probe checkpoints.
pub fn select_best(val_scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in val_scores.iter().enumerate() {
        if best.is_none_or(|b| v > val_scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Features z-scored per dimension with statistics of the training rows.
struct Standardizer {
    mean: Array1<f64>,
    inv_std: Array1<f64>,
}

impl Standardizer {
    fn fit(x: ArrayView2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let var = x.var_axis(Axis(0), 0.0);
        Self {
            mean,
            inv_std: var.mapv(|v| 1.0 / v.sqrt().max(1e-8)),
        }
    }
    fn apply(&self, x: ArrayView2<f32>) -> Array2<f64> {
        let mut y = x.mapv(f64::from);
        y -= &self.mean;
        y *= &self.inv_std;
        y
    }
}

struct Linear {
    w: Array2<f64>,
    b: Array1<f64>,
}

impl Linear {
    fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }
    fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        self.logits(x)
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for j in 1..r.len() {
                    if r[j] > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Labeled feature matrix.
pub struct FeatureSet<'a> {
    pub feats: ArrayView2<'a, f32>,
    pub labels: &'a [usize],
}

fn check(set: &FeatureSet, what: &str) -> Result<()> {
    if set.feats.nrows() == 0 {
        return Err(Error::InvalidArgument(format!("{what} split is empty")));
    }
    if set.feats.nrows() != set.labels.len() {
        return Err(Error::Shape(format!(
            "{what}: {} rows vs {} labels",
            set.feats.nrows(),
            set.labels.len()
        )));
    }
    Ok(())
}

/// One probe trial: train on `train`, keep the epoch with the best validation
/// balanced accuracy, report that model on `test`.
pub fn run_trial(
    train: &FeatureSet,
    val: &FeatureSet,
    test: &FeatureSet,
    num_classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<TrialResult> {
    let scaler = Standardizer::fit(train.feats.mapv(f64::from).view());
    let (xtr, xva, xte) = (scaler.apply(train.feats), scaler.apply(val.feats), scaler.apply(test.feats));
    let d = xtr.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (d as f64).sqrt();
    let mut lin = Linear {
        w: Array2::from_shape_fn((num_classes, d), |_| rng.random_range(-bound..bound)),
        b: Array1::zeros(num_classes),
    };
    let mut vw = Array2::<f64>::zeros(lin.w.raw_dim());
    let mut vb = Array1::<f64>::zeros(num_classes);
    let n = xtr.nrows();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = (cfg.epochs * steps_per_epoch) as f64;
    let mut step = 0usize;
    let mut best: Option<(usize, f64, Linear)> = None;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = xtr.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (loss, g) = focal_loss(lin.logits(xb.view()).view(), &yb, cfg.gamma)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    name: format!("probe loss at epoch {}", epoch + 1),
                });
            }
            let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total).cos());
            let gw = g.t().dot(&xb);
            let gb = g.sum_axis(Axis(0));
            vw = vw * cfg.momentum + gw;
            vb = vb * cfg.momentum + gb;
            lin.w.scaled_add(-lr, &vw);
            lin.b.scaled_add(-lr, &vb);
            step += 1;
        }
        let score = balanced_metrics(&lin.predict(xva.view()), val.labels, num_classes)?.balanced_accuracy;
        curve.push(score);
        if best.as_ref().is_none_or(|b| score > b.1) {
            best = Some((
                epoch + 1,
                score,
                Linear {
                    w: lin.w.clone(),
                    b: lin.b.clone(),
                },
            ));
        }
    }
    let (best_epoch, val_score, model) = best.expect("at least one epoch");
    debug_assert_eq!(select_best(&curve), Some(best_epoch - 1));
    Ok(TrialResult {
        seed,
        best_epoch,
        val_balanced_accuracy: val_score,
        val_curve: curve,
        test: balanced_metrics(&model.predict(xte.view()), test.labels, num_classes)?,
    })
}

/// All trials on precomputed features.
pub fn linear_probe(
    train: &FeatureSet,
    val: &FeatureSet,
    test: &FeatureSet,
    class_names: &[String],
    cfg: &ProbeConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    check(train, "finetune")?;
    check(val, "val")?;
    check(test, "test")?;
    let trials = (0..cfg.trials)
        .map(|t| run_trial(train, val, test, class_names.len(), cfg, derive_seed(cfg.seed, &[t as u64])))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_trials("linear", trials, class_names.to_vec())
}

/// A labeled image split.
pub struct LabeledSource<'a> {
    pub images: &'a dyn ImageSource,
    pub labels: &'a [usize],
}

/// Extracts frozen backbone features for the three splits and runs the probe.
/// The backbone hash is checked before and after.
pub fn linear_evaluate(
    model: &Model,
    finetune: LabeledSource,
    val: LabeledSource,
    test: LabeledSource,
    norm: &Normalize,
    class_names: &[String],
    cfg: &ProbeConfig,
) -> Result<EvalReport> {
    let before = model.backbone_hash();
    let f = |s: &LabeledSource| extract_features(model, s.images, norm);
    let (ftr, fva, fte) = (f(&finetune)?, f(&val)?, f(&test)?);
    let mut report = linear_probe(
        &FeatureSet {
            feats: ftr.view(),
            labels: finetune.labels,
        },
        &FeatureSet {
            feats: fva.view(),
            labels: val.labels,
        },
        &FeatureSet {
            feats: fte.view(),
            labels: test.labels,
        },
        class_names,
        cfg,
    )?;
    let after = model.backbone_hash();
    if before != after {
        return Err(Error::Structure("backbone parameters changed during linear evaluation".into()));
    }
    report.backbone_hash = after;
    Ok(report)
}
