//! SGD with momentum and weight decay, linear learning-rate scaling and a
//! cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::param::{Parameterized, SlotMut};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "d_base_lr")]
    pub base_lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub mixed_precision: bool,
    /// Parameter-name substrings exempt from weight decay; empty decays all.
    #[serde(default)]
    pub no_decay: Vec<String>,
    /// Parameter-name prefixes that are never updated.
    #[serde(default)]
    pub frozen: Vec<String>,
}

fn d_base_lr() -> f64 {
    0.03
}
fn d_batch() -> usize {
    128
}
fn d_wd() -> f64 {
    0.0005
}
fn d_momentum() -> f64 {
    0.9
}
fn d_epochs() -> usize {
    400
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: d_base_lr(),
            batch_size: d_batch(),
            weight_decay: d_wd(),
            momentum: d_momentum(),
            epochs: d_epochs(),
            mixed_precision: false,
            no_decay: Vec::new(),
            frozen: Vec::new(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("optimizer: {m}")));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch norm needs two samples)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        Ok(())
    }

    /// `base_lr * batch_size / 256`.
    pub fn scaled_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn decays(&self, name: &str) -> bool {
        self.weight_decay > 0.0 && !self.no_decay.iter().any(|p| name.contains(p.as_str()))
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// Cosine-decayed learning rate at training progress `t` in `[0, 1]`.
pub fn lr_at(t: f64, cfg: &OptimConfig) -> f64 {
    let t = t.clamp(0.0, 1.0);
    cfg.scaled_lr() * 0.5 * (1.0 + (PI * t).cos())
}

/// Names of the parameters the optimizer decays, in visiting order.
pub fn decayed_params(model: &dyn Parameterized, cfg: &OptimConfig) -> Vec<String> {
    let mut out = Vec::new();
    model.visit("", &mut |name, kind, _| {
        if kind == crate::nn::param::SlotKind::Param && !cfg.is_frozen(name) && cfg.decays(name) {
            out.push(name.to_string());
        }
    });
    out
}

/// Momentum SGD: `v = m v + (g + wd w)`, `w -= lr v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: BTreeMap<String, ArrayD<f32>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// Multiplies all gradients by `s` (loss-scale removal).
    pub fn scale_grads(model: &mut dyn Parameterized, s: f32) {
        model.visit_mut("", &mut |_, slot| {
            if let SlotMut::Param(p) = slot {
                p.grad.mapv_inplace(|g| g * s);
            }
        });
    }

    pub fn grads_finite(model: &mut dyn Parameterized) -> bool {
        let mut ok = true;
        model.visit_mut("", &mut |_, slot| {
            if let SlotMut::Param(p) = slot {
                ok &= p.grad.iter().all(|g| g.is_finite());
            }
        });
        ok
    }

    pub fn step(&mut self, model: &mut dyn Parameterized, lr: f64, cfg: &OptimConfig) {
        let m = cfg.momentum as f32;
        let lr = lr as f32;
        model.visit_mut("", &mut |name, slot| {
            let SlotMut::Param(p) = slot else { return };
            if cfg.is_frozen(name) {
                return;
            }
            let wd = if cfg.decays(name) { cfg.weight_decay as f32 } else { 0.0 };
            let buf = self
                .momentum
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            ndarray::Zip::from(&mut p.value).and(&p.grad).and(buf).for_each(|w, &g, v| {
                *v = m * *v + g + wd * *w;
                *w -= lr * *v;
            });
        });
    }
}
