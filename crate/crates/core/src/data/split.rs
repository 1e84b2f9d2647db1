//! Deterministic pretrain / finetune / val / test partitioning.
//!
//! Sizes are `floor(fraction * N)` for finetune, val and test; pretrain takes
//! the remainder. Stratified splitting applies the same rule per class.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, Split};
use crate::error::{Error, Result};
use crate::par::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "d_pre")]
    pub pretrain: f64,
    #[serde(default = "d_ten")]
    pub finetune: f64,
    #[serde(default = "d_ten")]
    pub val: f64,
    #[serde(default = "d_test")]
    pub test: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stratified: bool,
}

fn d_pre() -> f64 {
    0.6
}
fn d_ten() -> f64 {
    0.1
}
fn d_test() -> f64 {
    0.2
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            pretrain: 0.6,
            finetune: 0.1,
            val: 0.1,
            test: 0.2,
            seed: 0,
            stratified: false,
        }
    }
}

const FLOOR_SLACK: f64 = 1e-9;

impl SplitSpec {
    pub fn fractions(&self) -> [f64; 4] {
        [self.pretrain, self.finetune, self.val, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if f.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config(format!("split fractions must be non-negative, got {f:?}")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Split sizes for `n` items, in `Split::ALL` order.
    pub fn sizes(&self, n: usize) -> Result<[usize; 4]> {
        self.validate()?;
        let f = self.fractions();
        // The slack keeps products like 0.1 * 10 from flooring to 0.999...
        let fl = |x: f64| (x * n as f64 + FLOOR_SLACK).floor() as usize;
        let (a, b, c) = (fl(f[1]), fl(f[2]), fl(f[3]));
        Ok([n - a - b - c, a, b, c])
    }

    fn active_splits(&self) -> usize {
        self.fractions().iter().filter(|&&x| x > 0.0).count()
    }
}

/// Tags for `labels.len()` items. `labels` only matter when stratified.
pub fn assign_splits(labels: &[usize], spec: &SplitSpec) -> Result<Vec<Split>> {
    spec.validate()?;
    let n = labels.len();
    if n < spec.active_splits() {
        return Err(Error::Config(format!(
            "{n} items cannot fill {} non-empty splits",
            spec.active_splits()
        )));
    }
    let mut tags = vec![Split::Pretrain; n];
    let mut assign = |idx: &mut Vec<usize>, stream: u64| -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[stream]));
        idx.shuffle(&mut rng);
        let sizes = spec.sizes(idx.len())?;
        let mut it = idx.iter();
        for (split, &sz) in Split::ALL.iter().zip(&sizes) {
            for &i in it.by_ref().take(sz) {
                tags[i] = *split;
            }
        }
        Ok(())
    };
    if spec.stratified {
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        for c in 0..classes {
            let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if idx.is_empty() {
                continue;
            }
            if idx.len() < spec.active_splits() {
                return Err(Error::Config(format!(
                    "class {c} has {} samples, fewer than the {} stratified splits",
                    idx.len(),
                    spec.active_splits()
                )));
            }
            assign(&mut idx, c as u64 + 1)?;
        }
    } else {
        assign(&mut (0..n).collect(), 0)?;
    }
    Ok(tags)
}

/// Re-tags every manifest entry according to `spec`.
pub fn build_splits(manifest: &Manifest, spec: &SplitSpec) -> Result<Manifest> {
    let tags = assign_splits(&manifest.labels(), spec)?;
    let mut out = manifest.clone();
    for (e, t) in out.entries.iter_mut().zip(tags) {
        e.split = t;
    }
    Ok(out)
}
