//! Exact t-SNE (O(n^2) per iteration) with a seeded initialization.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::map_range;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsneConfig {
    #[serde(default = "d_perp")]
    pub perplexity: f64,
    #[serde(default = "d_iters")]
    pub iterations: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_exag")]
    pub early_exaggeration: f64,
    #[serde(default = "d_exag_iters")]
    pub exaggeration_iters: usize,
    #[serde(default)]
    pub seed: u64,
}

fn d_perp() -> f64 {
    30.0
}
fn d_iters() -> usize {
    1000
}
fn d_lr() -> f64 {
    200.0
}
fn d_exag() -> f64 {
    12.0
}
fn d_exag_iters() -> usize {
    250
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: d_perp(),
            iterations: d_iters(),
            learning_rate: d_lr(),
            early_exaggeration: d_exag(),
            exaggeration_iters: d_exag_iters(),
            seed: 0,
        }
    }
}

fn sq_dists(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
    let g = x.dot(&x.t());
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { (norms[i] + norms[j] - 2.0 * g[[i, j]]).max(0.0) })
}

/// Conditional affinities of row `i` at the precision matching `perplexity`.
fn row_affinities(d: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut beta = 1.0;
    let mut p = vec![0.0; d.len()];
    for _ in 0..100 {
        let mut sum = 0.0;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = if j == i { 0.0 } else { (-d[j] * beta).exp() };
            sum += *pj;
        }
        let sum = sum.max(1e-300);
        let mut h = 0.0;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj /= sum;
            if j != i {
                h += beta * d[j] * *pj;
            }
        }
        h += sum.ln();
        let diff = h - target;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
        }
    }
    p
}

/// Embeds rows of `x` into two dimensions.
pub fn tsne(x: ArrayView2<f32>, cfg: &TsneConfig) -> Result<Array2<f64>> {
    let n = x.nrows();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("t-SNE needs at least 3 points, got {n}")));
    }
    let perplexity = cfg.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    // Pre-scale by the largest distance so affinities are well conditioned.
    let xf = x.mapv(f64::from);
    let mut d = sq_dists(xf.view());
    let maxd = d.iter().cloned().fold(0.0, f64::max);
    if maxd > 0.0 {
        d /= maxd;
    }
    let rows: Vec<Vec<f64>> = map_range(n, |i| row_affinities(d.row(i).as_slice().expect("contiguous"), i, perplexity));
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            p[[i, j]] = ((rows[i][j] + rows[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y = Array2::from_shape_fn((n, 2), |_| init.sample(&mut rng));
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iters { 0.5 } else { 0.8 };
        // Student-t kernel numerators and their total.
        let num: Vec<Vec<f64>> = map_range(n, |i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        let dy0 = y[[i, 0]] - y[[j, 0]];
                        let dy1 = y[[i, 1]] - y[[j, 1]];
                        1.0 / (1.0 + dy0 * dy0 + dy1 * dy1)
                    }
                })
                .collect()
        });
        let zsum: f64 = num.iter().map(|r| r.iter().sum::<f64>()).sum::<f64>().max(1e-300);
        let grads: Vec<[f64; 2]> = map_range(n, |i| {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i][j] / zsum;
                let m = (exag * p[[i, j]] - q) * num[i][j];
                g[0] += 4.0 * m * (y[[i, 0]] - y[[j, 0]]);
                g[1] += 4.0 * m * (y[[i, 1]] - y[[j, 1]]);
            }
            g
        });
        for i in 0..n {
            for k in 0..2 {
                let g = grads[i][k];
                let gain = &mut gains[[i, k]];
                *gain = if (g > 0.0) != (update[[i, k]] > 0.0) { *gain + 0.2 } else { (*gain * 0.8).max(0.01) };
                update[[i, k]] = momentum * update[[i, k]] - cfg.learning_rate * *gain * g;
                y[[i, k]] += update[[i, k]];
            }
        }
        for k in 0..2 {
            let mean = y.column(k).sum() / n as f64;
            y.column_mut(k).mapv_inplace(|v| v - mean);
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { name: "t-SNE coordinates".into() });
    }
    Ok(y)
}

/// Mean silhouette coefficient of a labeled point set (Euclidean).
pub fn silhouette(x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let n = x.nrows();
    if labels.len() != n || n < 2 {
        return Err(Error::Shape(format!("{} labels for {n} points", labels.len())));
    }
    let d = sq_dists(x).mapv(f64::sqrt);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let s: Vec<f64> = map_range(n, |i| {
        let mut sum = vec![0.0; classes];
        let mut cnt = vec![0usize; classes];
        for j in 0..n {
            if j != i {
                sum[labels[j]] += d[[i, j]];
                cnt[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if cnt[own] == 0 {
            return 0.0;
        }
        let a = sum[own] / cnt[own] as f64;
        let b = (0..classes)
            .filter(|&c| c != own && cnt[c] > 0)
            .map(|c| sum[c] / cnt[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            return 0.0;
        }
        (b - a) / a.max(b)
    });
    Ok(s.iter().sum::<f64>() / n as f64)
}
