//! Cosine-similarity weighted k-nearest-neighbour classification.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::map_range;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnnConfig {
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_t")]
    pub temperature: f64,
}

fn d_k() -> usize {
    20
}
fn d_t() -> f64 {
    0.07
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 20, temperature: 0.07 }
    }
}

/// Rows scaled to unit L2 norm; a zero or non-finite row is an error.
pub fn l2_normalize_rows(x: ArrayView2<f32>, what: &str) -> Result<Array2<f32>> {
    let mut out = x.to_owned();
    for (i, mut r) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Numerical(format!("row {i} of {what} has norm {n}")));
        }
        r.mapv_inplace(|v| (v as f64 / n) as f32);
    }
    Ok(out)
}

/// Per query: the `k` most similar training rows (ties to the lower index)
/// vote with weight `exp(sim / temperature)`; the heaviest class wins, ties to
/// the lower class index.
pub fn knn_predict(
    train: ArrayView2<f32>,
    train_labels: &[usize],
    query: ArrayView2<f32>,
    k: usize,
    temperature: f64,
) -> Result<Vec<usize>> {
    let n = train.nrows();
    if n == 0 || train_labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} training rows", train_labels.len())));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} with {n} training rows")));
    }
    if train.ncols() != query.ncols() {
        return Err(Error::Shape(format!("feature widths {} vs {}", train.ncols(), query.ncols())));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let t = l2_normalize_rows(train, "training features")?;
    let q = l2_normalize_rows(query, "query features")?;
    let sims = q.dot(&t.t());
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    Ok(map_range(q.nrows(), |i| {
        let row = sims.row(i);
        let mut order: Vec<usize> = (0..n).collect();
        let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        if k < n {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_by(cmp);
        let mut votes = vec![0f64; classes];
        for &j in &order {
            votes[train_labels[j]] += (row[j] as f64 / temperature).exp();
        }
        let mut best = 0;
        for c in 1..classes {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        best
    }))
}
