//! Representation-collapse statistic.

use ndarray::{ArrayView2, Axis};

use super::knn::l2_normalize_rows;
use crate::error::{Error, Result};

/// Mean over dimensions of the per-dimension (population) standard deviation
/// of the L2-normalized rows. About `1/sqrt(D)` for well spread features, 0
/// when every row points the same way.
pub fn collapse_std(feats: ArrayView2<f32>) -> Result<f64> {
    let (n, d) = feats.dim();
    if n < 2 || d == 0 {
        return Err(Error::Shape(format!("collapse_std needs at least 2 rows, got [{n}, {d}]")));
    }
    let z = l2_normalize_rows(feats, "features")?;
    let mut total = 0.0;
    for col in z.axis_iter(Axis(1)) {
        let mean = col.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = col.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    Ok(total / d as f64)
}
