//! Batched eval-mode feature extraction.

use ndarray::{concatenate, Array2, Axis};

use crate::backbone::Model;
use crate::data::source::batch;
use crate::data::{ImageSource, Normalize};
use crate::error::Result;

pub const EXTRACT_BATCH: usize = 64;

/// Backbone features for every image of `src`, in order.
pub fn extract_features(model: &Model, src: &dyn ImageSource, norm: &Normalize) -> Result<Array2<f32>> {
    extract_with(src, norm, |x| model.features(x))
}

/// Projector outputs `z` for every image of `src`.
pub fn extract_projections(model: &Model, src: &dyn ImageSource, norm: &Normalize) -> Result<Array2<f32>> {
    extract_with(src, norm, |x| model.project_eval(x).map(|r| r.1))
}

/// `(features, z)` in one pass.
pub fn extract_both(model: &Model, src: &dyn ImageSource, norm: &Normalize) -> Result<(Array2<f32>, Array2<f32>)> {
    let mut fs = Vec::new();
    let mut zs = Vec::new();
    for start in (0..src.len()).step_by(EXTRACT_BATCH) {
        let idx: Vec<usize> = (start..(start + EXTRACT_BATCH).min(src.len())).collect();
        let (f, z) = model.project_eval(&batch(src, &idx, norm)?)?;
        fs.push(f);
        zs.push(z);
    }
    Ok((cat(fs), cat(zs)))
}

fn cat(parts: Vec<Array2<f32>>) -> Array2<f32> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).unwrap_or_else(|_| Array2::zeros((0, 0)))
}

fn extract_with(
    src: &dyn ImageSource,
    norm: &Normalize,
    f: impl Fn(&ndarray::Array4<f32>) -> Result<Array2<f32>>,
) -> Result<Array2<f32>> {
    let mut parts = Vec::new();
    for start in (0..src.len()).step_by(EXTRACT_BATCH) {
        let idx: Vec<usize> = (start..(start + EXTRACT_BATCH).min(src.len())).collect();
        parts.push(f(&batch(src, &idx, norm)?)?);
    }
    Ok(cat(parts))
}
