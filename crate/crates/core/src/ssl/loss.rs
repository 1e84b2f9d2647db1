//! Symmetric negative-cosine SimSiam loss with stop-gradient on the targets.
//!
//! `L = 0.5 D(p1, sg(z2)) + 0.5 D(p2, sg(z1))`, `D(a, b) = -mean_i cos(a_i, b_i)`.
//! Gradients are returned only for the predictions; the targets are constants,
//! so nothing flows back along the `z` path of either term.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};

fn check(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("loss inputs {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(Error::Shape("loss on an empty batch".into()));
    }
    Ok(())
}

fn norm_row(r: ndarray::ArrayView1<f64>, what: &str, i: usize) -> Result<f64> {
    let n = r.dot(&r).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Numerical(format!("row {i} of {what} has norm {n}; cosine undefined")));
    }
    Ok(n)
}

/// `D(p, sg(z))` and its gradient with respect to `p`.
pub fn neg_cosine(p: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    check(&p, &z)?;
    let b = p.nrows() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(p.dim());
    for (i, ((pr, zr), mut g)) in p.rows().into_iter().zip(z.rows()).zip(grad.rows_mut()).enumerate() {
        let np = norm_row(pr, "p", i)?;
        let nz = norm_row(zr, "z", i)?;
        let cos = pr.dot(&zr) / (np * nz);
        total += cos;
        // d cos / d p = z/(|p||z|) - cos p/|p|^2
        Zip::from(&mut g).and(pr).and(zr).for_each(|g, &pv, &zv| {
            *g = -(zv / (np * nz) - cos * pv / (np * np)) / b;
        });
    }
    Ok((-total / b, grad))
}

/// Loss value and gradients `(dp1, dp2)`.
pub fn simsiam_loss_grad(
    p1: ArrayView2<f64>,
    p2: ArrayView2<f64>,
    z1: ArrayView2<f64>,
    z2: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (a, ga) = neg_cosine(p1, z2)?;
    let (b, gb) = neg_cosine(p2, z1)?;
    Ok((0.5 * a + 0.5 * b, ga * 0.5, gb * 0.5))
}

pub fn simsiam_loss(p1: ArrayView2<f64>, p2: ArrayView2<f64>, z1: ArrayView2<f64>, z2: ArrayView2<f64>) -> Result<f64> {
    simsiam_loss_grad(p1, p2, z1, z2).map(|r| r.0)
}

/// `f32` activations in, `f32` gradients out; accumulation in `f64`.
pub fn simsiam_loss_f32(
    p1: &Array2<f32>,
    p2: &Array2<f32>,
    z1: &Array2<f32>,
    z2: &Array2<f32>,
) -> Result<(f64, Array2<f32>, Array2<f32>)> {
    let up = |a: &Array2<f32>| a.mapv(f64::from);
    let (l, g1, g2) = simsiam_loss_grad(up(p1).view(), up(p2).view(), up(z1).view(), up(z2).view())?;
    Ok((l, g1.mapv(|v| v as f32), g2.mapv(|v| v as f32)))
}
