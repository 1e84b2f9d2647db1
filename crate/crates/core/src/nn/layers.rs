use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::Rng;

use super::param::{join, Param, Parameterized, SlotKind, SlotMut};
use crate::error::{Error, Result};

/// Fully connected layer, `y = x W^T + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) initialization for weight and bias.
    pub fn new<R: Rng>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f32).sqrt();
        let w = Array2::from_shape_simple_fn((output, input), || rng.random_range(-bound..bound));
        let b = bias.then(|| {
            Param::new(
                ndarray::Array1::from_shape_simple_fn(output, || rng.random_range(-bound..bound)).into_dyn(),
            )
        });
        Self {
            weight: Param::new(w.into_dyn()),
            bias: b,
        }
    }

    pub fn weight(&self) -> ndarray::ArrayView2<'_, f32> {
        self.weight.value.view().into_dimensionality().expect("2-d weight")
    }

    pub fn forward(&self, x: &Array2<f32>, mixed: bool) -> Result<Array2<f32>> {
        let w = self.weight();
        if x.ncols() != w.ncols() {
            return Err(Error::Shape(format!(
                "linear layer expects {} inputs, got {}",
                w.ncols(),
                x.ncols()
            )));
        }
        let mut y = if mixed {
            let xr = x.mapv(|v| half::f16::from_f32(v).to_f32());
            let wr = w.mapv(|v| half::f16::from_f32(v).to_f32());
            xr.dot(&wr.t())
        } else {
            x.dot(&w.t())
        };
        if let Some(b) = &self.bias {
            let b = b.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
            y += &b;
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
        let dw = dy.t().dot(x);
        self.weight.grad += &dw.into_dyn();
        if let Some(b) = &mut self.bias {
            b.grad += &dy.sum_axis(Axis(0)).into_dyn();
        }
        dy.dot(&self.weight())
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<f32>)) {
        f(&join(prefix, "weight"), SlotKind::Param, &self.weight.value);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), SlotKind::Param, &b.value);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        f(&join(prefix, "weight"), SlotMut::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), SlotMut::Param(b));
        }
    }
}

pub fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f32, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Masks `dy` where the ReLU output was not positive.
pub fn relu_backward<D: ndarray::Dimension>(out: &ndarray::Array<f32, D>, dy: &mut ndarray::Array<f32, D>) {
    ndarray::Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

/// 3x3 stride-2 max pool with padding 1; returns argmax positions for backward.
pub fn max_pool_3x3s2(x: &Array4<f32>) -> (Array4<f32>, Vec<u32>) {
    let (b, c, h, w) = x.dim();
    let ho = (h + 2 - 3) / 2 + 1;
    let wo = (w + 2 - 3) / 2 + 1;
    let mut y = Array4::<f32>::zeros((b, c, ho, wo));
    let mut arg = vec![0u32; b * c * ho * wo];
    let mut n = 0;
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), bi);
            let plane = plane.index_axis(Axis(0), ci);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0u32;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                continue;
                            }
                            let v = plane[[iy as usize, ix as usize]];
                            if v > best {
                                best = v;
                                best_i = (iy as usize * w + ix as usize) as u32;
                            }
                        }
                    }
                    y[[bi, ci, oy, ox]] = best;
                    arg[n] = best_i;
                    n += 1;
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool_backward(input_shape: (usize, usize, usize, usize), arg: &[u32], dy: &Array4<f32>) -> Array4<f32> {
    let (b, c, h, w) = input_shape;
    let mut dx = Array4::<f32>::zeros(input_shape);
    let per = dy.dim().2 * dy.dim().3;
    let dys = dy.as_standard_layout();
    let dys = dys.as_slice().expect("standard layout");
    let dxs = dx.as_slice_mut().expect("standard layout");
    for plane in 0..b * c {
        for j in 0..per {
            let n = plane * per + j;
            dxs[plane * h * w + arg[n] as usize] += dys[n];
        }
    }
    dx
}

pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (b, c, h, w) = x.dim();
    let hw = (h * w) as f32;
    let mut out = Array2::<f32>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            out[[bi, ci]] = x.index_axis(Axis(0), bi).index_axis(Axis(0), ci).sum() / hw;
        }
    }
    out
}

pub fn global_avg_pool_backward(shape: (usize, usize, usize, usize), dy: &Array2<f32>) -> Array4<f32> {
    let (_, _, h, w) = shape;
    let hw = (h * w) as f32;
    Array4::from_shape_fn(shape, |(b, c, _, _)| dy[[b, c]] / hw)
}
