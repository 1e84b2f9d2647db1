//! 2-D convolution via chunked im2col + gemm, with optional weight
//! standardization applied at forward time.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayView4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::norm::{weight_standardize_backward, weight_standardize_named, WsCache};
use super::param::{join, Param, Parameterized, SlotKind, SlotMut};
use crate::error::{Error, Result};
use crate::par;

/// Samples per im2col/gemm chunk. Fixed so weight-gradient partial sums are
/// reduced in the same order regardless of thread count.
pub const CONV_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }
}

fn round_half(v: &mut [f32]) {
    for x in v {
        *x = half::f16::from_f32(*x).to_f32();
    }
}

/// Fills `cols` (`[cin*kh*kw, nb*P]`, row-major) for samples `b0..b0+nb`.
fn im2col(xs: &[f32], dims: (usize, usize, usize), b0: usize, nb: usize, g: ConvGeom, cols: &mut [f32]) {
    let (cin, h, w) = dims;
    let (ho, wo) = g.out_hw(h, w);
    let p = ho * wo;
    let row_len = nb * p;
    for ci in 0..cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * row_len..(row + 1) * row_len];
                for s in 0..nb {
                    let plane = &xs[((b0 + s) * cin + ci) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let out = &mut dst[s * p + oy * wo..s * p + (oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *o = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `cols` back into `dx` for samples `0..nb` of a chunk.
fn col2im(cols: &[f32], dims: (usize, usize, usize), nb: usize, g: ConvGeom, dx: &mut [f32]) {
    let (cin, h, w) = dims;
    let (ho, wo) = g.out_hw(h, w);
    let p = ho * wo;
    let row_len = nb * p;
    for ci in 0..cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * row_len..(row + 1) * row_len];
                for s in 0..nb {
                    let plane = &mut dx[(s * cin + ci) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                line[ix as usize] += src[s * p + oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Plain convolution `y = conv(x, w)` without bias.
pub fn conv2d(x: ArrayView4<f32>, w: ArrayView4<f32>, stride: usize, pad: usize) -> Result<Array4<f32>> {
    conv2d_impl(x, w, stride, pad, false)
}

fn conv2d_impl(
    x: ArrayView4<f32>,
    w: ArrayView4<f32>,
    stride: usize,
    pad: usize,
    mixed: bool,
) -> Result<Array4<f32>> {
    let (b, cin, h, wd) = x.dim();
    let (cout, wcin, kh, kw) = w.dim();
    if cin != wcin {
        return Err(Error::Shape(format!(
            "input has {cin} channels but kernel expects {wcin}"
        )));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
        return Err(Error::Shape(format!("input {h}x{wd} too small for {kh}x{kw} kernel")));
    }
    let g = ConvGeom { kh, kw, stride, pad };
    let (ho, wo) = g.out_hw(h, wd);
    let p = ho * wo;
    let k = cin * kh * kw;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut wmat = w.as_standard_layout().into_owned().into_shape_with_order((cout, k)).expect("shape");
    if mixed {
        round_half(wmat.as_slice_mut().expect("contiguous"));
    }
    let mut y = vec![0f32; b * cout * p];
    par::for_each_chunk_mut(&mut y, CONV_CHUNK * cout * p, |ci, ychunk| {
        let b0 = ci * CONV_CHUNK;
        let nb = ychunk.len() / (cout * p);
        let mut cols = vec![0f32; k * nb * p];
        im2col(xs, (cin, h, wd), b0, nb, g, &mut cols);
        if mixed {
            round_half(&mut cols);
        }
        let cols = ArrayView2::from_shape((k, nb * p), &cols).expect("shape");
        let mut out = Array2::<f32>::zeros((cout, nb * p));
        general_mat_mul(1.0, &wmat, &cols, 0.0, &mut out);
        for s in 0..nb {
            for co in 0..cout {
                let dst = &mut ychunk[(s * cout + co) * p..(s * cout + co + 1) * p];
                dst.copy_from_slice(&out.row(co).as_slice().expect("row")[s * p..(s + 1) * p]);
            }
        }
    });
    Ok(Array4::from_shape_vec((b, cout, ho, wo), y).expect("shape"))
}

/// Returns `(dx, dw)` for `y = conv(x, w)`; `dx` is skipped when not needed.
pub fn conv2d_backward(
    x: ArrayView4<f32>,
    w: ArrayView4<f32>,
    dy: ArrayView4<f32>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Array4<f32>>, Array4<f32>) {
    let (b, cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let g = ConvGeom { kh, kw, stride, pad };
    let (ho, wo) = g.out_hw(h, wd);
    let p = ho * wo;
    let k = cin * kh * kw;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let dy = dy.as_standard_layout();
    let dys = dy.as_slice().expect("standard layout");
    let wmat = w.as_standard_layout().into_owned().into_shape_with_order((cout, k)).expect("shape");
    let n_chunks = b.div_ceil(CONV_CHUNK);
    let parts = par::map_range(n_chunks, |ci| {
        let b0 = ci * CONV_CHUNK;
        let nb = CONV_CHUNK.min(b - b0);
        let mut cols = vec![0f32; k * nb * p];
        im2col(xs, (cin, h, wd), b0, nb, g, &mut cols);
        let cols = Array2::from_shape_vec((k, nb * p), cols).expect("shape");
        let mut dout = Array2::<f32>::zeros((cout, nb * p));
        for s in 0..nb {
            for co in 0..cout {
                let src = &dys[((b0 + s) * cout + co) * p..((b0 + s) * cout + co + 1) * p];
                dout.row_mut(co).as_slice_mut().expect("row")[s * p..(s + 1) * p].copy_from_slice(src);
            }
        }
        let mut dw = Array2::<f32>::zeros((cout, k));
        general_mat_mul(1.0, &dout, &cols.t(), 0.0, &mut dw);
        let dx = need_dx.then(|| {
            let mut dcols = Array2::<f32>::zeros((k, nb * p));
            general_mat_mul(1.0, &wmat.t(), &dout, 0.0, &mut dcols);
            let mut dx = vec![0f32; nb * cin * h * wd];
            col2im(dcols.as_slice().expect("contiguous"), (cin, h, wd), nb, g, &mut dx);
            dx
        });
        (dw, dx)
    });
    let mut dw = Array2::<f32>::zeros((cout, k));
    let mut dx_all = need_dx.then(|| Vec::with_capacity(b * cin * h * wd));
    for (part, dx) in parts {
        dw += &part;
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend(dx);
        }
    }
    (
        dx_all.map(|v| Array4::from_shape_vec((b, cin, h, wd), v).expect("shape")),
        dw.into_shape_with_order((cout, cin, kh, kw)).expect("shape"),
    )
}

/// Convolution layer. `ws_eps = Some(eps)` standardizes the kernel on every forward.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub stride: usize,
    pub pad: usize,
    pub ws_eps: Option<f32>,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    pub w_eff: Array4<f32>,
    pub ws: Option<WsCache>,
}

impl Conv2d {
    /// Kaiming-normal (fan-out, ReLU gain) initialization.
    pub fn new<R: Rng>(
        cout: usize,
        cin: usize,
        k: usize,
        stride: usize,
        pad: usize,
        ws_eps: Option<f32>,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (cout * k * k) as f64).sqrt() as f32;
        let dist = Normal::new(0.0, std).expect("valid std");
        let w = Array4::from_shape_simple_fn((cout, cin, k, k), || dist.sample(rng));
        Self {
            weight: Param::new(w.into_dyn()),
            stride,
            pad,
            ws_eps,
        }
    }

    pub fn kernel(&self) -> ArrayView4<'_, f32> {
        self.weight.value.view().into_dimensionality().expect("4-d kernel")
    }

    fn effective(&self, name: &str) -> Result<(Array4<f32>, Option<WsCache>)> {
        match self.ws_eps {
            Some(eps) => {
                let c = weight_standardize_named(self.kernel(), eps, name)?;
                Ok((c.standardized.clone(), Some(c)))
            }
            None => Ok((self.kernel().to_owned(), None)),
        }
    }

    pub fn forward(&self, x: &Array4<f32>, mixed: bool) -> Result<(Array4<f32>, ConvCache)> {
        let (w_eff, ws) = self.effective("conv.weight")?;
        let y = conv2d_impl(x.view(), w_eff.view(), self.stride, self.pad, mixed)?;
        Ok((y, ConvCache { w_eff, ws }))
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        let (w_eff, _) = self.effective("conv.weight")?;
        conv2d(x.view(), w_eff.view(), self.stride, self.pad)
    }

    /// Accumulates the kernel gradient and returns the input gradient if requested.
    pub fn backward(
        &mut self,
        x: &Array4<f32>,
        cache: &ConvCache,
        dy: &Array4<f32>,
        need_dx: bool,
    ) -> Option<Array4<f32>> {
        let (dx, dw_eff) = conv2d_backward(x.view(), cache.w_eff.view(), dy.view(), self.stride, self.pad, need_dx);
        let dw = match &cache.ws {
            Some(ws) => weight_standardize_backward(ws, &dw_eff),
            None => dw_eff,
        };
        self.weight.grad += &dw.into_dyn();
        dx
    }
}

impl Parameterized for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<f32>)) {
        f(&join(prefix, "weight"), SlotKind::Param, &self.weight.value);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        f(&join(prefix, "weight"), SlotMut::Param(&mut self.weight));
    }
}
