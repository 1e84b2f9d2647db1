//! Normalization kernels: weight standardization, group norm and batch norm.
//!
//! All statistics use the population (biased) variance and are accumulated in
//! `f64`. Tensors are laid out `[batch, channels, height, width]`.

use ndarray::{Array1, Array4, ArrayD, ArrayView4, Ix1, IxDyn};

use super::param::{join, Param, Parameterized, SlotKind, SlotMut};
use crate::error::{Error, Result};
use crate::par;

/// Default epsilon for weight standardization.
pub const WS_EPS: f32 = 1e-10;
/// Default epsilon for group and batch norm.
pub const NORM_EPS: f32 = 1e-5;
/// Default running-statistics momentum (`running = (1 - m) * running + m * batch`).
pub const BN_MOMENTUM: f32 = 0.1;

/// Result of standardizing a kernel, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct WsCache {
    pub standardized: Array4<f32>,
    pub inv_std: Vec<f32>,
}

/// Per output channel: `(k - mean) / sqrt(var + eps)` over the `in * kh * kw` fan-in.
pub fn weight_standardize(kernel: ArrayView4<f32>, eps: f32) -> Result<Array4<f32>> {
    weight_standardize_named(kernel, eps, "kernel").map(|c| c.standardized)
}

pub fn weight_standardize_named(kernel: ArrayView4<f32>, eps: f32, name: &str) -> Result<WsCache> {
    let (out, cin, kh, kw) = kernel.dim();
    let fan_in = cin * kh * kw;
    if out == 0 || fan_in == 0 {
        return Err(Error::Shape(format!(
            "`{name}` has degenerate shape {:?}",
            kernel.shape()
        )));
    }
    if kernel.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            name: name.to_string(),
        });
    }
    let src = kernel.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut standardized = vec![0f32; src.len()];
    let mut inv_std = vec![0f32; out];
    for c in 0..out {
        let row = &src[c * fan_in..(c + 1) * fan_in];
        let (mean, var) = mean_var(row.iter().copied());
        let inv = 1.0 / (var + eps as f64).sqrt();
        inv_std[c] = inv as f32;
        for (d, &v) in standardized[c * fan_in..(c + 1) * fan_in].iter_mut().zip(row) {
            *d = ((v as f64 - mean) * inv) as f32;
        }
    }
    Ok(WsCache {
        standardized: Array4::from_shape_vec((out, cin, kh, kw), standardized).expect("shape"),
        inv_std,
    })
}

/// Gradient of weight standardization with respect to the raw kernel.
pub fn weight_standardize_backward(cache: &WsCache, grad_standardized: &Array4<f32>) -> Array4<f32> {
    let (out, cin, kh, kw) = cache.standardized.dim();
    let fan_in = cin * kh * kw;
    let w_hat = cache.standardized.as_slice().expect("standard layout");
    let g = grad_standardized.as_standard_layout();
    let g = g.as_slice().expect("standard layout");
    let mut dw = vec![0f32; w_hat.len()];
    for c in 0..out {
        let r = c * fan_in..(c + 1) * fan_in;
        normalize_backward(&w_hat[r.clone()], &g[r.clone()], cache.inv_std[c], &mut dw[r]);
    }
    Array4::from_shape_vec((out, cin, kh, kw), dw).expect("shape")
}

/// `dx = inv_std * (g - mean(g) - x_hat * mean(g * x_hat))` over one normalized slice.
fn normalize_backward(x_hat: &[f32], g: &[f32], inv_std: f32, out: &mut [f32]) {
    let n = x_hat.len() as f64;
    let mut sum_g = 0f64;
    let mut sum_gx = 0f64;
    for (&xh, &gv) in x_hat.iter().zip(g) {
        sum_g += gv as f64;
        sum_gx += gv as f64 * xh as f64;
    }
    let mg = sum_g / n;
    let mgx = sum_gx / n;
    for ((o, &xh), &gv) in out.iter_mut().zip(x_hat).zip(g) {
        *o = (inv_std as f64 * (gv as f64 - mg - xh as f64 * mgx)) as f32;
    }
}

fn mean_var(it: impl Iterator<Item = f32> + Clone) -> (f64, f64) {
    let mut n = 0usize;
    let mut s = 0f64;
    for v in it.clone() {
        s += v as f64;
        n += 1;
    }
    let mean = s / n as f64;
    let mut ss = 0f64;
    for v in it {
        let d = v as f64 - mean;
        ss += d * d;
    }
    (mean, ss / n as f64)
}

/// Normalized activations and inverse standard deviations of one norm call.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub x_hat: Array4<f32>,
    pub inv_std: Vec<f32>,
    pub batch_stats: bool,
}

fn check_affine(c: usize, gamma: &[f32], beta: &[f32]) -> Result<()> {
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "affine parameters of length {}/{} for {c} channels",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Group normalization over `(C / groups) * H * W` elements per sample and group.
pub fn group_norm(
    x: ArrayView4<f32>,
    groups: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<Array4<f32>> {
    let (y, _) = group_norm_forward(x, groups, gamma, beta, eps)?;
    Ok(y)
}

pub fn group_norm_forward(
    x: ArrayView4<f32>,
    groups: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<(Array4<f32>, NormCache)> {
    let (b, c, h, w) = x.dim();
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!(
            "{c} channels are not divisible into {groups} groups"
        )));
    }
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    check_affine(c, gamma, beta)?;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let per_sample = c * h * w;
    let group_len = (c / groups) * h * w;
    let hw = h * w;
    let parts = par::map_range(b, |bi| {
        let xs = &xs[bi * per_sample..(bi + 1) * per_sample];
        let mut ys = vec![0f32; per_sample];
        let mut xh = vec![0f32; per_sample];
        let mut invs = Vec::with_capacity(groups);
        for g in 0..groups {
            let r = g * group_len..(g + 1) * group_len;
            let (mean, var) = mean_var(xs[r.clone()].iter().copied());
            let inv = 1.0 / (var + eps as f64).sqrt();
            invs.push(inv as f32);
            for i in r {
                let ch = i / hw;
                let n = ((xs[i] as f64 - mean) * inv) as f32;
                xh[i] = n;
                ys[i] = n * gamma[ch] + beta[ch];
            }
        }
        (ys, xh, invs)
    });
    let mut y = Vec::with_capacity(xs.len());
    let mut x_hat = Vec::with_capacity(xs.len());
    let mut inv = Vec::with_capacity(b * groups);
    for (ys, xh, invs) in parts {
        y.extend(ys);
        x_hat.extend(xh);
        inv.extend(invs);
    }
    let shape = (b, c, h, w);
    Ok((
        Array4::from_shape_vec(shape, y).expect("shape"),
        NormCache {
            x_hat: Array4::from_shape_vec(shape, x_hat).expect("shape"),
            inv_std: inv,
            batch_stats: true,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward(
    cache: &NormCache,
    groups: usize,
    gamma: &[f32],
    dy: &Array4<f32>,
) -> (Array4<f32>, Vec<f32>, Vec<f32>) {
    let (b, c, h, w) = cache.x_hat.dim();
    let hw = h * w;
    let per_sample = c * hw;
    let group_len = (c / groups) * hw;
    let xh = cache.x_hat.as_slice().expect("standard layout");
    let dy = dy.as_standard_layout();
    let dys = dy.as_slice().expect("standard layout");
    let (dgamma, dbeta) = affine_grads(xh, dys, b, c, hw);
    let mut dx = vec![0f32; xh.len()];
    par::for_each_chunk_mut(&mut dx, per_sample, |bi, out| {
        let base = bi * per_sample;
        let mut g = vec![0f32; group_len];
        for gi in 0..groups {
            let off = gi * group_len;
            for (j, gv) in g.iter_mut().enumerate() {
                let i = off + j;
                *gv = dys[base + i] * gamma[i / hw];
            }
            normalize_backward(
                &xh[base + off..base + off + group_len],
                &g,
                cache.inv_std[bi * groups + gi],
                &mut out[off..off + group_len],
            );
        }
    });
    (
        Array4::from_shape_vec((b, c, h, w), dx).expect("shape"),
        dgamma,
        dbeta,
    )
}

fn affine_grads(xh: &[f32], dy: &[f32], b: usize, c: usize, hw: usize) -> (Vec<f32>, Vec<f32>) {
    let sums = par::map_range(c, |ch| {
        let mut sg = 0f64;
        let mut sb = 0f64;
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for i in base..base + hw {
                sg += dy[i] as f64 * xh[i] as f64;
                sb += dy[i] as f64;
            }
        }
        (sg as f32, sb as f32)
    });
    sums.into_iter().unzip()
}

/// Running mean and variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    /// Default initialization: mean 0, variance 1.
    pub fn new(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch normalization. Train mode normalizes with batch statistics and
/// updates `running` by `running = (1 - momentum) * running + momentum * batch`;
/// eval mode uses `running` and leaves it untouched.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm(
    x: ArrayView4<f32>,
    gamma: &[f32],
    beta: &[f32],
    running: &mut RunningStats,
    mode: BnMode,
    momentum: f32,
    eps: f32,
) -> Result<Array4<f32>> {
    batch_norm_forward(x, gamma, beta, running, mode, momentum, eps).map(|(y, _)| y)
}

pub fn batch_norm_forward(
    x: ArrayView4<f32>,
    gamma: &[f32],
    beta: &[f32],
    running: &mut RunningStats,
    mode: BnMode,
    momentum: f32,
    eps: f32,
) -> Result<(Array4<f32>, NormCache)> {
    let (b, c, h, w) = x.dim();
    check_affine(c, gamma, beta)?;
    if running.mean.len() != c || running.var.len() != c {
        return Err(Error::Shape("running statistics do not match channels".into()));
    }
    let hw = h * w;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let (means, inv_std): (Vec<f64>, Vec<f32>) = match mode {
        BnMode::Train => {
            if b * hw < 2 {
                return Err(Error::Shape(format!(
                    "train-mode batch norm needs at least 2 values per channel, got {}",
                    b * hw
                )));
            }
            let stats = par::map_range(c, |ch| {
                mean_var((0..b).flat_map(|bi| {
                    let base = (bi * c + ch) * hw;
                    xs[base..base + hw].iter().copied()
                }))
            });
            let mut inv = Vec::with_capacity(c);
            let mut means = Vec::with_capacity(c);
            for (ch, &(mean, var)) in stats.iter().enumerate() {
                if var + eps as f64 <= 0.0 {
                    return Err(Error::Numerical(format!(
                        "channel {ch} has zero variance and eps = {eps}"
                    )));
                }
                inv.push((1.0 / (var + eps as f64).sqrt()) as f32);
                means.push(mean);
                let m = momentum as f64;
                running.mean[ch] = ((1.0 - m) * running.mean[ch] as f64 + m * mean) as f32;
                running.var[ch] = ((1.0 - m) * running.var[ch] as f64 + m * var) as f32;
            }
            (means, inv)
        }
        BnMode::Eval => {
            let mut inv = Vec::with_capacity(c);
            for ch in 0..c {
                let v = running.var[ch] as f64 + eps as f64;
                if v <= 0.0 {
                    return Err(Error::Numerical(format!(
                        "channel {ch} has non-positive running variance"
                    )));
                }
                inv.push((1.0 / v.sqrt()) as f32);
            }
            (running.mean.iter().map(|&m| m as f64).collect(), inv)
        }
    };
    let mut y = vec![0f32; xs.len()];
    let mut x_hat = vec![0f32; xs.len()];
    let per_sample = c * hw;
    {
        let mut pairs: Vec<(&mut [f32], &mut [f32])> = y
            .chunks_mut(per_sample.max(1))
            .zip(x_hat.chunks_mut(per_sample.max(1)))
            .collect();
        par::for_each_mut(&mut pairs, |bi, (ys, xh)| {
            for ch in 0..c {
                let base = ch * hw;
                let src = &xs[bi * per_sample + base..bi * per_sample + base + hw];
                for (j, &v) in src.iter().enumerate() {
                    let n = ((v as f64 - means[ch]) * inv_std[ch] as f64) as f32;
                    xh[base + j] = n;
                    ys[base + j] = n * gamma[ch] + beta[ch];
                }
            }
        });
    }
    let shape = (b, c, h, w);
    Ok((
        Array4::from_shape_vec(shape, y).expect("shape"),
        NormCache {
            x_hat: Array4::from_shape_vec(shape, x_hat).expect("shape"),
            inv_std,
            batch_stats: mode == BnMode::Train,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(
    cache: &NormCache,
    gamma: &[f32],
    dy: &Array4<f32>,
) -> (Array4<f32>, Vec<f32>, Vec<f32>) {
    let (b, c, h, w) = cache.x_hat.dim();
    let hw = h * w;
    let xh = cache.x_hat.as_slice().expect("standard layout");
    let dy = dy.as_standard_layout();
    let dys = dy.as_slice().expect("standard layout");
    let (dgamma, dbeta) = affine_grads(xh, dys, b, c, hw);
    let n = (b * hw) as f64;
    let mut dx = vec![0f32; xh.len()];
    // Per-channel coefficients: dx = k * (dy - mean(dy) - x_hat * mean(dy * x_hat)).
    let coeffs: Vec<(f64, f64, f64)> = (0..c)
        .map(|ch| {
            let k = gamma[ch] as f64 * cache.inv_std[ch] as f64;
            if cache.batch_stats {
                (k, dbeta[ch] as f64 / n, dgamma[ch] as f64 / n)
            } else {
                (k, 0.0, 0.0)
            }
        })
        .collect();
    par::for_each_chunk_mut(&mut dx, c * hw, |bi, out| {
        for (ch, &(k, mdy, mdyx)) in coeffs.iter().enumerate() {
            let base = ch * hw;
            for j in base..base + hw {
                let i = bi * c * hw + j;
                out[j] = (k * (dys[i] as f64 - mdy - xh[i] as f64 * mdyx)) as f32;
            }
        }
    });
    (
        Array4::from_shape_vec((b, c, h, w), dx).expect("shape"),
        dgamma,
        dbeta,
    )
}

fn vec_of(p: &ArrayD<f32>) -> &[f32] {
    p.as_slice().expect("contiguous 1-d parameter")
}

/// Group norm layer with learnable per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub eps: f32,
    pub gamma: Param,
    pub beta: Param,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize, eps: f32) -> Self {
        Self {
            groups,
            eps,
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
        }
    }
}

/// Batch norm layer. `affine = false` fixes gamma at 1 and beta at 0.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub eps: f32,
    pub momentum: f32,
    pub affine: bool,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: ArrayD<f32>,
    pub running_var: ArrayD<f32>,
}

impl BatchNorm {
    /// Default initialization: gamma 1, beta 0, running mean 0, running variance 1.
    pub fn new(channels: usize, eps: f32, momentum: f32, affine: bool) -> Self {
        Self {
            eps,
            momentum,
            affine,
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::from_elem(IxDyn(&[channels]), 1.0),
        }
    }

    pub fn running_stats(&self) -> RunningStats {
        RunningStats {
            mean: vec_of(&self.running_mean).to_vec(),
            var: vec_of(&self.running_var).to_vec(),
        }
    }
}

/// A normalization site: the backbone swaps between the two kinds.
#[derive(Debug, Clone)]
pub enum Norm {
    Batch(BatchNorm),
    Group(GroupNorm),
}

impl Norm {
    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Result<(Array4<f32>, NormCache)> {
        match self {
            Norm::Group(gn) => group_norm_forward(
                x.view(),
                gn.groups,
                vec_of(&gn.gamma.value),
                vec_of(&gn.beta.value),
                gn.eps,
            ),
            Norm::Batch(bn) => {
                let mut rs = bn.running_stats();
                let mode = if train { BnMode::Train } else { BnMode::Eval };
                let out = batch_norm_forward(
                    x.view(),
                    vec_of(&bn.gamma.value),
                    vec_of(&bn.beta.value),
                    &mut rs,
                    mode,
                    bn.momentum,
                    bn.eps,
                )?;
                if train {
                    bn.running_mean = Array1::from(rs.mean).into_dyn();
                    bn.running_var = Array1::from(rs.var).into_dyn();
                }
                Ok(out)
            }
        }
    }

    /// Read-only evaluation-mode forward.
    pub fn forward_eval(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        match self {
            Norm::Group(gn) => group_norm(
                x.view(),
                gn.groups,
                vec_of(&gn.gamma.value),
                vec_of(&gn.beta.value),
                gn.eps,
            ),
            Norm::Batch(bn) => {
                let mut rs = bn.running_stats();
                batch_norm(
                    x.view(),
                    vec_of(&bn.gamma.value),
                    vec_of(&bn.beta.value),
                    &mut rs,
                    BnMode::Eval,
                    bn.momentum,
                    bn.eps,
                )
            }
        }
    }

    pub fn backward(&mut self, cache: &NormCache, dy: &Array4<f32>) -> Array4<f32> {
        let (dx, dg, db) = match self {
            Norm::Group(gn) => group_norm_backward(cache, gn.groups, vec_of(&gn.gamma.value), dy),
            Norm::Batch(bn) => batch_norm_backward(cache, vec_of(&bn.gamma.value), dy),
        };
        let (gamma, beta, affine) = match self {
            Norm::Group(gn) => (&mut gn.gamma, &mut gn.beta, true),
            Norm::Batch(bn) => (&mut bn.gamma, &mut bn.beta, bn.affine),
        };
        if affine {
            for (g, d) in gamma.grad.iter_mut().zip(dg) {
                *g += d;
            }
            for (g, d) in beta.grad.iter_mut().zip(db) {
                *g += d;
            }
        }
        dx
    }
}

impl Parameterized for Norm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<f32>)) {
        match self {
            Norm::Group(gn) => {
                f(&join(prefix, "gamma"), SlotKind::Param, &gn.gamma.value);
                f(&join(prefix, "beta"), SlotKind::Param, &gn.beta.value);
            }
            Norm::Batch(bn) => {
                if bn.affine {
                    f(&join(prefix, "gamma"), SlotKind::Param, &bn.gamma.value);
                    f(&join(prefix, "beta"), SlotKind::Param, &bn.beta.value);
                }
                f(&join(prefix, "running_mean"), SlotKind::Buffer, &bn.running_mean);
                f(&join(prefix, "running_var"), SlotKind::Buffer, &bn.running_var);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        match self {
            Norm::Group(gn) => {
                f(&join(prefix, "gamma"), SlotMut::Param(&mut gn.gamma));
                f(&join(prefix, "beta"), SlotMut::Param(&mut gn.beta));
            }
            Norm::Batch(bn) => {
                if bn.affine {
                    f(&join(prefix, "gamma"), SlotMut::Param(&mut bn.gamma));
                    f(&join(prefix, "beta"), SlotMut::Param(&mut bn.beta));
                }
                f(&join(prefix, "running_mean"), SlotMut::Buffer(&mut bn.running_mean));
                f(&join(prefix, "running_var"), SlotMut::Buffer(&mut bn.running_var));
            }
        }
    }
}

/// Reshapes a rank-1 parameter view; used by tests and surgery.
pub fn as_vec(a: &ArrayD<f32>) -> Vec<f32> {
    a.clone()
        .into_dimensionality::<Ix1>()
        .map(|v| v.to_vec())
        .unwrap_or_else(|_| a.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(shape, |_| rng.random_range(-2.0f32..2.0))
    }

    #[test]
    fn ws_two_values() {
        let k = Array4::from_shape_vec((1, 2, 1, 1), vec![1.0, 3.0]).unwrap();
        let out = weight_standardize(k.view(), 0.0).unwrap();
        assert_eq!(out.as_slice().unwrap(), &[-1.0, 1.0]);
    }

    #[test]
    fn ws_constant_channel_is_zero() {
        let k = Array4::from_elem((1, 3, 1, 1), 5.0);
        let out = weight_standardize(k.view(), WS_EPS).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ws_fixed_point() {
        let k = Array4::from_shape_vec((1, 4, 1, 1), vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let out = weight_standardize(k.view(), WS_EPS).unwrap();
        for (a, b) in out.iter().zip(k.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ws_rejects_non_finite() {
        let mut k = Array4::zeros((2, 2, 1, 1));
        k[[1, 0, 0, 0]] = f32::NAN;
        let err = weight_standardize_named(k.view(), WS_EPS, "block1.unit1.conv1.weight").unwrap_err();
        assert!(err.to_string().contains("block1.unit1.conv1.weight"));
    }

    #[test]
    fn gn_hand_value() {
        let x = Array4::from_shape_vec((1, 2, 1, 1), vec![2.0, 4.0]).unwrap();
        let y = group_norm(x.view(), 1, &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(y.as_slice().unwrap(), &[-1.0, 1.0]);
    }

    #[test]
    fn gn_group_slices_standardized() {
        let x = random4((3, 8, 4, 4), 1);
        let y = group_norm(x.view(), 4, &[1.0; 8], &[0.0; 8], NORM_EPS).unwrap();
        let ys = y.as_slice().unwrap();
        for s in ys.chunks(2 * 16) {
            let (m, v) = mean_var(s.iter().copied());
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gn_rejects_bad_groups() {
        let x = random4((1, 6, 2, 2), 2);
        assert!(matches!(
            group_norm(x.view(), 4, &[1.0; 6], &[0.0; 6], NORM_EPS),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bn_eval_default_is_identity() {
        let x = random4((2, 3, 2, 2), 3);
        let mut rs = RunningStats::new(3);
        let y = batch_norm(x.view(), &[1.0; 3], &[0.0; 3], &mut rs, BnMode::Eval, 0.1, 0.0).unwrap();
        assert_eq!(y, x);
        assert_eq!(rs, RunningStats::new(3));
    }

    #[test]
    fn bn_running_mean_ema() {
        // Every element equals 2 in channel 0, so the batch mean is exactly 2.
        let x = Array4::from_elem((2, 1, 1, 1), 2.0);
        let mut rs = RunningStats::new(1);
        batch_norm(x.view(), &[1.0], &[0.0], &mut rs, BnMode::Train, 0.1, NORM_EPS).unwrap();
        assert!((rs.mean[0] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn bn_zero_variance_with_zero_eps_fails() {
        let x = Array4::from_elem((2, 1, 1, 1), 2.0);
        let mut rs = RunningStats::new(1);
        let err = batch_norm(x.view(), &[1.0], &[0.0], &mut rs, BnMode::Train, 0.1, 0.0);
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn bn_train_needs_two_values() {
        let x = Array4::from_elem((1, 1, 1, 1), 2.0);
        let mut rs = RunningStats::new(1);
        assert!(batch_norm(x.view(), &[1.0], &[0.0], &mut rs, BnMode::Train, 0.1, 1e-5).is_err());
    }

    fn finite_diff_check(
        f: impl Fn(&Array4<f32>) -> f64,
        x: &Array4<f32>,
        analytic: &Array4<f32>,
        tol: f64,
    ) {
        let h = 1e-2f32;
        for idx in [0usize, 3, 7, x.len() - 1] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h as f64);
            let an = analytic.as_slice().unwrap()[idx] as f64;
            assert!((num - an).abs() < tol * (1.0 + an.abs()), "idx {idx}: {num} vs {an}");
        }
    }

    #[test]
    fn gn_backward_matches_finite_differences() {
        let x = random4((2, 4, 3, 3), 5);
        let probe = random4((2, 4, 3, 3), 6);
        let gamma = [1.5, 0.5, 1.0, 2.0];
        let beta = [0.1, 0.0, -0.2, 0.3];
        let loss = |x: &Array4<f32>| {
            let y = group_norm(x.view(), 2, &gamma, &beta, NORM_EPS).unwrap();
            y.iter().zip(probe.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>()
        };
        let (_, cache) = group_norm_forward(x.view(), 2, &gamma, &beta, NORM_EPS).unwrap();
        let (dx, _, _) = group_norm_backward(&cache, 2, &gamma, &probe);
        finite_diff_check(loss, &x, &dx, 2e-2);
    }

    #[test]
    fn bn_backward_matches_finite_differences() {
        let x = random4((4, 3, 2, 2), 7);
        let probe = random4((4, 3, 2, 2), 8);
        let gamma = [1.5, 0.5, 1.0];
        let beta = [0.1, 0.0, -0.2];
        let loss = |x: &Array4<f32>| {
            let mut rs = RunningStats::new(3);
            let y = batch_norm(x.view(), &gamma, &beta, &mut rs, BnMode::Train, 0.1, NORM_EPS).unwrap();
            y.iter().zip(probe.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>()
        };
        let mut rs = RunningStats::new(3);
        let (_, cache) =
            batch_norm_forward(x.view(), &gamma, &beta, &mut rs, BnMode::Train, 0.1, NORM_EPS).unwrap();
        let (dx, _, _) = batch_norm_backward(&cache, &gamma, &probe);
        finite_diff_check(loss, &x, &dx, 2e-2);
    }

    #[test]
    fn ws_backward_matches_finite_differences() {
        let k = random4((3, 2, 3, 3), 9);
        let probe = random4((3, 2, 3, 3), 10);
        let loss = |k: &Array4<f32>| {
            let y = weight_standardize(k.view(), WS_EPS).unwrap();
            y.iter().zip(probe.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>()
        };
        let cache = weight_standardize_named(k.view(), WS_EPS, "k").unwrap();
        let dk = weight_standardize_backward(&cache, &probe);
        finite_diff_check(loss, &k, &dk, 2e-2);
    }
}
