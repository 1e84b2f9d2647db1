//! Paired view augmentation on `[3, H, W]` images with values in `[0, 1]`.

use ndarray::{Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::derive_seed;

/// Named augmentation recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugPolicy {
    /// 224x224 natural images: crop, flip, jitter, grayscale, blur.
    Natural224,
    /// 32x32 small images: as `Natural224` without blur.
    Cifar32,
    /// Resize only; both views equal the resized source.
    Identity,
}

/// Fully resolved augmentation parameters; stored with run outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugConfig {
    pub policy: AugPolicy,
    pub size: usize,
    pub crop_scale: (f32, f32),
    pub crop_ratio: (f32, f32),
    pub flip_p: f32,
    /// Brightness, contrast, saturation, hue.
    pub jitter: (f32, f32, f32, f32),
    pub jitter_p: f32,
    pub gray_p: f32,
    pub blur_p: f32,
    pub blur_sigma: (f32, f32),
}

impl AugConfig {
    pub fn for_policy(policy: AugPolicy, size: Option<usize>) -> Self {
        let base = Self {
            policy,
            size: 224,
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter: (0.4, 0.4, 0.4, 0.1),
            jitter_p: 0.8,
            gray_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
        };
        let cfg = match policy {
            AugPolicy::Natural224 => base,
            AugPolicy::Cifar32 => Self {
                size: 32,
                blur_p: 0.0,
                ..base
            },
            AugPolicy::Identity => Self {
                size: 224,
                crop_scale: (1.0, 1.0),
                crop_ratio: (1.0, 1.0),
                flip_p: 0.0,
                jitter_p: 0.0,
                gray_p: 0.0,
                blur_p: 0.0,
                ..base
            },
        };
        match size {
            Some(s) => Self { size: s, ..cfg },
            None => cfg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f32| (0.0..=1.0).contains(&p);
        let (s0, s1) = self.crop_scale;
        let (r0, r1) = self.crop_ratio;
        if self.size == 0
            || !(0.0 < s0 && s0 <= s1 && s1 <= 1.0)
            || !(0.0 < r0 && r0 <= r1)
            || ![self.flip_p, self.jitter_p, self.gray_p, self.blur_p].into_iter().all(p_ok)
            || self.jitter.3 > 0.5
            || !(0.0 < self.blur_sigma.0 && self.blur_sigma.0 <= self.blur_sigma.1)
        {
            return Err(Error::Config(format!("invalid augmentation parameters: {self:?}")));
        }
        Ok(())
    }
}

/// Two views of one source image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view1: Array3<f32>,
    pub view2: Array3<f32>,
    pub source_id: usize,
    pub seed: u64,
}

/// Samples both views from independent streams derived from `seed`.
pub fn augment_pair(image: ArrayView3<f32>, cfg: &AugConfig, source_id: usize, seed: u64) -> ViewPair {
    ViewPair {
        view1: augment(image, cfg, derive_seed(seed, &[1])),
        view2: augment(image, cfg, derive_seed(seed, &[2])),
        source_id,
        seed,
    }
}

/// One augmented view at `cfg.size`.
pub fn augment(image: ArrayView3<f32>, cfg: &AugConfig, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, h, w) = image.dim();
    let (top, left, ch, cw) = sample_crop(h, w, cfg, &mut rng);
    let mut v = resize_region(image, top, left, ch, cw, cfg.size, cfg.size);
    if rng.random::<f32>() < cfg.flip_p {
        v.invert_axis(ndarray::Axis(2));
        v = v.as_standard_layout().into_owned();
    }
    if rng.random::<f32>() < cfg.jitter_p {
        color_jitter(&mut v, cfg.jitter, &mut rng);
    }
    if rng.random::<f32>() < cfg.gray_p {
        grayscale(&mut v);
    }
    if rng.random::<f32>() < cfg.blur_p {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        v = gaussian_blur(&v, sigma);
    }
    v
}

/// Random-resized-crop box `(top, left, height, width)` in source pixels
/// (fractional), falling back to a centered crop after ten rejections.
fn sample_crop(h: usize, w: usize, cfg: &AugConfig, rng: &mut impl Rng) -> (f32, f32, f32, f32) {
    let (hf, wf) = (h as f32, w as f32);
    let area = hf * wf;
    let (s0, s1) = cfg.crop_scale;
    let (lr0, lr1) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    if s0 < 1.0 || lr0 < lr1 {
        for _ in 0..10 {
            let target = area * rng.random_range(s0..=s1);
            let ratio = rng.random_range(lr0..=lr1).exp();
            let cw = (target * ratio).sqrt();
            let ch = (target / ratio).sqrt();
            if cw <= wf && ch <= hf {
                let top = rng.random_range(0.0..=(hf - ch));
                let left = rng.random_range(0.0..=(wf - cw));
                return (top, left, ch, cw);
            }
        }
    }
    let in_ratio = wf / hf;
    let (ch, cw) = if in_ratio < cfg.crop_ratio.0 {
        (wf / cfg.crop_ratio.0, wf)
    } else if in_ratio > cfg.crop_ratio.1 {
        (hf, hf * cfg.crop_ratio.1)
    } else {
        (hf, wf)
    };
    ((hf - ch) / 2.0, (wf - cw) / 2.0, ch, cw)
}

/// Bilinear resampling of a source region onto an `oh x ow` grid (pixel
/// centers aligned, edges clamped).
pub fn resize_region(
    img: ArrayView3<f32>,
    top: f32,
    left: f32,
    ch: f32,
    cw: f32,
    oh: usize,
    ow: usize,
) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let sy = ch / oh as f32;
    let sx = cw / ow as f32;
    let taps = |o: usize, scale: f32, origin: f32, n: usize| {
        let src = (origin + (o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f32);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f32)
    };
    let ys: Vec<_> = (0..oh).map(|o| taps(o, sy, top, h)).collect();
    let xs: Vec<_> = (0..ow).map(|o| taps(o, sx, left, w)).collect();
    Array3::from_shape_fn((c, oh, ow), |(k, i, j)| {
        let (y0, y1, fy) = ys[i];
        let (x0, x1, fx) = xs[j];
        let a = img[[k, y0, x0]] * (1.0 - fx) + img[[k, y0, x1]] * fx;
        let b = img[[k, y1, x0]] * (1.0 - fx) + img[[k, y1, x1]] * fx;
        a * (1.0 - fy) + b * fy
    })
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn luma(v: &Array3<f32>) -> Vec<f32> {
    let (_, h, w) = v.dim();
    let mut out = vec![0f32; h * w];
    for (k, &wk) in LUMA.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(v.index_axis(ndarray::Axis(0), k).iter()) {
            *o += wk * x;
        }
    }
    out
}

fn blend_with(v: &mut Array3<f32>, other: &[f32], factor: f32) {
    for mut plane in v.outer_iter_mut() {
        for (x, &o) in plane.iter_mut().zip(other) {
            *x = (factor * *x + (1.0 - factor) * o).clamp(0.0, 1.0);
        }
    }
}

fn grayscale(v: &mut Array3<f32>) {
    let g = luma(v);
    blend_with(v, &g, 0.0);
}

/// Brightness, contrast, saturation and hue in a random order.
fn color_jitter(v: &mut Array3<f32>, (b, c, s, h): (f32, f32, f32, f32), rng: &mut impl Rng) {
    let factor = |rng: &mut dyn rand::RngCore, m: f32| rng.random_range((1.0 - m).max(0.0)..=1.0 + m);
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    for op in order {
        match op {
            0 if b > 0.0 => {
                let f = factor(rng, b);
                v.mapv_inplace(|x| (x * f).clamp(0.0, 1.0));
            }
            1 if c > 0.0 => {
                let f = factor(rng, c);
                let g = luma(v);
                let mean = g.iter().map(|&x| x as f64).sum::<f64>() / g.len() as f64;
                blend_with(v, &vec![mean as f32; g.len()], f);
            }
            2 if s > 0.0 => {
                let f = factor(rng, s);
                let g = luma(v);
                blend_with(v, &g, f);
            }
            3 if h > 0.0 => {
                let shift = rng.random_range(-h..=h);
                hue_shift(v, shift);
            }
            _ => {}
        }
    }
}

fn hue_shift(v: &mut Array3<f32>, shift: f32) {
    let (_, hh, ww) = v.dim();
    for i in 0..hh {
        for j in 0..ww {
            let (r, g, b) = (v[[0, i, j]], v[[1, i, j]], v[[2, i, j]]);
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            let d = max - min;
            if d <= 0.0 {
                continue;
            }
            let mut hue = if max == r {
                ((g - b) / d).rem_euclid(6.0)
            } else if max == g {
                (b - r) / d + 2.0
            } else {
                (r - g) / d + 4.0
            } / 6.0;
            hue = (hue + shift).rem_euclid(1.0);
            let s = d / max;
            let (r, g, b) = hsv_to_rgb(hue, s, max);
            v[[0, i, j]] = r;
            v[[1, i, j]] = g;
            v[[2, i, j]] = b;
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Separable Gaussian blur, kernel radius `ceil(3 sigma)`, reflected borders.
pub fn gaussian_blur(v: &Array3<f32>, sigma: f32) -> Array3<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= sum);
    let (c, h, w) = v.dim();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - m }) as usize
    };
    let mut tmp = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                tmp[[ch, i, j]] = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * v[[ch, i, reflect(j as isize + t as isize - r, w)]])
                    .sum();
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[[ch, i, j]] = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * tmp[[ch, reflect(i as isize + t as isize - r, h), j]])
                    .sum();
            }
        }
    }
    out
}
