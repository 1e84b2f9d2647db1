//! Synthetic class-conditional image datasets for fast end-to-end runs.
//!
//! Each class is an oriented sinusoidal grating with its own angle, spatial
//! frequency and tint; every image draws its own phase, jitter and pixel noise.

use std::f32::consts::PI;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{array_to_rgb8, Normalize};
use super::manifest::{Entry, Manifest, Split};
use super::split::{assign_splits, SplitSpec};
use crate::error::{Error, Result};
use crate::par::{derive_seed, map_range};

/// Lesion classes in majority-first order, used by `ham_like`.
pub const HAM_LIKE_CLASSES: [&str; 7] = ["nv", "mel", "bkl", "bcc", "akiec", "vasc", "df"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub classes: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Fractions for the leading classes; the rest share the remainder evenly.
    #[serde(default)]
    pub profile: Vec<f64>,
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default = "d_noise")]
    pub noise: f32,
}

fn d_noise() -> f32 {
    0.08
}

impl SynthSpec {
    pub fn new(n: usize, classes: usize, image_size: usize, seed: u64) -> Self {
        Self {
            n,
            classes,
            image_size,
            seed,
            profile: Vec::new(),
            class_names: Vec::new(),
            noise: d_noise(),
        }
    }

    /// Seven classes with a 67 / 11 / rest-uniform imbalance.
    pub fn ham_like(n: usize, image_size: usize, seed: u64) -> Self {
        Self {
            profile: vec![0.67, 0.11],
            class_names: HAM_LIKE_CLASSES.iter().map(|s| s.to_string()).collect(),
            ..Self::new(n, 7, image_size, seed)
        }
    }

    pub fn names(&self) -> Vec<String> {
        if self.class_names.is_empty() {
            (0..self.classes).map(|k| format!("class{k}")).collect()
        } else {
            self.class_names.clone()
        }
    }

    /// Per-class sample counts: `floor(p n)` for profiled classes, the rest
    /// split evenly with leftovers going to the earliest unprofiled classes.
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let bad = |m: String| Err(Error::Config(format!("synthetic dataset: {m}")));
        if self.classes == 0 || self.n < self.classes {
            return bad(format!("need n >= classes >= 1, got n={} classes={}", self.n, self.classes));
        }
        if self.image_size < 4 {
            return bad("image_size must be at least 4".into());
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.classes {
            return bad(format!("{} class names for {} classes", self.class_names.len(), self.classes));
        }
        if self.profile.len() > self.classes
            || self.profile.iter().any(|p| !(0.0..=1.0).contains(p))
            || self.profile.iter().sum::<f64>() > 1.0 + 1e-9
        {
            return bad(format!("invalid profile {:?}", self.profile));
        }
        let mut counts: Vec<usize> = self
            .profile
            .iter()
            .map(|p| (p * self.n as f64 + 1e-9).floor() as usize)
            .collect();
        let used: usize = counts.iter().sum();
        let rest = self.classes - counts.len();
        let left = self.n - used;
        if rest == 0 {
            counts[0] += left;
        } else {
            for k in 0..rest {
                counts.push(left / rest + usize::from(k < left % rest));
            }
        }
        if counts.contains(&0) {
            return bad(format!("profile leaves a class empty: {counts:?}"));
        }
        Ok(counts)
    }
}

fn render(class: usize, classes: usize, size: usize, noise: f32, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = PI * class as f32 / classes as f32 + rng.random_range(-0.08..0.08);
    let freq = (2 + class % 3) as f32 + rng.random_range(-0.2..0.2);
    let phase = rng.random_range(0.0..2.0 * PI);
    let hue = class as f32 / classes as f32;
    let tint = [
        0.5 + 0.4 * (2.0 * PI * hue).cos(),
        0.5 + 0.4 * (2.0 * PI * (hue + 1.0 / 3.0)).cos(),
        0.5 + 0.4 * (2.0 * PI * (hue + 2.0 / 3.0)).cos(),
    ];
    let gain = rng.random_range(0.8..1.2);
    let normal = Normal::new(0.0, noise.max(1e-12)).expect("valid std");
    let (c, s) = (theta.cos(), theta.sin());
    let mut img = Array3::zeros((3, size, size));
    for i in 0..size {
        for j in 0..size {
            let u = (j as f32 * c + i as f32 * s) / size as f32;
            let wave = 0.5 + 0.5 * (2.0 * PI * freq * u + phase).sin();
            for ch in 0..3 {
                let v = gain * (0.25 + 0.6 * wave * tint[ch]) + normal.sample(&mut rng);
                img[[ch, i, j]] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Writes `images/img_XXXXX.png` plus `manifest.csv` (with sidecar) under
/// `dir`. Normalization statistics come from the pretrain split.
pub fn synth_dataset(dir: &Path, spec: &SynthSpec, split: &SplitSpec) -> Result<Manifest> {
    let counts = spec.class_counts()?;
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0])));
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let images: Vec<Array3<f32>> = map_range(spec.n, |i| {
        render(labels[i], spec.classes, spec.image_size, spec.noise, derive_seed(spec.seed, &[1, i as u64]))
    });
    let written: Vec<Result<()>> = map_range(spec.n, |i| {
        let p = img_dir.join(format!("img_{i:05}.png"));
        array_to_rgb8(images[i].view()).save(&p).map_err(|e| Error::Image { path: p, source: e })
    });
    written.into_iter().collect::<Result<Vec<()>>>()?;

    let tags = assign_splits(&labels, split)?;
    let names = spec.names();
    let entries = (0..spec.n)
        .map(|i| Entry {
            path: format!("images/img_{i:05}.png"),
            label: names[labels[i]].clone(),
            split: tags[i],
        })
        .collect();
    let mut m = Manifest::new(entries, names, dir.to_path_buf())?;
    // Stats from the quantized pixels actually on disk.
    let quantized: Vec<Array3<f32>> = (0..spec.n)
        .filter(|&i| tags[i] == Split::Pretrain)
        .map(|i| images[i].mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0))
        .collect();
    if !quantized.is_empty() {
        m.normalize = Some(Normalize::from_images(quantized.iter().map(|x| x.view()))?);
    }
    m.save(&dir.join("manifest.csv"))?;
    Ok(m)
}
