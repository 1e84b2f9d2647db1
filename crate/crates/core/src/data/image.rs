//! Image decoding, bilinear resizing and per-channel normalization.
//!
//! Tensors are `[3, H, W]`, RGB, `f32` in `[0, 1]` before normalization.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::{Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel `(x - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalize {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalize {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn apply(&self, x: &mut Array3<f32>) {
        for (c, mut plane) in x.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
    }

    /// Dataset statistics over the given images (population std).
    pub fn from_images<'a>(images: impl IntoIterator<Item = ArrayView3<'a, f32>>) -> Result<Self> {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut n = 0f64;
        for img in images {
            for (c, plane) in img.axis_iter(Axis(0)).enumerate() {
                for &v in plane {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            n += (img.len() / 3) as f64;
        }
        if n == 0.0 {
            return Err(Error::InvalidArgument("no pixels to compute statistics from".into()));
        }
        let mut out = Self::identity();
        for c in 0..3 {
            let m = sum[c] / n;
            let var = (sq[c] / n - m * m).max(0.0);
            out.mean[c] = m as f32;
            out.std[c] = var.sqrt().max(1e-6) as f32;
        }
        Ok(out)
    }
}

/// Decodes `path` and resizes to `size x size` (bilinear), values in `[0, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let rgb = img.to_rgb32f();
    let resized = if rgb.width() as usize == size && rgb.height() as usize == size {
        rgb
    } else {
        image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
    };
    Ok(rgb_to_array(&resized))
}

pub fn rgb_to_array(img: &image::Rgb32FImage) -> Array3<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Array3::from_shape_fn((3, h, w), |(c, i, j)| img.get_pixel(j as u32, i as u32)[c].clamp(0.0, 1.0))
}

/// Quantizes a `[3, H, W]` tensor in `[0, 1]` to 8-bit RGB.
pub fn array_to_rgb8(x: ArrayView3<f32>) -> image::RgbImage {
    let (_, h, w) = x.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |j, i| {
        let px = |c: usize| (x[[c, i as usize, j as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_solid(dir: &Path, w: u32, h: u32) -> std::path::PathBuf {
        let p = dir.join("solid.png");
        image::RgbImage::from_pixel(w, h, image::Rgb([200, 40, 10])).save(&p).unwrap();
        p
    }

    #[test]
    fn resize_targets() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_solid(dir.path(), 50, 30);
        assert_eq!(load_image(&p, 224).unwrap().dim(), (3, 224, 224));
        assert_eq!(load_image(&p, 32).unwrap().dim(), (3, 32, 32));
    }

    #[test]
    fn solid_image_gives_constant_channels() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_solid(dir.path(), 17, 23);
        let mut x = load_image(&p, 32).unwrap();
        let n = Normalize {
            mean: [0.5, 0.4, 0.3],
            std: [0.2, 0.25, 0.3],
        };
        n.apply(&mut x);
        for (c, want) in [(200.0 / 255.0 - 0.5) / 0.2, (40.0 / 255.0 - 0.4) / 0.25, (10.0 / 255.0 - 0.3) / 0.3]
            .iter()
            .enumerate()
        {
            assert!(x.index_axis(Axis(0), c).iter().all(|v| (v - *want as f32).abs() < 1e-5));
        }
    }

    #[test]
    fn undecodable_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(matches!(load_image(&p, 8), Err(Error::Image { .. })));
    }

    #[test]
    fn stats_of_two_values() {
        let a = Array3::from_elem((3, 1, 1), 0.0f32);
        let b = Array3::from_elem((3, 1, 1), 1.0f32);
        let n = Normalize::from_images([a.view(), b.view()]).unwrap();
        assert!((n.mean[0] - 0.5).abs() < 1e-7 && (n.std[2] - 0.5).abs() < 1e-7);
    }
}
