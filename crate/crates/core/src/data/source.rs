//! Random-access image collections feeding training and evaluation.

use std::path::PathBuf;

use ndarray::{Array3, Array4, Axis};

use super::image::{load_image, Normalize};
use super::manifest::{Manifest, Split};
use crate::error::Result;
use crate::par::map_range;

/// `[3, H, W]` images in `[0, 1]`, safe to read from several workers.
pub trait ImageSource: Sync {
    fn len(&self) -> usize;
    fn load(&self, i: usize) -> Result<Array3<f32>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoded images held in memory.
#[derive(Debug, Clone)]
pub struct InMemory(pub Vec<Array3<f32>>);

impl ImageSource for InMemory {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn load(&self, i: usize) -> Result<Array3<f32>> {
        Ok(self.0[i].clone())
    }
}

/// Files decoded and resized on every access.
#[derive(Debug, Clone)]
pub struct Files {
    pub paths: Vec<PathBuf>,
    pub size: usize,
}

impl ImageSource for Files {
    fn len(&self) -> usize {
        self.paths.len()
    }
    fn load(&self, i: usize) -> Result<Array3<f32>> {
        load_image(&self.paths[i], self.size)
    }
}

/// One split of a manifest: a file source plus label indices.
pub fn split_source(m: &Manifest, split: Split, size: usize) -> (Files, Vec<usize>) {
    let labels = m.labels();
    let idx = m.indices(split);
    (
        Files {
            paths: idx.iter().map(|&i| m.resolve(&m.entries[i])).collect(),
            size,
        },
        idx.iter().map(|&i| labels[i]).collect(),
    )
}

/// Decodes a whole split into memory when it is small enough to be reused
/// every epoch.
pub fn preload(src: &dyn ImageSource) -> Result<InMemory> {
    Ok(InMemory(map_range(src.len(), |i| src.load(i)).into_iter().collect::<Result<_>>()?))
}

/// Loads `idx`, normalizes, and stacks into `[B, 3, H, W]`.
pub fn batch(src: &dyn ImageSource, idx: &[usize], norm: &Normalize) -> Result<Array4<f32>> {
    let imgs: Vec<Array3<f32>> = map_range(idx.len(), |k| {
        src.load(idx[k]).map(|mut x| {
            norm.apply(&mut x);
            x
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    stack(&imgs)
}

pub fn stack(imgs: &[Array3<f32>]) -> Result<Array4<f32>> {
    let views: Vec<_> = imgs.iter().map(|x| x.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| crate::Error::Shape(format!("cannot stack images: {e}")))
}
