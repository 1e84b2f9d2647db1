//! Ingestion of public datasets into manifests.
//!
//! HAM10000: the metadata CSV's `image_id` column names `<image_id>.jpg`
//! somewhere under the given image directories; `dx` is the diagnosis, one of
//! seven codes. CIFAR-10 binary batches: each record is one label byte followed
//! by 3072 pixel bytes, a 32x32 red plane then green then blue, row-major.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use super::image::{array_to_rgb8, Normalize};
use super::manifest::{Entry, Manifest, Split};
use super::split::{assign_splits, SplitSpec};
use super::synth::HAM_LIKE_CLASSES;
use crate::error::{Error, Result};
use crate::par::map_range;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

fn index_images(dirs: &[PathBuf]) -> Result<HashMap<String, PathBuf>> {
    let mut out = HashMap::new();
    let mut stack: Vec<PathBuf> = dirs.to_vec();
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = e.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("jpg")) {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    out.insert(stem.to_string(), p);
                }
            }
        }
    }
    Ok(out)
}

/// Builds a HAM10000 manifest with absolute image paths.
pub fn ingest_ham10000(metadata: &Path, image_dirs: &[PathBuf], spec: &SplitSpec) -> Result<Manifest> {
    let mut rd = csv::Reader::from_path(metadata)?;
    let headers = rd.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("{}: no `{name}` column", metadata.display())))
    };
    let (ci, cd) = (col("image_id")?, col("dx")?);
    let images = index_images(image_dirs)?;
    let names: Vec<String> = HAM_LIKE_CLASSES.iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let (id, dx) = (&rec[ci], &rec[cd]);
        let label = names
            .iter()
            .position(|n| n == dx)
            .ok_or_else(|| Error::Config(format!("unknown diagnosis `{dx}` for `{id}`")))?;
        match images.get(id) {
            Some(p) => rows.push((p.clone(), label)),
            None => missing.push(id.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Structure(format!(
            "{} metadata rows have no image file (first: {})",
            missing.len(),
            missing[0]
        )));
    }
    let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
    let tags = assign_splits(&labels, spec)?;
    let entries = rows
        .into_iter()
        .zip(tags)
        .map(|((p, l), split)| Entry {
            path: p.display().to_string(),
            label: names[l].clone(),
            split,
        })
        .collect();
    Manifest::new(entries, names, PathBuf::new())
}

/// Decodes one CIFAR-10 binary batch file.
pub fn read_cifar_batch(path: &Path) -> Result<Vec<(usize, Array3<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Integrity(format!(
            "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .map(|r| {
            let label = r[0] as usize;
            if label >= CIFAR10_CLASSES.len() {
                return Err(Error::Integrity(format!("{}: label byte {label}", path.display())));
            }
            let px = &r[1..];
            let img = Array3::from_shape_fn((3, CIFAR_SIDE, CIFAR_SIDE), |(c, i, j)| {
                px[c * CIFAR_SIDE * CIFAR_SIDE + i * CIFAR_SIDE + j] as f32 / 255.0
            });
            Ok((label, img))
        })
        .collect()
}

/// Exports the first `limit` training images (`data_batch_1..5.bin`) as PNGs
/// with a manifest under `out`.
pub fn ingest_cifar10(cifar_dir: &Path, out: &Path, limit: Option<usize>, spec: &SplitSpec) -> Result<Manifest> {
    let mut all = Vec::new();
    for b in 1..=5 {
        let p = cifar_dir.join(format!("data_batch_{b}.bin"));
        all.extend(read_cifar_batch(&p)?);
        if limit.is_some_and(|l| all.len() >= l) {
            break;
        }
    }
    all.truncate(limit.unwrap_or(all.len()));
    let img_dir = out.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    map_range(all.len(), |i| {
        let p = img_dir.join(format!("cifar_{i:05}.png"));
        array_to_rgb8(all[i].1.view()).save(&p).map_err(|e| Error::Image { path: p, source: e })
    })
    .into_iter()
    .collect::<Result<Vec<()>>>()?;
    let labels: Vec<usize> = all.iter().map(|r| r.0).collect();
    let tags = assign_splits(&labels, spec)?;
    let names: Vec<String> = CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect();
    let entries = (0..all.len())
        .map(|i| Entry {
            path: format!("images/cifar_{i:05}.png"),
            label: names[labels[i]].clone(),
            split: tags[i],
        })
        .collect();
    let mut m = Manifest::new(entries, names, out.to_path_buf())?;
    m.normalize = Some(Normalize::from_images(
        (0..all.len()).filter(|&i| tags[i] == Split::Pretrain).map(|i| all[i].1.view()),
    )?);
    m.save(&out.join("manifest.csv"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_record_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![3u8];
        rec.extend((0..3072).map(|k| (k / 1024) as u8 * 100));
        let p = dir.path().join("b.bin");
        std::fs::write(&p, &rec).unwrap();
        let r = read_cifar_batch(&p).unwrap();
        assert_eq!(r[0].0, 3);
        assert_eq!(r[0].1[[0, 5, 5]], 0.0);
        assert!((r[0].1[[2, 31, 0]] - 200.0 / 255.0).abs() < 1e-7);
        std::fs::write(&p, &rec[..100]).unwrap();
        assert!(matches!(read_cifar_batch(&p), Err(Error::Integrity(_))));
    }

    #[test]
    fn ham_metadata_mapping() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = dir.path().join("part_1");
        std::fs::create_dir_all(&imgs).unwrap();
        let mut csv = String::from("lesion_id,image_id,dx,dx_type,age,sex,localization\n");
        for (i, dx) in ["nv", "mel", "df", "nv", "bcc"].iter().enumerate() {
            csv += &format!("L{i},ISIC_{i:07},{dx},histo,50,male,back\n");
            image::RgbImage::new(4, 4).save(imgs.join(format!("ISIC_{i:07}.jpg"))).unwrap();
        }
        let meta = dir.path().join("HAM10000_metadata.csv");
        std::fs::write(&meta, csv).unwrap();
        let spec = SplitSpec {
            pretrain: 1.0,
            finetune: 0.0,
            val: 0.0,
            test: 0.0,
            ..Default::default()
        };
        let m = ingest_ham10000(&meta, &[dir.path().to_path_buf()], &spec).unwrap();
        assert_eq!(m.class_names[0], "nv");
        assert_eq!(m.counts()[0], 2);
        assert_eq!(m.entries[2].label, "df");
    }
}
