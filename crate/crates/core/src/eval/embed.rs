//! Embedding export: feature CSV, t-SNE coordinates and two scatter plots
//! (one class against the rest, and the remaining classes among themselves).

use std::path::{Path, PathBuf};

use ndarray::ArrayView2;

use super::features::extract_features;
use super::tsne::{tsne, TsneConfig};
use crate::backbone::Model;
use crate::data::{ImageSource, Normalize};
use crate::error::{Error, Result};
use crate::viz;

#[derive(Debug, Clone)]
pub struct EmbeddingOutputs {
    pub features_csv: PathBuf,
    pub coords_csv: PathBuf,
    pub binary_png: PathBuf,
    pub subclass_png: PathBuf,
}

/// Writes features and the t-SNE products of precomputed features.
/// `focus` is the class plotted against all others (e.g. nevi).
pub fn write_embeddings(
    feats: ArrayView2<f32>,
    ids: &[String],
    labels: &[usize],
    class_names: &[String],
    focus: usize,
    out_dir: &Path,
    tsne_cfg: &TsneConfig,
) -> Result<EmbeddingOutputs> {
    let n = feats.nrows();
    if ids.len() != n || labels.len() != n {
        return Err(Error::Shape(format!("{n} rows, {} ids, {} labels", ids.len(), labels.len())));
    }
    if focus >= class_names.len() || labels.iter().any(|&l| l >= class_names.len()) {
        return Err(Error::InvalidArgument("label outside class list".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let out = EmbeddingOutputs {
        features_csv: out_dir.join("embeddings.csv"),
        coords_csv: out_dir.join("tsne_coords.csv"),
        binary_png: out_dir.join("tsne_binary.png"),
        subclass_png: out_dir.join("tsne_subclasses.png"),
    };

    let mut w = csv::Writer::from_path(&out.features_csv)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..feats.ncols()).map(|j| format!("feat_{j}")));
    w.write_record(&header)?;
    for i in 0..n {
        let mut rec = vec![ids[i].clone(), class_names[labels[i]].clone()];
        rec.extend(feats.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&out.features_csv, e))?;

    let y = tsne(feats, tsne_cfg)?;
    let mut w = csv::Writer::from_path(&out.coords_csv)?;
    w.write_record(["id", "label", "x", "y"])?;
    for i in 0..n {
        w.write_record([
            ids[i].clone(),
            class_names[labels[i]].clone(),
            y[[i, 0]].to_string(),
            y[[i, 1]].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&out.coords_csv, e))?;

    let pts: Vec<(f64, f64)> = (0..n).map(|i| (y[[i, 0]], y[[i, 1]])).collect();
    let binary: Vec<usize> = labels.iter().map(|&l| usize::from(l != focus)).collect();
    let focus_name = &class_names[focus];
    viz::scatter(
        &out.binary_png,
        &format!("t-SNE: {focus_name} vs rest"),
        &pts,
        &binary,
        &[focus_name.clone(), format!("non-{focus_name}")],
    )?;
    let keep: Vec<usize> = (0..n).filter(|&i| labels[i] != focus).collect();
    viz::scatter(
        &out.subclass_png,
        &format!("t-SNE: non-{focus_name} classes"),
        &keep.iter().map(|&i| pts[i]).collect::<Vec<_>>(),
        &keep.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
        class_names,
    )?;
    Ok(out)
}

/// Extracts frozen features from `src` and writes all embedding outputs.
#[allow(clippy::too_many_arguments)]
pub fn export_embeddings(
    model: &Model,
    src: &dyn ImageSource,
    ids: &[String],
    labels: &[usize],
    class_names: &[String],
    focus: usize,
    norm: &Normalize,
    out_dir: &Path,
    tsne_cfg: &TsneConfig,
) -> Result<EmbeddingOutputs> {
    let f = extract_features(model, src, norm)?;
    write_embeddings(f.view(), ids, labels, class_names, focus, out_dir, tsne_cfg)
}
