//! Group-norm to batch-norm checkpoint surgery and its verifier.
//!
//! Convolution kernels are reused (copied bytewise, or baked through weight
//! standardization on request). Group-norm affine parameters are discarded and
//! every normalization site gets a default-initialized batch norm:
//! gamma 1, beta 0, running mean 0, running variance 1. In eval mode that is
//! the identity map, so the converted network starts as "conv stack only".

use std::collections::{BTreeSet, HashMap};

use ndarray::Ix4;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Tensor};
use crate::backbone::{backbone_inventory, conv_sites, norm_sites, BackboneConfig, NormKind, StemKind, TensorRole};
use crate::error::{Error, Result};
use crate::nn::norm::weight_standardize_named;

pub const SURGERY_TAG: &str = "gn_to_bn";
const STEM: &str = "stem.conv.weight";
const WS_TOL: f32 = 1e-6;

/// Meta key holding the target backbone config as JSON.
pub const META_BACKBONE: &str = "backbone_config";

fn ws_bake(t: &Tensor, name: &str, eps: f32) -> Result<Tensor> {
    let k = t
        .to_f32()?
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::Shape(format!("`{name}` is not a 4-D kernel")))?;
    let c = weight_standardize_named(k.view(), eps, name)?;
    Ok(Tensor::from_f32(k.shape(), c.standardized.iter().copied()))
}

fn is_gn_param(name: &str, sites: &BTreeSet<String>) -> bool {
    name.rsplit_once('.')
        .is_some_and(|(site, leaf)| sites.contains(site) && (leaf == "gamma" || leaf == "beta"))
}

fn is_source_head(name: &str) -> bool {
    name.starts_with("head.")
}

/// Whether a cifar-stem target should re-initialize a stem of another shape.
fn stem_reinit(cfg: &BackboneConfig, src: &Checkpoint, want: &[usize]) -> bool {
    cfg.stem == StemKind::Cifar && src.get(STEM).is_some_and(|t| t.shape != want)
}

/// Rewrites a GN+WS checkpoint into the batch-norm layout of `cfg`.
///
/// With a cifar stem the source's 7x7 stem kernel cannot be reused; it is
/// dropped and recorded as `stem_reinit = true` so the loader keeps the fresh
/// stem.
pub fn convert_gn_to_bn(src: &Checkpoint, cfg: &BackboneConfig, bake_ws: bool) -> Result<Checkpoint> {
    if src.meta.contains_key("surgery") {
        return Err(Error::Structure(format!(
            "checkpoint already went through surgery `{}`; refusing to convert twice",
            src.meta["surgery"]
        )));
    }
    let cfg = cfg.with_norm(NormKind::BatchNorm);
    let convs = conv_sites(&cfg)?;
    let norms = norm_sites(&cfg)?;
    let site_set: BTreeSet<String> = norms.iter().map(|(s, _)| s.clone()).collect();

    let has_running = norms
        .iter()
        .any(|(s, _)| src.contains(&format!("{s}.running_mean")) || src.contains(&format!("{s}.running_var")));
    if has_running || src.meta.get("norm_kind").map(String::as_str) == Some(NormKind::BatchNorm.as_str()) {
        return Err(Error::Structure(
            "source already has batch-norm layout; refusing to convert twice".into(),
        ));
    }

    let mut missing = Vec::new();
    let mut shape_errors = Vec::new();
    let mut out = Checkpoint::new();
    let mut reinit = false;
    let mut conv_names = BTreeSet::new();
    for (name, shape) in &convs {
        conv_names.insert(name.as_str());
        if name == STEM && stem_reinit(&cfg, src, shape) {
            reinit = true;
            continue;
        }
        let Some(t) = src.get(name) else {
            missing.push(name.clone());
            continue;
        };
        if &t.shape != shape {
            shape_errors.push(format!("`{name}`: source {:?} vs target {:?}", t.shape, shape));
            continue;
        }
        let t = if bake_ws { ws_bake(t, name, cfg.ws_eps)? } else { t.clone() };
        out.insert(name.clone(), t);
    }
    for (site, c) in &norms {
        for leaf in ["gamma", "beta"] {
            let n = format!("{site}.{leaf}");
            match src.get(&n) {
                None => missing.push(n),
                Some(t) if t.shape != [*c] => {
                    shape_errors.push(format!("`{n}`: source {:?} vs target {:?}", t.shape, [c]))
                }
                Some(_) => {}
            }
        }
    }
    if !shape_errors.is_empty() {
        return Err(Error::Shape(shape_errors.join("; ")));
    }
    if !missing.is_empty() {
        return Err(Error::Structure(format!(
            "source lacks tensors required by the target: {}",
            missing.join(", ")
        )));
    }
    let extras: Vec<&str> = src
        .names()
        .filter(|n| !conv_names.contains(n) && !is_gn_param(n, &site_set) && !is_source_head(n))
        .collect();
    if !extras.is_empty() {
        return Err(Error::Structure(format!(
            "source has tensors with no place in the target: {}",
            extras.join(", ")
        )));
    }

    let mut ordered = Checkpoint::new();
    for spec in backbone_inventory(&cfg)? {
        if spec.role == TensorRole::ConvWeight {
            if let Some(t) = out.remove(&spec.name) {
                ordered.insert(spec.name, t);
            }
            continue;
        }
        let fill = if spec.name.ends_with(".gamma") || spec.name.ends_with(".running_var") { 1.0 } else { 0.0 };
        let c = spec.shape[0];
        ordered.insert(spec.name, Tensor::from_f32(&[c], std::iter::repeat_n(fill, c)));
    }

    ordered.meta = src.meta.clone();
    ordered.meta.insert("surgery".into(), SURGERY_TAG.into());
    ordered.meta.insert("bake_ws".into(), bake_ws.to_string());
    ordered.meta.insert("stem_reinit".into(), reinit.to_string());
    ordered.meta.insert("norm_kind".into(), NormKind::BatchNorm.as_str().into());
    ordered.meta.insert("depth".into(), cfg.depth.to_string());
    ordered.meta.insert("width_mult".into(), cfg.width_mult.to_string());
    ordered.meta.insert(
        META_BACKBONE.into(),
        serde_json::to_string(&cfg).expect("config serializes"),
    );
    if let Some(s) = src.meta.get("source") {
        ordered.meta.insert("surgery_source".into(), s.clone());
    }
    Ok(ordered)
}

/// Outcome of checking a converted checkpoint against its source.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub bake_ws: bool,
    pub conv_checked: usize,
    pub conv_mismatch: Vec<String>,
    pub conv_missing: Vec<String>,
    pub bn_checked: usize,
    pub bn_non_default: Vec<String>,
    pub bn_missing: Vec<String>,
    pub gn_present: Vec<String>,
    pub unexpected: Vec<String>,
    pub failures: Vec<String>,
    pub passed: bool,
}

/// Compares `dst` to what surgery on `src` must produce. Never errors; every
/// problem lands in the report.
pub fn verify_surgery(src: &Checkpoint, dst: &Checkpoint, cfg: &BackboneConfig, bake_ws: bool) -> SurgeryReport {
    let mut r = SurgeryReport {
        bake_ws,
        ..Default::default()
    };
    let cfg = cfg.with_norm(NormKind::BatchNorm);
    let (convs, norms) = match (conv_sites(&cfg), norm_sites(&cfg)) {
        (Ok(c), Ok(n)) => (c, n),
        (Err(e), _) | (_, Err(e)) => {
            r.failures.push(format!("invalid backbone config: {e}"));
            return r;
        }
    };
    let reinit = dst.meta.get("stem_reinit").map(String::as_str) == Some("true");
    let mut expected: BTreeSet<String> = BTreeSet::new();

    for (name, shape) in &convs {
        if name == STEM && reinit && stem_reinit(&cfg, src, shape) {
            continue;
        }
        expected.insert(name.clone());
        let (Some(s), Some(d)) = (src.get(name), dst.get(name)) else {
            r.conv_missing.push(name.clone());
            r.failures.push(format!("conv tensor `{name}` missing"));
            continue;
        };
        r.conv_checked += 1;
        let equal = if !bake_ws {
            s == d
        } else {
            match (ws_bake(s, name, cfg.ws_eps), d.to_f32()) {
                (Ok(w), Ok(d)) => {
                    let w = w.to_f32().expect("baked tensors are f32");
                    w.shape() == d.shape() && w.iter().zip(d.iter()).all(|(a, b)| (a - b).abs() <= WS_TOL)
                }
                _ => false,
            }
        };
        if !equal {
            r.conv_mismatch.push(name.clone());
            r.failures.push(format!("conv tensor `{name}` differs from source"));
        }
    }

    let defaults: HashMap<&str, f32> = [("gamma", 1.0), ("beta", 0.0), ("running_mean", 0.0), ("running_var", 1.0)].into();
    for (site, c) in &norms {
        let has_stats = dst.contains(&format!("{site}.running_mean")) || dst.contains(&format!("{site}.running_var"));
        for (leaf, want) in &defaults {
            let n = format!("{site}.{leaf}");
            expected.insert(n.clone());
            let Some(t) = dst.get(&n) else {
                r.bn_missing.push(n.clone());
                r.failures.push(format!("BN tensor `{n}` missing"));
                continue;
            };
            if !has_stats {
                r.gn_present.push(n.clone());
                r.failures.push(format!("group-norm parameter `{n}` survived surgery"));
                continue;
            }
            r.bn_checked += 1;
            let ok = t.shape == [*c] && t.to_f32().is_ok_and(|v| v.iter().all(|x| x.to_bits() == want.to_bits()));
            if !ok {
                r.bn_non_default.push(n.clone());
                r.failures.push(format!("non-default BN parameter `{n}`"));
            }
        }
    }
    for n in dst.names() {
        if !expected.contains(n) {
            r.unexpected.push(n.to_string());
            r.failures.push(format!("unexpected tensor `{n}`"));
        }
    }
    r.passed = r.failures.is_empty();
    r
}

/// Recovers the target config that `convert_gn_to_bn` recorded.
pub fn config_from_meta(ck: &Checkpoint) -> Result<BackboneConfig> {
    let s = ck
        .meta
        .get(META_BACKBONE)
        .ok_or_else(|| Error::Config(format!("checkpoint meta has no `{META_BACKBONE}`")))?;
    serde_json::from_str(s).map_err(|e| Error::Config(format!("bad `{META_BACKBONE}` in meta: {e}")))
}
