//! ResNet-V2 backbone plus SimSiam heads, with a canonical tensor inventory
//! shared with the surgery module.

pub mod config;
pub mod heads;
pub mod resnet;

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use config::{BackboneConfig, HeadConfig, NormKind, StemKind};
pub use heads::SimSiamHead;
pub use resnet::ResNetV2;

use crate::error::{Error, Result};
use crate::nn::param::{Parameterized, SlotKind, SlotMut};
use crate::surgery::checkpoint::{Checkpoint, Tensor};

/// What a named tensor is, as far as surgery and loading are concerned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    ConvWeight,
    NormParam,
    NormBuffer,
    HeadParam,
    HeadBuffer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
}

/// Normalization sites of the backbone: `(prefix, channels)`.
pub fn norm_sites(cfg: &BackboneConfig) -> Result<Vec<(String, usize)>> {
    cfg.validate()?;
    let mut sites = Vec::new();
    let mut cin = cfg.root_channels();
    for (b, &n) in cfg.units_per_block()?.iter().enumerate() {
        for u in 0..n {
            let p = format!("block{}.unit{}", b + 1, u + 1);
            sites.push((format!("{p}.norm1"), cin));
            sites.push((format!("{p}.norm2"), cfg.mid_channels(b)));
            sites.push((format!("{p}.norm3"), cfg.mid_channels(b)));
            cin = cfg.out_channels(b);
        }
    }
    sites.push(("norm".to_string(), cin));
    Ok(sites)
}

/// Convolution kernels of the backbone with their `[out, in, kh, kw]` shapes.
pub fn conv_sites(cfg: &BackboneConfig) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    let root = cfg.root_channels();
    let k = match cfg.stem {
        StemKind::Standard => 7,
        StemKind::Cifar => 3,
    };
    let mut sites = vec![("stem.conv.weight".to_string(), vec![root, 3, k, k])];
    let mut cin = root;
    for (b, &n) in cfg.units_per_block()?.iter().enumerate() {
        let mid = cfg.mid_channels(b);
        let cout = cfg.out_channels(b);
        for u in 0..n {
            let p = format!("block{}.unit{}", b + 1, u + 1);
            let stride = if u == 0 && b > 0 { 2 } else { 1 };
            if stride != 1 || cin != cout {
                sites.push((format!("{p}.proj.weight"), vec![cout, cin, 1, 1]));
            }
            sites.push((format!("{p}.conv1.weight"), vec![mid, cin, 1, 1]));
            sites.push((format!("{p}.conv2.weight"), vec![mid, mid, 3, 3]));
            sites.push((format!("{p}.conv3.weight"), vec![cout, mid, 1, 1]));
            cin = cout;
        }
    }
    Ok(sites)
}

/// Full backbone inventory in canonical visiting order, without allocating
/// any weights.
pub fn backbone_inventory(cfg: &BackboneConfig) -> Result<Vec<TensorSpec>> {
    let convs = conv_sites(cfg)?;
    let norms = norm_sites(cfg)?;
    let leaves: &[(&str, TensorRole)] = match cfg.norm {
        NormKind::GroupNormWs => &[("gamma", TensorRole::NormParam), ("beta", TensorRole::NormParam)],
        NormKind::BatchNorm => &[
            ("gamma", TensorRole::NormParam),
            ("beta", TensorRole::NormParam),
            ("running_mean", TensorRole::NormBuffer),
            ("running_var", TensorRole::NormBuffer),
        ],
    };
    let mut out = Vec::new();
    let push_norm = |out: &mut Vec<TensorSpec>, site: &str, c: usize| {
        for (leaf, role) in leaves {
            out.push(TensorSpec {
                name: format!("{site}.{leaf}"),
                shape: vec![c],
                role: *role,
            });
        }
    };
    let conv = |name: &str| {
        convs.iter().find(|(n, _)| n == name).map(|(n, s)| TensorSpec {
            name: n.clone(),
            shape: s.clone(),
            role: TensorRole::ConvWeight,
        })
    };
    out.extend(conv("stem.conv.weight"));
    let (last, unit_norms) = norms.split_last().expect("at least the final norm");
    for triple in unit_norms.chunks(3) {
        let unit = triple[0].0.strip_suffix(".norm1").expect("unit sites come in threes");
        push_norm(&mut out, &triple[0].0, triple[0].1);
        out.extend(conv(&format!("{unit}.proj.weight")));
        out.extend(conv(&format!("{unit}.conv1.weight")));
        push_norm(&mut out, &triple[1].0, triple[1].1);
        out.extend(conv(&format!("{unit}.conv2.weight")));
        push_norm(&mut out, &triple[2].0, triple[2].1);
        out.extend(conv(&format!("{unit}.conv3.weight")));
    }
    push_norm(&mut out, &last.0, last.1);
    Ok(out)
}

/// Backbone with optional SimSiam head.
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: ResNetV2,
    pub head: Option<SimSiamHead>,
}

/// Saved activations of one training forward.
pub struct Tape {
    backbone: resnet::BackboneTape,
    head: heads::HeadTape,
}

/// Builds a model with deterministic initialization from `seed`.
pub fn build_model(cfg: BackboneConfig, head: Option<HeadConfig>, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = ResNetV2::new(cfg, &mut rng)?;
    let head = head
        .map(|h| SimSiamHead::new(cfg.feature_dim(), h, &mut rng))
        .transpose()?;
    Ok(Model { backbone, head })
}

/// Which tensors may be absent from, or extra in, a checkpoint being loaded.
#[derive(Debug, Clone, Default)]
pub struct LoadPolicy {
    pub allow_missing: Vec<String>,
    pub allow_unexpected: Vec<String>,
}

impl LoadPolicy {
    pub fn strict() -> Self {
        Self::default()
    }

    /// Heads are freshly initialized; a source classifier head is ignored.
    pub fn backbone_only() -> Self {
        Self {
            allow_missing: vec!["projector.".into(), "predictor.".into()],
            allow_unexpected: vec!["head.".into()],
        }
    }

    pub fn allowing_missing(mut self, prefix: &str) -> Self {
        self.allow_missing.push(prefix.to_string());
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
}

impl Model {
    pub fn feature_dim(&self) -> usize {
        self.backbone.cfg.feature_dim()
    }

    /// Evaluation-mode features `[B, feature_dim]`.
    pub fn features(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        self.backbone.features(x)
    }

    /// Evaluation-mode `(features, z)`; requires a head.
    pub fn project_eval(&self, x: &Array4<f32>) -> Result<(Array2<f32>, Array2<f32>)> {
        let head = self.head.as_ref().ok_or_else(|| Error::Config("model has no SimSiam head".into()))?;
        let f = self.backbone.features(x)?;
        let (z, _) = head.forward_eval(&f)?;
        Ok((f, z))
    }

    /// Evaluation-mode `(z, p)`.
    pub fn simsiam_eval(&self, x: &Array4<f32>) -> Result<(Array2<f32>, Array2<f32>)> {
        let head = self.head.as_ref().ok_or_else(|| Error::Config("model has no SimSiam head".into()))?;
        head.forward_eval(&self.backbone.features(x)?)
    }

    /// Training-mode SimSiam forward returning `(z, p, tape)`.
    pub fn forward_train(&mut self, x: &Array4<f32>, mixed: bool) -> Result<(Array2<f32>, Array2<f32>, Tape)> {
        let head = self.head.as_mut().ok_or_else(|| Error::Config("model has no SimSiam head".into()))?;
        let (f, bt) = self.backbone.forward_train(x, mixed)?;
        let (z, p, ht) = head.forward(f, mixed)?;
        Ok((z, p, Tape { backbone: bt, head: ht }))
    }

    /// Accumulates parameter gradients from `dp` and an optional direct `dz`.
    pub fn backward(&mut self, tape: Tape, dz: Option<&Array2<f32>>, dp: &Array2<f32>) {
        let head = self.head.as_mut().expect("forward_train checked the head");
        let dfeat = head.backward(&tape.head, dz, dp);
        self.backbone.backward(tape.backbone, &dfeat);
    }

    pub fn inventory(&self) -> Vec<TensorSpec> {
        let mut out = Vec::new();
        self.visit("", &mut |name, kind, v| {
            let head = name.starts_with("projector.") || name.starts_with("predictor.");
            let role = match (head, kind) {
                (true, SlotKind::Param) => TensorRole::HeadParam,
                (true, SlotKind::Buffer) => TensorRole::HeadBuffer,
                (false, SlotKind::Buffer) => TensorRole::NormBuffer,
                (false, SlotKind::Param) if v.ndim() == 4 => TensorRole::ConvWeight,
                (false, SlotKind::Param) => TensorRole::NormParam,
            };
            out.push(TensorSpec {
                name: name.to_string(),
                shape: v.shape().to_vec(),
                role,
            });
        });
        out
    }

    /// SHA-256 over every tensor name and its `f32` bytes in canonical order.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |name, _, v| {
            h.update(name.as_bytes());
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    pub fn backbone_hash(&self) -> String {
        let mut h = Sha256::new();
        self.backbone.visit("", &mut |name, _, v| {
            h.update(name.as_bytes());
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    /// Snapshot of all tensors as an `f32` checkpoint.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.visit("", &mut |name, _, v| {
            ck.insert(name, Tensor::from_f32(v.shape(), v.iter().copied()));
        });
        let cfg = &self.backbone.cfg;
        ck.meta.insert("norm_kind".into(), cfg.norm.as_str().into());
        ck.meta.insert("depth".into(), cfg.depth.to_string());
        ck.meta.insert("width_mult".into(), cfg.width_mult.to_string());
        ck
    }

    /// Copies tensors from `ck`, checking shapes and applying `policy`.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint, policy: &LoadPolicy) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let mut errors = Vec::new();
        let mut seen = std::collections::HashSet::new();
        self.visit_mut("", &mut |name, mut slot| {
            seen.insert(name.to_string());
            match ck.get(name) {
                Some(t) => {
                    let dst = slot.value_mut();
                    if t.shape != dst.shape() {
                        errors.push(format!(
                            "`{name}`: checkpoint shape {:?} vs model shape {:?}",
                            t.shape,
                            dst.shape()
                        ));
                        return;
                    }
                    match t.to_f32() {
                        Ok(v) => {
                            dst.assign(&v);
                            report.loaded.push(name.to_string());
                        }
                        Err(e) => errors.push(format!("`{name}`: {e}")),
                    }
                }
                None => report.missing.push(name.to_string()),
            }
        });
        for name in ck.names() {
            if !seen.contains(name) {
                report.unexpected.push(name.to_string());
            }
        }
        if !errors.is_empty() {
            return Err(Error::Shape(errors.join("; ")));
        }
        let bad_missing: Vec<_> = report
            .missing
            .iter()
            .filter(|n| !policy.allow_missing.iter().any(|p| n.starts_with(p.as_str())))
            .cloned()
            .collect();
        let bad_unexpected: Vec<_> = report
            .unexpected
            .iter()
            .filter(|n| !policy.allow_unexpected.iter().any(|p| n.starts_with(p.as_str())))
            .cloned()
            .collect();
        if !bad_missing.is_empty() || !bad_unexpected.is_empty() {
            return Err(Error::Structure(format!(
                "checkpoint does not fit model: missing [{}], unexpected [{}]",
                bad_missing.join(", "),
                bad_unexpected.join(", ")
            )));
        }
        Ok(report)
    }
}

impl Parameterized for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ndarray::ArrayD<f32>)) {
        self.backbone.visit(prefix, f);
        if let Some(h) = &self.head {
            h.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.backbone.visit_mut(prefix, f);
        if let Some(h) = &mut self.head {
            h.visit_mut(prefix, f);
        }
    }
}
