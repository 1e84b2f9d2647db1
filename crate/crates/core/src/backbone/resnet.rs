//! Pre-activation (V2) bottleneck ResNet with swappable normalization.
//!
//! Canonical tensor names (1-based block/unit indices, matching released
//! ResNet-V2 checkpoints):
//!
//! - `stem.conv.weight`
//! - `block{b}.unit{u}.norm{1,2,3}.{gamma,beta[,running_mean,running_var]}`
//! - `block{b}.unit{u}.conv{1,2,3}.weight`
//! - `block{b}.unit1.proj.weight` (first unit of every stage)
//! - `norm.{gamma,beta[,running_mean,running_var]}` (final pre-pool norm)
//!
//! Convolution kernels are `[out, in, kh, kw]`.

use ndarray::{Array2, Array4, ArrayD};
use rand::Rng;

use super::config::{BackboneConfig, NormKind, StemKind};
use crate::error::Result;
use crate::nn::layers::{
    global_avg_pool, global_avg_pool_backward, max_pool_3x3s2, max_pool_backward, relu_backward, relu_inplace,
};
use crate::nn::norm::{BatchNorm, GroupNorm, Norm, NormCache};
use crate::nn::param::{join, Parameterized, SlotKind, SlotMut};
use crate::nn::{Conv2d, ConvCache};

pub(crate) fn make_norm(cfg: &BackboneConfig, channels: usize) -> Norm {
    match cfg.norm {
        NormKind::BatchNorm => Norm::Batch(BatchNorm::new(channels, cfg.norm_eps, cfg.bn_momentum, true)),
        NormKind::GroupNormWs => Norm::Group(GroupNorm::new(channels, cfg.groups, cfg.norm_eps)),
    }
}

#[derive(Debug, Clone)]
pub struct Unit {
    pub norm1: Norm,
    pub proj: Option<Conv2d>,
    pub conv1: Conv2d,
    pub norm2: Norm,
    pub conv2: Conv2d,
    pub norm3: Norm,
    pub conv3: Conv2d,
}

pub struct UnitTape {
    n1: NormCache,
    a1: Array4<f32>,
    proj: Option<ConvCache>,
    c1: ConvCache,
    n2: NormCache,
    a2: Array4<f32>,
    c2: ConvCache,
    n3: NormCache,
    a3: Array4<f32>,
    c3: ConvCache,
}

impl Unit {
    fn new<R: Rng>(cfg: &BackboneConfig, cin: usize, mid: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let ws = (cfg.norm == NormKind::GroupNormWs).then_some(cfg.ws_eps);
        let proj = (stride != 1 || cin != cout).then(|| Conv2d::new(cout, cin, 1, stride, 0, ws, rng));
        Self {
            norm1: make_norm(cfg, cin),
            proj,
            conv1: Conv2d::new(mid, cin, 1, 1, 0, ws, rng),
            norm2: make_norm(cfg, mid),
            conv2: Conv2d::new(mid, mid, 3, stride, 1, ws, rng),
            norm3: make_norm(cfg, mid),
            conv3: Conv2d::new(cout, mid, 1, 1, 0, ws, rng),
        }
    }

    fn forward(&mut self, x: Array4<f32>, train: bool, mixed: bool) -> Result<(Array4<f32>, UnitTape)> {
        let (mut a1, n1) = self.norm1.forward(&x, train)?;
        relu_inplace(&mut a1);
        let (residual, proj) = match &self.proj {
            Some(p) => {
                let (r, c) = p.forward(&a1, mixed)?;
                (r, Some(c))
            }
            None => (x, None),
        };
        let (h1, c1) = self.conv1.forward(&a1, mixed)?;
        let (mut a2, n2) = self.norm2.forward(&h1, train)?;
        drop(h1);
        relu_inplace(&mut a2);
        let (h2, c2) = self.conv2.forward(&a2, mixed)?;
        let (mut a3, n3) = self.norm3.forward(&h2, train)?;
        drop(h2);
        relu_inplace(&mut a3);
        let (mut out, c3) = self.conv3.forward(&a3, mixed)?;
        out += &residual;
        Ok((
            out,
            UnitTape {
                n1,
                a1,
                proj,
                c1,
                n2,
                a2,
                c2,
                n3,
                a3,
                c3,
            },
        ))
    }

    fn forward_eval(&self, x: Array4<f32>) -> Result<Array4<f32>> {
        let mut a1 = self.norm1.forward_eval(&x)?;
        relu_inplace(&mut a1);
        let residual = match &self.proj {
            Some(p) => p.forward_eval(&a1)?,
            None => x,
        };
        let mut a2 = self.norm2.forward_eval(&self.conv1.forward_eval(&a1)?)?;
        relu_inplace(&mut a2);
        let mut a3 = self.norm3.forward_eval(&self.conv2.forward_eval(&a2)?)?;
        relu_inplace(&mut a3);
        let mut out = self.conv3.forward_eval(&a3)?;
        out += &residual;
        Ok(out)
    }

    fn backward(&mut self, t: &UnitTape, dy: Array4<f32>) -> Array4<f32> {
        let mut da3 = self.conv3.backward(&t.a3, &t.c3, &dy, true).expect("dx");
        relu_backward(&t.a3, &mut da3);
        let dh2 = self.norm3.backward(&t.n3, &da3);
        let mut da2 = self.conv2.backward(&t.a2, &t.c2, &dh2, true).expect("dx");
        relu_backward(&t.a2, &mut da2);
        let dh1 = self.norm2.backward(&t.n2, &da2);
        let mut da1 = self.conv1.backward(&t.a1, &t.c1, &dh1, true).expect("dx");
        let skip = match (&mut self.proj, &t.proj) {
            (Some(p), Some(c)) => {
                da1 += &p.backward(&t.a1, c, &dy, true).expect("dx");
                None
            }
            _ => Some(dy),
        };
        relu_backward(&t.a1, &mut da1);
        let mut dx = self.norm1.backward(&t.n1, &da1);
        if let Some(s) = skip {
            dx += &s;
        }
        dx
    }
}

impl Parameterized for Unit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<f32>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        if let Some(p) = &self.proj {
            p.visit(&join(prefix, "proj"), f);
        }
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.norm3.visit(&join(prefix, "norm3"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        if let Some(p) = &mut self.proj {
            p.visit_mut(&join(prefix, "proj"), f);
        }
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.norm3.visit_mut(&join(prefix, "norm3"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
    }
}

/// ResNet-V2 feature extractor: `[B, 3, H, W] -> [B, feature_dim]`.
#[derive(Debug, Clone)]
pub struct ResNetV2 {
    pub cfg: BackboneConfig,
    pub stem: Conv2d,
    pub blocks: Vec<Vec<Unit>>,
    pub norm: Norm,
}

pub struct BackboneTape {
    input: Array4<f32>,
    stem: ConvCache,
    pool: Option<((usize, usize, usize, usize), Vec<u32>)>,
    units: Vec<UnitTape>,
    final_norm: NormCache,
    final_act: Array4<f32>,
}

impl ResNetV2 {
    pub fn new<R: Rng>(cfg: BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ws = (cfg.norm == NormKind::GroupNormWs).then_some(cfg.ws_eps);
        let root = cfg.root_channels();
        let stem = match cfg.stem {
            StemKind::Standard => Conv2d::new(root, 3, 7, 2, 3, ws, rng),
            StemKind::Cifar => Conv2d::new(root, 3, 3, 1, 1, ws, rng),
        };
        let mut blocks = Vec::with_capacity(4);
        let mut cin = root;
        for (b, &n) in cfg.units_per_block()?.iter().enumerate() {
            let mid = cfg.mid_channels(b);
            let cout = cfg.out_channels(b);
            let mut units = Vec::with_capacity(n);
            for u in 0..n {
                let stride = if u == 0 && b > 0 { 2 } else { 1 };
                units.push(Unit::new(&cfg, cin, mid, cout, stride, rng));
                cin = cout;
            }
            blocks.push(units);
        }
        Ok(Self {
            norm: make_norm(&cfg, cin),
            cfg,
            stem,
            blocks,
        })
    }

    /// Human-readable sequence of operations applied by the feature forward.
    pub fn layer_trace(&self) -> Vec<String> {
        let mut t = Vec::new();
        let k = self.stem.kernel().dim().2;
        t.push(format!("stem.conv {k}x{k}/{}", self.stem.stride));
        if self.cfg.stem == StemKind::Standard {
            t.push("stem.maxpool 3x3/2".to_string());
        }
        for (b, units) in self.blocks.iter().enumerate() {
            for (u, unit) in units.iter().enumerate() {
                t.push(format!("block{}.unit{} stride {}", b + 1, u + 1, unit.conv2.stride));
            }
        }
        t.push("norm".into());
        t.push("relu".into());
        t.push("global_avg_pool".into());
        t
    }

    pub fn forward_train(&mut self, x: &Array4<f32>, mixed: bool) -> Result<(Array2<f32>, BackboneTape)> {
        self.forward_impl(x, true, mixed)
    }

    fn forward_impl(&mut self, x: &Array4<f32>, train: bool, mixed: bool) -> Result<(Array2<f32>, BackboneTape)> {
        let (mut h, stem) = self.stem.forward(x, mixed)?;
        let pool = if self.cfg.stem == StemKind::Standard {
            let shape = h.dim();
            let (p, arg) = max_pool_3x3s2(&h);
            h = p;
            Some((shape, arg))
        } else {
            None
        };
        let mut units = Vec::new();
        for unit in self.blocks.iter_mut().flatten() {
            let (out, tape) = unit.forward(h, train, mixed)?;
            units.push(tape);
            h = out;
        }
        let (mut a, final_norm) = self.norm.forward(&h, train)?;
        relu_inplace(&mut a);
        let feats = global_avg_pool(&a);
        Ok((
            feats,
            BackboneTape {
                input: x.clone(),
                stem,
                pool,
                units,
                final_norm,
                final_act: a,
            },
        ))
    }

    /// Evaluation-mode features; does not touch running statistics.
    pub fn features(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        let mut h = self.stem.forward_eval(x)?;
        if self.cfg.stem == StemKind::Standard {
            h = max_pool_3x3s2(&h).0;
        }
        for unit in self.blocks.iter().flatten() {
            h = unit.forward_eval(h)?;
        }
        let mut a = self.norm.forward_eval(&h)?;
        relu_inplace(&mut a);
        Ok(global_avg_pool(&a))
    }

    pub fn backward(&mut self, tape: BackboneTape, dfeat: &Array2<f32>) {
        let mut da = global_avg_pool_backward(tape.final_act.dim(), dfeat);
        relu_backward(&tape.final_act, &mut da);
        let mut dh = self.norm.backward(&tape.final_norm, &da);
        let units: Vec<&mut Unit> = self.blocks.iter_mut().flatten().collect();
        for (unit, t) in units.into_iter().zip(tape.units.iter()).rev() {
            dh = unit.backward(t, dh);
        }
        if let Some((shape, arg)) = &tape.pool {
            dh = max_pool_backward(*shape, arg, &dh);
        }
        self.stem.backward(&tape.input, &tape.stem, &dh, false);
    }
}

impl Parameterized for ResNetV2 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<f32>)) {
        self.stem.visit(&join(prefix, "stem.conv"), f);
        for (b, units) in self.blocks.iter().enumerate() {
            for (u, unit) in units.iter().enumerate() {
                unit.visit(&join(prefix, &format!("block{}.unit{}", b + 1, u + 1)), f);
            }
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.stem.visit_mut(&join(prefix, "stem.conv"), f);
        for (b, units) in self.blocks.iter_mut().enumerate() {
            for (u, unit) in units.iter_mut().enumerate() {
                unit.visit_mut(&join(prefix, &format!("block{}.unit{}", b + 1, u + 1)), f);
            }
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}
