use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::norm::{BN_MOMENTUM, NORM_EPS, WS_EPS};

/// Normalization used throughout the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Batch norm over raw convolution kernels.
    BatchNorm,
    /// Group norm with every convolution kernel standardized at forward time.
    GroupNormWs,
}

impl NormKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormKind::BatchNorm => "batch_norm",
            NormKind::GroupNormWs => "group_norm_ws",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "batch_norm" => Some(NormKind::BatchNorm),
            "group_norm_ws" => Some(NormKind::GroupNormWs),
            _ => None,
        }
    }
}

/// Input stem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    /// 7x7 stride-2 convolution followed by a 3x3 stride-2 max pool.
    Standard,
    /// 3x3 stride-1 convolution, no max pool (small images).
    Cifar,
}

/// ResNet-V2 (pre-activation bottleneck) architecture descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_width")]
    pub width_mult: f64,
    #[serde(default = "default_stem")]
    pub stem: StemKind,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default = "default_ws_eps")]
    pub ws_eps: f32,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f32,
}

fn default_depth() -> usize {
    50
}
fn default_width() -> f64 {
    1.0
}
fn default_stem() -> StemKind {
    StemKind::Standard
}
fn default_norm() -> NormKind {
    NormKind::BatchNorm
}
fn default_groups() -> usize {
    32
}
fn default_ws_eps() -> f32 {
    WS_EPS
}
fn default_norm_eps() -> f32 {
    NORM_EPS
}
fn default_momentum() -> f32 {
    BN_MOMENTUM
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::resnet50(NormKind::BatchNorm)
    }
}

impl BackboneConfig {
    pub fn resnet50(norm: NormKind) -> Self {
        Self {
            depth: 50,
            width_mult: 1.0,
            stem: StemKind::Standard,
            norm,
            groups: 32,
            ws_eps: WS_EPS,
            norm_eps: NORM_EPS,
            bn_momentum: BN_MOMENTUM,
        }
    }

    pub fn with_width(mut self, width_mult: f64) -> Self {
        self.width_mult = width_mult;
        self
    }

    pub fn with_stem(mut self, stem: StemKind) -> Self {
        self.stem = stem;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norm = norm;
        self
    }

    /// Named presets: `resnet{26,50,101,152}v2`, optionally suffixed `x{width}`.
    pub fn from_arch(arch: &str) -> Result<Self> {
        let rest = arch
            .strip_prefix("resnet")
            .ok_or_else(|| Error::Config(format!("unknown architecture `{arch}`")))?;
        let (depth, width) = match rest.split_once("v2") {
            Some((d, "")) => (d, 1.0),
            Some((d, w)) => (
                d,
                w.trim_start_matches('x')
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad width in `{arch}`")))?,
            ),
            None => return Err(Error::Config(format!("unknown architecture `{arch}`"))),
        };
        let depth = depth
            .parse()
            .map_err(|_| Error::Config(format!("bad depth in `{arch}`")))?;
        let cfg = Self::resnet50(NormKind::GroupNormWs).with_depth(depth).with_width(width);
        cfg.units_per_block()?;
        Ok(cfg)
    }

    /// Bottleneck units in each of the four stages.
    pub fn units_per_block(&self) -> Result<[usize; 4]> {
        match self.depth {
            14 => Ok([1, 1, 1, 1]),
            26 => Ok([2, 2, 2, 2]),
            50 => Ok([3, 4, 6, 3]),
            101 => Ok([3, 4, 23, 3]),
            152 => Ok([3, 8, 36, 3]),
            d => Err(Error::Config(format!(
                "unknown depth preset {d} (expected 14, 26, 50, 101 or 152)"
            ))),
        }
    }

    fn scaled(&self, base: usize) -> Result<usize> {
        let v = base as f64 * self.width_mult;
        let r = v.round();
        if !(self.width_mult > 0.0) || (v - r).abs() > 1e-9 || r < 1.0 {
            return Err(Error::Config(format!(
                "width_mult {} does not give a whole channel count for {base}",
                self.width_mult
            )));
        }
        Ok(r as usize)
    }

    pub fn root_channels(&self) -> usize {
        self.scaled(64).expect("validated width")
    }

    /// Bottleneck width of stage `block` (0-based).
    pub fn mid_channels(&self, block: usize) -> usize {
        self.scaled(64 << block).expect("validated width")
    }

    pub fn out_channels(&self, block: usize) -> usize {
        4 * self.mid_channels(block)
    }

    /// Embedding width: `2048 * width_mult`.
    pub fn feature_dim(&self) -> usize {
        self.out_channels(3)
    }

    pub fn validate(&self) -> Result<()> {
        self.units_per_block()?;
        self.scaled(64)?;
        if self.norm == NormKind::GroupNormWs {
            if self.groups == 0 {
                return Err(Error::Config("groups must be positive".into()));
            }
            let mut channels = vec![self.root_channels()];
            for b in 0..4 {
                channels.push(self.mid_channels(b));
                channels.push(self.out_channels(b));
            }
            if let Some(c) = channels.iter().find(|&&c| c % self.groups != 0) {
                return Err(Error::Config(format!(
                    "{c} channels not divisible by {} groups; lower `groups` for this width",
                    self.groups
                )));
            }
            if !(self.ws_eps >= 0.0) {
                return Err(Error::Config("ws_eps must be non-negative".into()));
            }
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("bn_momentum must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// SimSiam projector/predictor dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default = "default_proj_layers")]
    pub projector_layers: usize,
    #[serde(default = "default_proj_dim")]
    pub projector_dim: usize,
    #[serde(default = "default_pred_hidden")]
    pub predictor_hidden: usize,
    /// Replace the predictor by the identity (`p = z`); a degenerate setting
    /// for loss sanity checks.
    #[serde(default)]
    pub identity_predictor: bool,
}

fn default_proj_layers() -> usize {
    3
}
fn default_proj_dim() -> usize {
    2048
}
fn default_pred_hidden() -> usize {
    512
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            projector_layers: 3,
            projector_dim: 2048,
            predictor_hidden: 512,
            identity_predictor: false,
        }
    }
}

impl HeadConfig {
    pub fn small(projector_dim: usize, predictor_hidden: usize) -> Self {
        Self {
            projector_layers: 3,
            projector_dim,
            predictor_hidden,
            identity_predictor: false,
        }
    }

    pub fn predictor_out(&self) -> usize {
        self.projector_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.projector_layers == 0 || self.projector_dim == 0 || self.predictor_hidden == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        if !self.identity_predictor && self.predictor_hidden >= self.projector_dim {
            return Err(Error::Config(format!(
                "predictor_hidden ({}) must be smaller than projector_dim ({})",
                self.predictor_hidden, self.projector_dim
            )));
        }
        Ok(())
    }
}
