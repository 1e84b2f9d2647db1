//! Run configuration: one TOML document with nested sections.
//!
//! Unknown keys are rejected everywhere. `schema_version` must be 1. Relative
//! paths resolve against the config file's directory. Errors name the line of
//! the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, HeadConfig, NormKind};
use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::eval::{KnnConfig, ProbeConfig, TsneConfig};
use crate::ssl::{AugConfig, AugPolicy, OptimConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// How the backbone is initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Init {
    // A struct variant so stray keys are rejected like everywhere else.
    Scratch {},
    /// GN+WS archive converted to batch norm before training.
    Surgery {
        checkpoint: PathBuf,
        #[serde(default)]
        bake_ws: bool,
        /// `bit` (bundled BiT ResNet-V2 table), `identity`, or a JSON file.
        #[serde(default = "d_name_map")]
        name_map: String,
    },
    /// A native checkpoint whose backbone already fits.
    Pretrained { checkpoint: PathBuf },
}

fn d_name_map() -> String {
    "bit".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugSection {
    pub policy: AugPolicy,
    #[serde(default)]
    pub size: Option<usize>,
}

impl AugSection {
    pub fn resolve(&self) -> AugConfig {
        AugConfig::for_policy(self.policy, self.size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: PathBuf,
    pub image_size: usize,
    /// Re-split the manifest with this spec instead of using its tags.
    #[serde(default)]
    pub split: Option<SplitSpec>,
    /// Decode the pretrain split once and keep it in memory.
    #[serde(default = "d_true")]
    pub preload: bool,
}

fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorSection {
    #[serde(default = "d_true")]
    pub enabled: bool,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_temp")]
    pub temperature: f64,
}

fn d_k() -> usize {
    KnnConfig::default().k
}
fn d_temp() -> f64 {
    KnnConfig::default().temperature
}

impl Default for MonitorSection {
    fn default() -> Self {
        let k = KnnConfig::default();
        Self {
            enabled: true,
            k: k.k,
            temperature: k.temperature,
        }
    }
}

impl MonitorSection {
    pub fn knn(&self) -> KnnConfig {
        KnnConfig {
            k: self.k,
            temperature: self.temperature,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Write an epoch checkpoint every this many epochs; 0 keeps only the last.
    #[serde(default)]
    pub save_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
    pub output_dir: PathBuf,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub optimizer: OptimConfig,
    pub augment: AugSection,
    pub data: DataSection,
    #[serde(default)]
    pub monitor: MonitorSection,
    #[serde(default)]
    pub eval: ProbeConfig,
    #[serde(default)]
    pub tsne: TsneConfig,
    #[serde(default)]
    pub train: TrainSection,
    pub init: Init,
}

/// Line (1-based) of `key` inside `[section]`, or of a top-level key when
/// `section` is empty. Dotted sections such as `data.split` are matched
/// literally.
pub fn locate_key(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = h.trim().to_string();
            if current == section {
                header_line = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    header_line
}

struct Located<'a> {
    text: &'a str,
    origin: &'a str,
}

impl Located<'_> {
    fn err(&self, section: &str, key: &str, msg: impl std::fmt::Display) -> Error {
        let at = match locate_key(self.text, section, key) {
            Some(l) => format!("{}:{l}", self.origin),
            None => self.origin.to_string(),
        };
        let path = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
        let msg = msg.to_string();
        let msg = msg.strip_prefix("configuration error: ").unwrap_or(&msg);
        Error::Config(format!("{at}: `{path}`: {msg}"))
    }
}

impl RunConfig {
    /// Parses and validates; `base` anchors relative paths.
    pub fn from_toml(text: &str, origin: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .map_or(String::new(), |l| format!(":{l}"));
            Error::Config(format!("{origin}{line}: {}", e.message()))
        })?;
        cfg.resolve_paths(base);
        cfg.validate_with(&Located { text, origin })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cfg = Self::from_toml(&text, &path.display().to_string(), &base)?;
        Ok((cfg, text))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.data.manifest);
        match &mut self.init {
            Init::Scratch {} => {}
            Init::Surgery { checkpoint, .. } | Init::Pretrained { checkpoint } => fix(checkpoint),
        }
    }

    fn validate_with(&self, at: &Located) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(at.err("", "schema_version", format!("must be {SCHEMA_VERSION}")));
        }
        self.backbone.validate().map_err(|e| at.err("backbone", "depth", e))?;
        self.head.validate().map_err(|e| at.err("head", "projector_dim", e))?;
        self.optimizer.validate().map_err(|e| at.err("optimizer", "base_lr", e))?;
        self.augment.resolve().validate().map_err(|e| at.err("augment", "policy", e))?;
        self.eval.validate().map_err(|e| at.err("eval", "trials", e))?;
        if self.data.image_size == 0 {
            return Err(at.err("data", "image_size", "must be positive"));
        }
        if let Some(s) = &self.data.split {
            s.validate().map_err(|e| at.err("data.split", "pretrain", e))?;
        }
        if !self.data.manifest.exists() {
            return Err(at.err("data", "manifest", format!("{} does not exist", self.data.manifest.display())));
        }
        if self.monitor.k == 0 || !(self.monitor.temperature > 0.0) {
            return Err(at.err("monitor", "k", "k and temperature must be positive"));
        }
        match &self.init {
            Init::Scratch {} => {}
            Init::Surgery { checkpoint, name_map, .. } => {
                if !checkpoint.exists() {
                    return Err(at.err("init", "checkpoint", format!("{} does not exist", checkpoint.display())));
                }
                if self.backbone.norm != NormKind::BatchNorm {
                    return Err(at.err("backbone", "norm", "surgery produces a batch-norm backbone"));
                }
                if !matches!(name_map.as_str(), "bit" | "identity") && !Path::new(name_map).exists() {
                    return Err(at.err("init", "name_map", format!("unknown name map `{name_map}`")));
                }
            }
            Init::Pretrained { checkpoint } => {
                if !checkpoint.exists() {
                    return Err(at.err("init", "checkpoint", format!("{} does not exist", checkpoint.display())));
                }
            }
        }
        if self.deterministic && self.optimizer.mixed_precision {
            return Err(at.err("optimizer", "mixed_precision", "deterministic runs use full precision"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
