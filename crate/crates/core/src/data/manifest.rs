//! Dataset manifests: `path,label,split` CSV plus a JSON sidecar holding the
//! ordered class names and frozen normalization statistics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::image::Normalize;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Finetune,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Finetune, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Finetune => "finetune",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split tag `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub path: String,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    class_names: Vec<String>,
    #[serde(default)]
    normalize: Option<Normalize>,
}

/// Labeled image list partitioned into splits. Relative paths resolve against
/// `root` (the manifest's directory when read from disk).
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<Entry>,
    pub class_names: Vec<String>,
    pub normalize: Option<Normalize>,
    pub root: PathBuf,
}

fn sidecar_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Manifest {
    pub fn new(entries: Vec<Entry>, class_names: Vec<String>, root: PathBuf) -> Result<Self> {
        let m = Self {
            entries,
            class_names,
            normalize: None,
            root,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for n in &self.class_names {
            if !seen.insert(n) {
                return Err(Error::Config(format!("duplicate class name `{n}`")));
            }
        }
        if let Some(e) = self.entries.iter().find(|e| !seen.contains(&e.label)) {
            return Err(Error::Config(format!("`{}` has unknown label `{}`", e.path, e.label)));
        }
        Ok(())
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Label indices for all entries, in order.
    pub fn labels(&self) -> Vec<usize> {
        self.entries
            .iter()
            .map(|e| self.class_index(&e.label).expect("validated"))
            .collect()
    }

    pub fn resolve(&self, e: &Entry) -> PathBuf {
        let p = Path::new(&e.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Entry indices tagged `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].split == split).collect()
    }

    /// Per-class counts, aligned with `class_names`.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_names.len()];
        for l in self.labels() {
            c[l] += 1;
        }
        c
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut m: BTreeMap<Split, usize> = Split::ALL.into_iter().map(|s| (s, 0)).collect();
        for e in &self.entries {
            *m.get_mut(&e.split).expect("all splits present") += 1;
        }
        m
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for e in &self.entries {
            wr.serialize(e)?;
        }
        wr.flush().map_err(|e| Error::io("<manifest>", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R, class_names: Option<Vec<String>>, root: PathBuf) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(Error::Config(format!(
                "manifest header must be `path,label,split`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let entries: Vec<Entry> = rd.deserialize().collect::<std::result::Result<_, _>>()?;
        let class_names = class_names.unwrap_or_else(|| {
            let mut names: Vec<String> = Vec::new();
            for e in &entries {
                if !names.contains(&e.label) {
                    names.push(e.label.clone());
                }
            }
            names
        });
        Self::new(entries, class_names, root)
    }

    /// Writes the CSV and its `.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))?;
        let side = Sidecar {
            class_names: self.class_names.clone(),
            normalize: self.normalize,
        };
        let sp = sidecar_path(path);
        std::fs::write(&sp, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&sp, e))
    }

    /// Reads a manifest; the sidecar is optional (class order then follows
    /// first appearance).
    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let sp = sidecar_path(path);
        let side: Option<Sidecar> = match std::fs::read(&sp) {
            Ok(b) => Some(serde_json::from_slice(&b)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(Error::io(&sp, e)),
        };
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut m = Self::read_csv(f, side.as_ref().map(|s| s.class_names.clone()), root)?;
        m.normalize = side.and_then(|s| s.normalize);
        Ok(m)
    }
}
