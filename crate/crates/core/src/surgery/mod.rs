//! Pretrained-checkpoint ingestion and group-norm to batch-norm surgery.

pub mod archive;
pub mod checkpoint;
pub mod convert;
pub mod namemap;

use std::path::Path;

pub use checkpoint::{Checkpoint, DType, Tensor};
pub use convert::{config_from_meta, convert_gn_to_bn, verify_surgery, SurgeryReport};
pub use namemap::NameMap;

use crate::error::Result;

/// Loads an `.npz` weight archive through `map`, or a native checkpoint as is.
pub fn load_archive(path: &Path, map: &NameMap) -> Result<Checkpoint> {
    match archive::detect(path)? {
        archive::ArchiveKind::Npz => archive::read_npz(path, map),
        archive::ArchiveKind::Native => {
            let mut ck = Checkpoint::read(path)?;
            ck.meta
                .entry("source".into())
                .or_insert_with(|| path.display().to_string());
            Ok(ck)
        }
    }
}
