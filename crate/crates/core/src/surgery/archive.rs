//! Reading released weight archives (`.npz`) into canonically named
//! checkpoints, and writing them for fixtures.

use std::fs::File;
use std::io::{BufReader, Read, Seek};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use ndarray_npy::{NpzReader, NpzWriter, ReadNpyError, ReadNpzError};

use super::checkpoint::{Checkpoint, DType, Tensor};
use super::namemap::{NameMap, Transform};
use crate::error::{Error, Result};

const ZIP_MAGIC: &[u8; 4] = b"PK\x03\x04";
const NATIVE_PREFIX_LEN: usize = 8;

/// Archive flavours `load_archive` accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchiveKind {
    Npz,
    Native,
}

/// Sniffs the file's leading bytes.
pub fn detect(path: &Path) -> Result<ArchiveKind> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; NATIVE_PREFIX_LEN];
    let n = f.read(&mut head).map_err(|e| Error::io(path, e))?;
    if n >= 4 && &head[..4] == ZIP_MAGIC {
        return Ok(ArchiveKind::Npz);
    }
    if n == NATIVE_PREFIX_LEN {
        return Ok(ArchiveKind::Native);
    }
    Err(Error::Integrity(format!("{}: too short to be an archive", path.display())))
}

fn npz_err(path: &Path, e: ReadNpzError) -> Error {
    Error::Integrity(format!("{}: {e}", path.display()))
}

fn read_any<R: Read + Seek>(npz: &mut NpzReader<R>, name: &str, path: &Path) -> Result<(DType, ArrayD<f32>)> {
    match npz.by_name::<_, IxDyn>(name) {
        Ok(a) => return Ok((DType::F32, a)),
        Err(ReadNpzError::Npy(ReadNpyError::WrongDescriptor(_))) => {}
        Err(e) => return Err(npz_err(path, e)),
    }
    let a: ArrayD<f64> = npz.by_name(name).map_err(|e| npz_err(path, e))?;
    Ok((DType::F64, a.mapv(|v| v as f32)))
}

fn apply_transform(a: ArrayD<f32>, t: Transform, name: &str) -> Result<ArrayD<f32>> {
    match t {
        Transform::None => Ok(a),
        Transform::HwioToOihw => {
            if a.ndim() != 4 {
                return Err(Error::Shape(format!(
                    "`{name}`: hwio_to_oihw needs a 4-D kernel, got {:?}",
                    a.shape()
                )));
            }
            Ok(a.permuted_axes(IxDyn(&[3, 2, 0, 1])).as_standard_layout().into_owned())
        }
        Transform::Flatten => {
            if a.shape().iter().filter(|&&d| d != 1).count() > 1 {
                return Err(Error::Shape(format!("`{name}`: cannot flatten shape {:?} to a vector", a.shape())));
            }
            let n = a.len();
            Ok(a.as_standard_layout().into_owned().into_shape_with_order(IxDyn(&[n])).expect("same length"))
        }
    }
}

/// Reads an `.npz` archive and renames every array through `map`.
///
/// `f32` sources are copied value-exact; `f64` sources are narrowed to `f32`
/// and recorded in meta as `source_dtype`.
pub fn read_npz(path: &Path, map: &NameMap) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut npz = NpzReader::new(BufReader::new(file)).map_err(|e| npz_err(path, e))?;
    let raw = npz.names().map_err(|e| npz_err(path, e))?;
    // numpy stores `name` as `name.npy`; the reader accepts either.
    let names: Vec<String> = raw
        .iter()
        .map(|n| n.strip_suffix(".npy").unwrap_or(n).to_string())
        .collect();
    let mapped = map.resolve(names.iter().map(String::as_str))?;
    let mut ck = Checkpoint::new();
    let mut narrowed = false;
    for m in mapped {
        let (dt, a) = read_any(&mut npz, &m.source, path)?;
        narrowed |= dt == DType::F64;
        let a = apply_transform(a, m.transform, &m.source)?;
        ck.insert(m.target, Tensor::from_array(&a));
    }
    ck.meta.insert("source".into(), path.display().to_string());
    ck.meta.insert("name_map".into(), format!("{}@{}", map.name, map.version));
    if let Some(k) = &map.norm_kind {
        ck.meta.insert("norm_kind".into(), k.clone());
    }
    ck.meta.insert("source_dtype".into(), if narrowed { "f64" } else { "f32" }.into());
    Ok(ck)
}

/// Writes `f32` arrays to an `.npz` (uncompressed) in the given order.
pub fn write_npz<'a>(path: &Path, arrays: impl IntoIterator<Item = (&'a str, &'a ArrayD<f32>)>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = NpzWriter::new(file);
    for (name, a) in arrays {
        w.add_array(name, a)
            .map_err(|e| Error::InvalidArgument(format!("{}: writing `{name}`: {e}", path.display())))?;
    }
    w.finish()
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Inverse of `hwio_to_oihw`, for building archive fixtures from a model.
pub fn oihw_to_hwio(a: &ArrayD<f32>) -> ArrayD<f32> {
    assert_eq!(a.ndim(), 4);
    a.view().permuted_axes(IxDyn(&[2, 3, 1, 0])).as_standard_layout().into_owned()
}
