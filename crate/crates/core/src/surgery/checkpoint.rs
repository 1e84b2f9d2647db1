//! Checkpoint container and its native on-disk format.
//!
//! Layout: an 8-byte little-endian header length `N`, `N` bytes of UTF-8 JSON
//! header, then the contiguous little-endian tensor payload. The header holds
//! `format_version` (always 1), the meta map, the payload size and SHA-256, and
//! one record per tensor with name, dtype, shape, byte offset and byte length.

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F16,
    F32,
    F64,
    I32,
    I64,
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F16 => 2,
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

/// A dense little-endian tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let t = Self { dtype, shape, data };
        t.check_len("tensor")?;
        Ok(t)
    }

    pub fn from_f32(shape: &[usize], values: impl IntoIterator<Item = f32>) -> Self {
        let data: Vec<u8> = values.into_iter().flat_map(f32::to_le_bytes).collect();
        debug_assert_eq!(data.len(), shape.iter().product::<usize>() * 4);
        Self {
            dtype: DType::F32,
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_array(a: &ArrayD<f32>) -> Self {
        Self::from_f32(a.shape(), a.iter().copied())
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn check_len(&self, name: &str) -> Result<()> {
        let want = self
            .numel()
            .checked_mul(self.dtype.size())
            .ok_or_else(|| Error::Integrity(format!("`{name}`: shape {:?} overflows", self.shape)))?;
        if want != self.data.len() {
            return Err(Error::Integrity(format!(
                "`{name}`: {} bytes for shape {:?} of {:?} (expected {want})",
                self.data.len(),
                self.shape,
                self.dtype
            )));
        }
        Ok(())
    }

    /// Converts floating-point tensors to `f32`.
    pub fn to_f32(&self) -> Result<ArrayD<f32>> {
        let v: Vec<f32> = match self.dtype {
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            DType::F64 => self
                .data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
                .collect(),
            DType::F16 => self
                .data
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes(c.try_into().expect("2 bytes")).to_f32())
                .collect(),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "cannot read {other:?} tensor as f32"
                )))
            }
        };
        ArrayD::from_shape_vec(IxDyn(&self.shape), v).map_err(|e| Error::Shape(e.to_string()))
    }
}

/// Ordered map of canonical tensor names to tensors, plus provenance metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: IndexMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    meta: BTreeMap<String, String>,
    payload_bytes: u64,
    payload_sha256: String,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a tensor, keeping the original position on replace.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.shift_remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut records = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            t.check_len(name)?;
            records.push(TensorRecord {
                name: name.clone(),
                dtype: t.dtype,
                shape: t.shape.clone(),
                offset: payload.len() as u64,
                nbytes: t.data.len() as u64,
            });
            payload.extend_from_slice(&t.data);
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            payload_bytes: payload.len() as u64,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
            tensors: records,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + payload.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let integrity = |m: String| Error::Integrity(m);
        if bytes.len() < 8 {
            return Err(integrity("file shorter than the header length field".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let hend = 8u64
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| integrity(format!("header length {hlen} exceeds file size")))? as usize;
        let header: Header = serde_json::from_slice(&bytes[8..hend])
            .map_err(|e| integrity(format!("corrupt header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(integrity(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let payload = &bytes[hend..];
        if payload.len() as u64 != header.payload_bytes {
            return Err(integrity(format!(
                "payload is {} bytes, header declares {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(integrity("payload checksum mismatch".into()));
        }
        let mut ck = Checkpoint {
            tensors: IndexMap::with_capacity(header.tensors.len()),
            meta: header.meta,
        };
        let mut cursor = 0u64;
        for r in header.tensors {
            if r.offset != cursor {
                return Err(integrity(format!(
                    "`{}` starts at byte {} but previous tensor ended at {cursor}",
                    r.name, r.offset
                )));
            }
            let end = r
                .offset
                .checked_add(r.nbytes)
                .filter(|&e| e <= payload.len() as u64)
                .ok_or_else(|| integrity(format!("`{}` overflows the payload", r.name)))?;
            let t = Tensor {
                dtype: r.dtype,
                shape: r.shape,
                data: payload[r.offset as usize..end as usize].to_vec(),
            };
            t.check_len(&r.name)?;
            if ck.tensors.insert(r.name.clone(), t).is_some() {
                return Err(integrity(format!("duplicate tensor `{}`", r.name)));
            }
            cursor = end;
        }
        if cursor != payload.len() as u64 {
            return Err(integrity("trailing bytes after the last tensor".into()));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("a.weight", Tensor::from_f32(&[2, 3], (0..6).map(|i| i as f32 * 0.5)));
        ck.insert("b", Tensor::new(DType::U8, vec![4], vec![1, 2, 3, 4]).unwrap());
        ck.meta.insert("source".into(), "unit-test".into());
        ck
    }

    #[test]
    fn empty_checkpoint_round_trips() {
        let ck = Checkpoint::new();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn tampered_shape_is_integrity_error() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let patched = text.replacen("\"shape\":[2,3]", "\"shape\":[3,3]", 1);
        assert_ne!(text, patched);
        let err = Checkpoint::from_bytes(patched.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
    }

    #[test]
    fn unknown_dtype_and_version_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let bad = text.replacen("\"u8\"", "\"q4\"", 1);
        assert!(matches!(Checkpoint::from_bytes(bad.as_bytes()), Err(Error::Integrity(_))));
        let bad = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert!(matches!(Checkpoint::from_bytes(bad.as_bytes()), Err(Error::Integrity(_))));
    }

    #[test]
    fn truncated_file_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..5]).is_err());
    }

    #[test]
    fn oversized_header_length_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[..8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Integrity(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 0..4), any::<u64>()),
                0..6,
            ),
            note in "[a-z ]{0,12}",
        ) {
            let mut ck = Checkpoint::new();
            for (i, (shape, seed)) in tensors.iter().enumerate() {
                let n: usize = shape.iter().product();
                let vals = (0..n).map(|j| f32::from_bits((seed.wrapping_add(j as u64) as u32) & 0x7f7f_ffff));
                ck.insert(format!("t{i}"), Tensor::from_f32(shape, vals));
            }
            ck.meta.insert("note".into(), note);
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }
}
