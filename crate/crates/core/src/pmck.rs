//! The PMCK checkpoint container.
//!
//! Layout:
//!
//! ```text
//! 0..8        ASCII magic "PMCKv001"
//! 8..16       u64 LE header length H
//! 16..16+H    UTF-8 JSON header {dtype, arch, tensors: [{name, shape, offset, nbytes}], provenance}
//! 16+H..      payload: little-endian tensor data
//! ```
//!
//! Offsets are relative to the payload start and 8-byte aligned; each tensor
//! is zero-padded to the next 8-byte boundary. Directory entries are sorted
//! by name. Encoding is a pure function of the tensors, so equal inputs give
//! equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::ToyArchSpec;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PMCKv001";
const ALIGN: usize = 8;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: DType,
    arch: ToyArchSpec,
    tensors: Vec<Entry>,
    provenance: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

/// Raw container contents; no architecture validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Container<T> {
    pub arch: ToyArchSpec,
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub provenance: String,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn encode<T: Scalar>(c: &Container<T>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(c.tensors.len());
    for (name, t) in &c.tensors {
        t.ensure_finite(name)?;
        let offset = payload.len();
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        let nbytes = payload.len() - offset;
        payload.resize(align_up(payload.len()), 0);
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: offset as u64,
            nbytes: nbytes as u64,
        });
    }
    let header = serde_json::to_vec(&Header {
        dtype: T::DTYPE,
        arch: c.arch,
        tensors: entries,
        provenance: c.provenance.clone(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Header dtype without decoding the payload.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    Ok(parse_header(bytes)?.0.dtype)
}

fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(Error::TruncatedHeader);
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let hend = usize::try_from(hlen)
        .ok()
        .and_then(|h| h.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or(Error::TruncatedHeader)?;
    let header: Header = serde_json::from_slice(&bytes[16..hend])
        .map_err(|e| Error::Format(format!("header json: {e}")))?;
    Ok((header, &bytes[hend..]))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Container<T>> {
    let (header, payload) = parse_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::DType {
            expected: T::DTYPE.as_str(),
            found: header.dtype.as_str().into(),
        });
    }
    let size = T::DTYPE.size();
    let mut tensors = BTreeMap::new();
    let mut prev: Option<&str> = None;
    let mut end = 0usize;
    for e in &header.tensors {
        if prev.is_some_and(|p| p >= e.name.as_str()) {
            return Err(Error::Format(format!(
                "directory not strictly sorted at {}",
                e.name
            )));
        }
        prev = Some(&e.name);
        let numel: usize = e.shape.iter().product();
        let offset = e.offset as usize;
        if e.nbytes as usize != numel * size {
            return Err(Error::Format(format!(
                "{}: nbytes {} does not match shape {:?}",
                e.name, e.nbytes, e.shape
            )));
        }
        if !offset.is_multiple_of(ALIGN) {
            return Err(Error::Format(format!("{}: offset {offset} not aligned", e.name)));
        }
        let stop = offset + numel * size;
        if stop > payload.len() {
            return Err(Error::TruncatedPayload);
        }
        let data: Vec<T> = payload[offset..stop]
            .chunks_exact(size)
            .map(T::read_le)
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| match err {
            Error::NonFinite(_) => Error::NonFinite(format!("payload of {}", e.name)),
            other => other,
        })?;
        tensors.insert(e.name.clone(), t);
        end = end.max(align_up(stop));
    }
    if payload.len() > end {
        return Err(Error::Format(format!(
            "{} trailing payload bytes",
            payload.len() - end
        )));
    }
    Ok(Container {
        arch: header.arch,
        tensors,
        provenance: header.provenance,
    })
}

pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    encode(&Container {
        arch: *ckpt.arch(),
        tensors: ckpt.tensors().clone(),
        provenance: ckpt.provenance.clone(),
    })
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let c = decode::<T>(bytes)?;
    Checkpoint::new(c.arch, c.tensors, c.provenance)
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint stored with exactly dtype `T`.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Load a checkpoint of either stored dtype, converting to `T`.
pub fn load_checkpoint_as<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match peek_dtype(&bytes)? {
        DType::F32 => decode_checkpoint::<f32>(&bytes)?.cast(),
        DType::F64 => decode_checkpoint::<f64>(&bytes)?.cast(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_container() -> Container<f64> {
        let mut tensors = BTreeMap::new();
        tensors.insert("a".to_string(), Tensor::scalar(1.0).unwrap());
        Container {
            arch: ToyArchSpec::TINY,
            tensors,
            provenance: String::new(),
        }
    }

    fn header_of(bytes: &[u8]) -> serde_json::Value {
        let h = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        serde_json::from_slice(&bytes[16..16 + h]).unwrap()
    }

    #[test]
    fn scalar_only_layout() {
        let bytes = encode(&scalar_container()).unwrap();
        assert_eq!(&bytes[..8], b"PMCKv001");
        let h = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = header_of(&bytes);
        assert_eq!(header["dtype"], "f64");
        assert_eq!(header["tensors"].as_array().unwrap().len(), 1);
        assert_eq!(header["tensors"][0]["nbytes"], 8);
        assert_eq!(bytes.len() - 16 - h, 8);
        assert_eq!(&bytes[16 + h..], &1.0f64.to_le_bytes());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&scalar_container()).unwrap();
        bytes[0] = b'X';
        let err = decode::<f64>(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "bad magic");
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode(&scalar_container()).unwrap();
        let err = decode::<f64>(&bytes[..bytes.len() - 3]).unwrap_err();
        assert_eq!(err.to_string(), "truncated payload");
        assert!(matches!(decode::<f64>(&bytes[..20]), Err(Error::TruncatedHeader)));
    }

    #[test]
    fn nan_payload_rejected() {
        let mut bytes = encode(&scalar_container()).unwrap();
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode::<f64>(&bytes), Err(Error::NonFinite(_))));
    }

    #[test]
    fn dtype_is_checked() {
        let bytes = encode(&scalar_container()).unwrap();
        assert!(matches!(decode::<f32>(&bytes), Err(Error::DType { .. })));
    }

    #[test]
    fn f32_entries_are_padded_to_eight() {
        let mut tensors = BTreeMap::new();
        tensors.insert("a".to_string(), Tensor::vector(vec![1.0f32, 2.0, 3.0]).unwrap());
        tensors.insert("b".to_string(), Tensor::vector(vec![4.0f32]).unwrap());
        let c = Container {
            arch: ToyArchSpec::TINY,
            tensors,
            provenance: "p".into(),
        };
        let bytes = encode(&c).unwrap();
        let header = header_of(&bytes);
        assert_eq!(header["tensors"][0]["nbytes"], 12);
        assert_eq!(header["tensors"][1]["offset"], 16);
        assert_eq!(decode::<f32>(&bytes).unwrap(), c);
    }

    #[test]
    fn shape_arch_mismatch_on_checkpoint_load() {
        let bytes = encode(&scalar_container()).unwrap();
        assert!(matches!(
            decode_checkpoint::<f64>(&bytes),
            Err(Error::ArchMismatch(_))
        ));
    }
}
