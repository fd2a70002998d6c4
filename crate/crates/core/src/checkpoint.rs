//! Binary checkpoints of named tensors.
//!
//! Layout: the 8-byte magic `CRDTCKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, a UTF-8 JSON header, then the tensor
//! payloads back to back as little-endian floats of the header's dtype.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParamTree;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CRDTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn width(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Checkpoint(format!("unsupported dtype '{other}'"))),
    }
}

pub fn encode<T: Scalar>(tensors: &[(String, &Tensor<T>)], meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header {
        dtype: T::NAME.to_string(),
        tensors: entries,
        meta,
    })?;
    let w = width(T::NAME)?;
    let mut out = Vec::with_capacity(20 + header.len() + offset * w);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            let v = v.to_f64().unwrap_or(f64::NAN);
            if w == 4 {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parses a checkpoint into its header and named tensors.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Header, Vec<(String, Tensor<T>)>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body])?;
    let w = width(&header.dtype)?;
    let payload = &bytes[body..];
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset * w;
        let end = start + n * w;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("tensor '{}' is truncated", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(w)
            .map(|c| {
                let v = if w == 4 {
                    f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64
                } else {
                    f64::from_le_bytes(c.try_into().expect("8 bytes"))
                };
                T::lit(v)
            })
            .collect();
        out.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }
    Ok((header, out))
}

/// Overwrites every tensor of `tree` from a decoded checkpoint. Names and
/// shapes must match exactly.
pub fn load_into<T: Scalar, P: ParamTree<T>>(
    tree: &mut P,
    tensors: Vec<(String, Tensor<T>)>,
) -> Result<()> {
    let mut slots = tree.tensors_mut();
    if slots.len() != tensors.len() {
        return Err(Error::KeyMismatch(format!(
            "checkpoint has {} tensors, target has {}",
            tensors.len(),
            slots.len()
        )));
    }
    for ((name, slot), (cname, t)) in slots.iter_mut().zip(tensors) {
        if *name != cname {
            return Err(Error::KeyMismatch(format!("expected '{name}', found '{cname}'")));
        }
        slot.same_shape(&t, "checkpoint")?;
        **slot = t;
    }
    Ok(())
}

pub fn save<T: Scalar, P: ParamTree<T>>(
    path: &std::path::Path,
    tree: &P,
    meta: serde_json::Value,
) -> Result<()> {
    std::fs::write(path, encode(&tree.tensors(), meta)?)?;
    Ok(())
}

pub fn load<T: Scalar, P: ParamTree<T>>(path: &std::path::Path, tree: &mut P) -> Result<serde_json::Value> {
    let (header, tensors) = decode(&std::fs::read(path)?)?;
    load_into(tree, tensors)?;
    Ok(header.meta)
}
