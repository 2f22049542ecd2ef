//! `CPAD1` checkpoint container.
//!
//! Layout: the 5-byte magic `CPAD1`, a little-endian `u32` header length, a JSON
//! header `{config, tensors: [{name, shape, offset}], meta}` and the tensor data as
//! little-endian `f32`. Offsets are in bytes from the start of the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::net::{CpadNet, ModelConfig};

pub const MAGIC: &[u8; 5] = b"CPAD1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (training iteration, seed, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn to_bytes<T: Real>(net: &CpadNet<T>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(net.params().len());
    let mut offset = 0;
    for (name, t) in net.names().iter().zip(net.params()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len();
    }
    let header = serde_json::to_vec(&Header {
        config: net.config().clone(),
        tensors,
        meta,
    })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in net.params() {
        for &v in t.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<(CpadNet<T>, Header)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing CPAD1 magic"));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let data_start = 9 + hlen;
    if bytes.len() < data_start {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[9..data_start])?;
    let data = &bytes[data_start..];
    let mut named = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if end > data.len() {
            return Err(Error::Checkpoint(format!("tensor {} runs past end of data", e.name)));
        }
        let vals = data[e.offset..end]
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        named.push((e.name.clone(), Tensor::new(&e.shape, vals)?));
    }
    let net = CpadNet::from_parts(header.config.clone(), named)?;
    Ok((net, header))
}

pub fn save<T: Real>(path: &Path, net: &CpadNet<T>, meta: serde_json::Value) -> Result<()> {
    fs::write(path, to_bytes(net, meta)?)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<(CpadNet<T>, Header)> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_for_f32() {
        let mut net = CpadNet::<f32>::new(ModelConfig::desk(), 4).unwrap();
        net.perturb(0.1, 1);
        let bytes = to_bytes(&net, serde_json::json!({"iter": 7})).unwrap();
        assert_eq!(&bytes[..5], b"CPAD1");
        let (back, header) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(header.meta["iter"], 7);
        assert_eq!(to_bytes(&back, header.meta).unwrap(), bytes);
    }

    #[test]
    fn header_is_readable_json_with_offsets() {
        let net = CpadNet::<f32>::new(ModelConfig::desk().baseline(), 0).unwrap();
        let bytes = to_bytes(&net, serde_json::Value::Null).unwrap();
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[9..9 + hlen]).unwrap();
        let tensors = header["tensors"].as_array().unwrap();
        assert_eq!(tensors[0]["name"], "intro.weight");
        assert_eq!(tensors[1]["offset"], 4 * 8 * 3 * 9);
        assert_eq!(bytes.len(), 9 + hlen + 4 * net.param_count());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let net = CpadNet::<f32>::new(ModelConfig::desk(), 0).unwrap();
        let bytes = to_bytes(&net, serde_json::Value::Null).unwrap();
        assert!(matches!(from_bytes::<f32>(b"NOPE1xxxx"), Err(Error::Checkpoint(_))));
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 4]).is_err());
        let mut wrong = bytes.clone();
        wrong[9] = b'[';
        assert!(from_bytes::<f32>(&wrong).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.cpad");
        let net = CpadNet::<f32>::new(ModelConfig::desk(), 2).unwrap();
        save(&p, &net, serde_json::Value::Null).unwrap();
        assert_eq!(load::<f32>(&p).unwrap().0.params(), net.params());
    }
}
