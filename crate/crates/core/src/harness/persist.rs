//! `XSNN` model container: magic, LE u32 version, LE u64 header length, JSON
//! header, then little-endian f32 tensor payloads.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::atomic_write;
use crate::numerics::Tensor;
use crate::snn::{Model, NetworkSpec};

pub const MAGIC: &[u8; 4] = b"XSNN";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload section.
    offset: u64,
    /// Payload bytes.
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: NetworkSpec,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// Serializes a model. Every tensor must hold f32-representable values.
pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let mut entries = Vec::with_capacity(model.tensors.len());
    let mut payload = Vec::new();
    for (name, t) in &model.tensors {
        if !t.is_f32_exact() {
            return Err(Error::Format(format!(
                "tensor `{name}` has values not representable as f32"
            )));
        }
        let offset = payload.len() as u64;
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            length: payload.len() as u64 - offset,
        });
    }
    let header = serde_json::to_vec(&Header {
        spec: model.spec.clone(),
        metadata: model.metadata.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Format(format!(
            "{} bytes is shorter than the preamble",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not an XSNN container".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| Error::Format(format!("header length {header_len} exceeds the file")))?
        as usize;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])?;
    let payload = &bytes[header_end..];
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        if e.dtype != "f32" {
            return Err(Error::Format(format!(
                "tensor `{}` has unsupported dtype `{}`",
                e.name, e.dtype
            )));
        }
        let n: usize = e.shape.iter().product();
        if e.length != 4 * n as u64 {
            return Err(Error::Format(format!(
                "tensor `{}`: length {} does not match shape {:?}",
                e.name, e.length, e.shape
            )));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|&end| end <= payload.len() as u64)
            .ok_or_else(|| {
                Error::Format(format!(
                    "tensor `{}` at offset {} (+{}) runs past the {}-byte payload",
                    e.name,
                    e.offset,
                    e.length,
                    payload.len()
                ))
            })?;
        let data = payload[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        if tensors
            .insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?)
            .is_some()
        {
            return Err(Error::Format(format!("tensor `{}` listed twice", e.name)));
        }
    }
    let model = Model {
        spec: header.spec,
        tensors,
        metadata: header.metadata,
    };
    model.validate()?;
    Ok(model)
}

/// Writes `model` to `path` atomically.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    atomic_write(path, &model_to_bytes(model)?)
}

pub fn load_model(path: &Path) -> Result<Model> {
    model_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::{ann_to_snn, build_ann, ArchitectureConfig, SnnOptions};

    fn model() -> Model {
        let ann = build_ann(&ArchitectureConfig::vgg5(2, 3, 8), "mnist", [1, 8, 8], 4).unwrap();
        let mut m = Model::init(ann_to_snn(&ann, &SnnOptions::bntt(3)).unwrap(), 5).unwrap();
        m.set_threshold(1, 0.123456789012345).unwrap();
        m.metadata.insert("note".into(), "héllo, \"quoted\"".into());
        m.tensors.get_mut("conv1_bn.running_mean").unwrap().data_mut()[2] = f64::from(-1.5e-30f32);
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let back = model_from_bytes(&model_to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        for (name, t) in &m.tensors {
            let bits: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let got: Vec<u64> = back.tensors[name].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, got);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.xsnn");
        save_model(&model(), &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), model());
    }

    #[test]
    fn layout_of_the_preamble() {
        let bytes = model_to_bytes(&model()).unwrap();
        assert_eq!(&bytes[..4], b"XSNN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hl]).unwrap();
        let total: u64 = header["tensors"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["length"].as_u64().unwrap())
            .sum();
        assert_eq!(16 + hl + total as usize, bytes.len());
    }

    #[test]
    fn truncation_is_an_error() {
        let bytes = model_to_bytes(&model()).unwrap();
        for cut in [0, 3, 10, 16, 40, bytes.len() - 1] {
            assert!(model_from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = model_to_bytes(&model()).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            model_from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 2, supported: 1 })
        ));
        bytes[0] = b'Y';
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn non_f32_values_refused() {
        let mut m = model();
        m.tensors.get_mut("fc1.weight").unwrap().data_mut()[0] = 0.1;
        assert!(model_to_bytes(&m).is_err());
    }
}
