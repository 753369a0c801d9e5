//! Checkpoint format.
//!
//! Layout: magic `FCKP`, version byte 0x01, little-endian u32 header
//! length, a JSON header (model spec, band selection, named parameter
//! index), then one little-endian f64 block per parameter in header
//! order. Writes go to a temp file and are renamed into place.

use super::BandSelection;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::params::ParamStore;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FCKP";
const VERSION: u8 = 0x01;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelSpec,
    band: Option<BandSelection>,
    params: Vec<ParamMeta>,
}

pub struct Checkpoint {
    pub model_spec: ModelSpec,
    pub band: Option<BandSelection>,
    pub model: Model,
    pub store: ParamStore,
}

pub fn save_checkpoint(path: &Path, spec: &ModelSpec, band: Option<BandSelection>, store: &ParamStore) -> Result<()> {
    let header = Header {
        model: spec.clone(),
        band,
        params: store
            .entries()
            .iter()
            .map(|e| ParamMeta {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                trainable: e.trainable,
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(9 + header_json.len());
    bytes.extend_from_slice(MAGIC);
    bytes.push(VERSION);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for e in store.entries() {
        for v in e.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("fckp.tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 9 || &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad checkpoint magic (expected FCKP)".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", bytes[4])));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if bytes.len() < 9 + hlen {
        return Err(Error::Format("checkpoint truncated inside header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[9..9 + hlen])?;

    // Rebuild the model to recreate the canonical parameter layout, then
    // overwrite every value from the stored blocks.
    let mut store = ParamStore::new();
    let model = Model::build(&header.model, &mut store, 0)?;
    if store.len() != header.params.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} parameters, model has {}",
            header.params.len(),
            store.len()
        )));
    }
    let mut offset = 9 + hlen;
    for meta in &header.params {
        let id = store
            .id_by_name(&meta.name)
            .ok_or_else(|| Error::Format(format!("checkpoint parameter `{}` not in model", meta.name)))?;
        let t = store.tensor_mut(id);
        if t.shape() != meta.shape.as_slice() {
            return Err(Error::Format(format!(
                "checkpoint parameter `{}` has shape {:?}, model expects {:?}",
                meta.name,
                meta.shape,
                t.shape()
            )));
        }
        let n = t.numel();
        let end = offset + n * 8;
        if bytes.len() < end {
            return Err(Error::Format(format!("checkpoint truncated inside `{}`", meta.name)));
        }
        for (i, chunk) in bytes[offset..end].chunks_exact(8).enumerate() {
            t.data_mut()[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Format("checkpoint has trailing bytes".into()));
    }
    Ok(Checkpoint {
        model_spec: header.model,
        band: header.band,
        model,
        store,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;
    use crate::data::BandId;

    #[test]
    fn roundtrip_preserves_every_value() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fckp");
        let spec = ModelSpec::Backbone({
            let mut b = BackboneSpec::cnn5(32);
            b.channels = [4, 4, 4, 4, 4];
            b
        });
        let mut store = ParamStore::new();
        Model::build(&spec, &mut store, 77).unwrap();
        save_checkpoint(&path, &spec, Some(BandSelection::Band(BandId::B76)), &store).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.band, Some(BandSelection::Band(BandId::B76)));
        assert_eq!(loaded.store.len(), store.len());
        for (a, b) in store.entries().iter().zip(loaded.store.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data(), "param {}", a.name);
        }
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fckp");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
