//! Bit-exact model serialization.
//!
//! Layout: an 8-byte magic string, a little-endian u64 giving the length of
//! a JSON manifest (configuration plus the ordered parameter name/shape
//! list), the manifest itself, then every parameter's f64 values
//! concatenated little-endian in manifest order. Loading re-registers the
//! canonical parameter set from the configuration and fills it by name, so
//! a manifest that is missing, reordering, or misshaping parameters is
//! rejected rather than silently reinterpreted.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SaAsrModel};

const MAGIC: &[u8; 8] = b"SAASRCK1";

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    params: Vec<ParamMeta>,
}

/// Writes `model` to `path`, replacing any existing file.
pub fn save(model: &SaAsrModel, path: &Path) -> Result<()> {
    let manifest = Manifest {
        config: model.config().clone(),
        params: model
            .params()
            .entries()
            .map(|e| ParamMeta { name: e.name.clone(), shape: e.tensor.shape().to_vec() })
            .collect(),
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(
        MAGIC.len() + 8 + manifest_json.len() + 8 * model.params().total_elements(),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    for entry in model.params().entries() {
        for &v in entry.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Reads a model back from `path`; the result is bit-identical to what was
/// saved.
pub fn load(path: &Path) -> Result<SaAsrModel> {
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        let end = off.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| {
            Error::MalformedFile(format!("checkpoint truncated at byte {off}", off = *off))
        })?;
        let s = &bytes[*off..end];
        *off = end;
        Ok(s)
    };

    if take(&mut off, MAGIC.len())? != MAGIC {
        return Err(Error::MalformedFile("not a model checkpoint (bad magic)".into()));
    }
    let len_bytes: [u8; 8] = take(&mut off, 8)?.try_into().expect("8 bytes");
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let manifest: Manifest = serde_json::from_slice(take(&mut off, manifest_len)?)?;
    manifest.config.validate()?;

    // Canonical skeleton for this configuration; the seed is irrelevant
    // because every value is overwritten below.
    let mut model = SaAsrModel::new(manifest.config.clone(), 0)?;
    if manifest.params.len() != model.params().len() {
        return Err(Error::MalformedFile(format!(
            "checkpoint stores {} parameters, the configuration defines {}",
            manifest.params.len(),
            model.params().len()
        )));
    }
    for (i, meta) in manifest.params.iter().enumerate() {
        let entry = model.params().entry(i);
        if meta.name != entry.name {
            return Err(Error::MalformedFile(format!(
                "parameter {i} is '{}' in the checkpoint but '{}' in the configuration",
                meta.name, entry.name
            )));
        }
        if meta.shape != entry.tensor.shape() {
            return Err(Error::MalformedFile(format!(
                "parameter '{}' has shape {:?} in the checkpoint but {:?} in the configuration",
                meta.name,
                meta.shape,
                entry.tensor.shape()
            )));
        }
        let count: usize = meta.shape.iter().product();
        let raw = take(&mut off, 8 * count)?;
        let mut data = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
        }
        let dst = model.params_mut().tensor_mut(i);
        dst.data_mut().copy_from_slice(&data);
    }
    if off != bytes.len() {
        return Err(Error::MalformedFile(format!(
            "{} trailing bytes after the last parameter",
            bytes.len() - off
        )));
    }
    Ok(model)
}
