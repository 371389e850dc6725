//! `COCK` checkpoint files.
//!
//! Little-endian: magic `COCK`, `u32` version (1), `u32` metadata length, the
//! metadata as UTF-8 JSON, then one record per parameter in forward order:
//! `u32` name length, name bytes, `u32` rank, `u32` dims, `f64` values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::zoo::{Model, ModelSpec};
use crate::error::{CocaError, Result};
use crate::shiftgen::Reader;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"COCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub seed: u64,
    pub param_count: usize,
    /// Free-form annotations such as a model id or the source task.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

pub fn encode_checkpoint(
    model: &Model,
    extra: &BTreeMap<String, serde_json::Value>,
) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        spec: model.spec().clone(),
        seed: model.seed(),
        param_count: model.param_count(),
        extra: extra.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(
        12 + json.len() + 8 * model.param_count() + 64 * model.param_names().len(),
    );
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in model.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(Model, CheckpointMeta)> {
    let mut r = Reader::new(bytes, path);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(CocaError::format(path, "not a COCK checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CocaError::format(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)
        .map_err(|e| CocaError::format(path, format!("bad checkpoint metadata: {e}")))?;
    let mut model = Model::build(meta.spec.clone(), meta.seed)
        .map_err(|e| CocaError::format(path, format!("checkpoint spec rejected: {e}")))?;
    if model.param_count() != meta.param_count {
        return Err(CocaError::format(
            path,
            format!(
                "metadata says {} parameters, spec has {}",
                meta.param_count,
                model.param_count()
            ),
        ));
    }
    let names = model.param_names().to_vec();
    for expected in &names {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| CocaError::format(path, "parameter name is not UTF-8"))?;
        if name != expected {
            return Err(CocaError::format(
                path,
                format!("expected parameter {expected}, found {name}"),
            ));
        }
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let want = model
            .param(expected)
            .expect("name from model")
            .shape()
            .to_vec();
        if dims != want {
            return Err(CocaError::format(
                path,
                format!("{name} has shape {dims:?}, spec wants {want:?}"),
            ));
        }
        let count: usize = dims.iter().product();
        let values: Vec<f64> = (0..count).map(|_| r.f64()).collect::<Result<_>>()?;
        model.set_param(expected, &values)?;
    }
    r.finish()?;
    Ok((model, meta))
}

/// Writes through a temporary sibling and renames it into place.
pub fn save_checkpoint(
    model: &Model,
    extra: &BTreeMap<String, serde_json::Value>,
    path: &Path,
) -> Result<()> {
    let bytes = encode_checkpoint(model, extra)?;
    crate::io_util::write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| CocaError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
