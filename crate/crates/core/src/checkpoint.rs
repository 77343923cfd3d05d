//! Named-tensor container file: magic `MCLP`, a version byte, a
//! length-prefixed JSON metadata block, then the tensors in name order.

use std::path::Path;

use crate::data::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::params::ParamSet;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"MCLP";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Serialize metadata and tensors. Output is a pure function of the inputs.
pub fn encode<T: Real>(metadata: &serde_json::Value, tensors: &ParamSet<T>) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u8(CHECKPOINT_VERSION);
    let meta = serde_json::to_vec(metadata).map_err(|e| Error::Format(e.to_string()))?;
    w.u32(meta.len() as u32);
    w.0.extend_from_slice(&meta);
    w.u64(tensors.len() as u64);
    for (name, t) in tensors.iter() {
        w.str(name);
        w.u8(T::DTYPE_CODE);
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        for v in t.data() {
            v.write_le(&mut w.0);
        }
    }
    Ok(w.0)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<(serde_json::Value, ParamSet<T>)> {
    let mut r = Reader::new(bytes);
    if r.bytes(4).map_err(|_| Error::Format("not a checkpoint: too short".into()))? != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = r.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (this build reads version {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = r.u32()? as usize;
    let metadata = serde_json::from_slice(r.bytes(meta_len)?)
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let count = r.u64()?;
    let mut tensors = ParamSet::new();
    for _ in 0..count {
        let name = r.str()?;
        let dtype = r.u8()?;
        if dtype != T::DTYPE_CODE {
            return Err(Error::Format(format!(
                "tensor `{name}` has dtype code {dtype}, expected {}",
                T::DTYPE_CODE
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let raw = r.bytes(len.checked_mul(T::BYTES).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        tensors.insert(name, tensor)?;
    }
    r.finish()?;
    Ok((metadata, tensors))
}

pub fn write_file<T: Real>(path: &Path, metadata: &serde_json::Value, tensors: &ParamSet<T>) -> Result<()> {
    let bytes = encode(metadata, tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file<T: Real>(path: &Path) -> Result<(serde_json::Value, ParamSet<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Compare two configs field by field, reporting the first differing path.
pub fn check_config(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
    let a = serde_json::to_value(expected).map_err(|e| Error::Format(e.to_string()))?;
    let b = serde_json::to_value(found).map_err(|e| Error::Format(e.to_string()))?;
    match first_difference(&a, &b, String::new()) {
        None => Ok(()),
        Some((field, x, y)) => Err(Error::ConfigMismatch {
            field,
            expected: x,
            found: y,
        }),
    }
}

fn first_difference(a: &serde_json::Value, b: &serde_json::Value, path: String) -> Option<(String, String, String)> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, va) in x {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match y.get(k) {
                    Some(vb) => {
                        if let Some(d) = first_difference(va, vb, sub) {
                            return Some(d);
                        }
                    }
                    None => return Some((sub, va.to_string(), "nothing".into())),
                }
            }
            None
        }
        _ if a == b => None,
        _ => Some((path, a.to_string(), b.to_string())),
    }
}

/// Model-only checkpoint: the config as metadata plus every parameter.
pub fn save_model<T: Real>(path: &Path, model: &ModelParams<T>) -> Result<()> {
    let meta = serde_json::json!({ "model": model.config });
    write_file(path, &meta, &model.params)
}

/// Loads parameters written by [`save_model`] or by the trainer; optimizer
/// and momentum entries are ignored.
pub fn load_model<T: Real>(path: &Path) -> Result<ModelParams<T>> {
    let (meta, tensors) = read_file::<T>(path)?;
    let config: ModelConfig = serde_json::from_value(meta.get("model").cloned().unwrap_or_default())
        .map_err(|e| Error::Format(format!("checkpoint model config: {e}")))?;
    let params: ParamSet<T> = tensors
        .iter()
        .filter(|(n, _)| !n.starts_with("adam.") && !n.starts_with("momentum."))
        .map(|(n, t)| (n.to_string(), (**t).clone()))
        .collect();
    let model = ModelParams { config, params };
    check_shapes(&model)?;
    Ok(model)
}

/// Every tensor named by the config must be present with the shape the config implies.
pub fn check_shapes<T: Real>(model: &ModelParams<T>) -> Result<()> {
    let reference = ModelParams::<T>::init(model.config.clone(), &mut crate::rng::Rng::new(0))?;
    for (name, t) in reference.params.iter() {
        let found = model.params.get(name).ok_or_else(|| Error::KeyMismatch(format!("checkpoint lacks `{name}`")))?;
        if found.shape() != t.shape() {
            return Err(Error::ConfigMismatch {
                field: name.to_string(),
                expected: format!("{:?}", t.shape()),
                found: format!("{:?}", found.shape()),
            });
        }
    }
    if model.params.len() != reference.params.len() {
        let extra = model.params.names().find(|n| !reference.params.contains(n)).unwrap_or("?");
        return Err(Error::KeyMismatch(format!("unexpected tensor `{extra}`")));
    }
    Ok(())
}
