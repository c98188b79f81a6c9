//! Self-describing safetensors checkpoints: weights plus a metadata header
//! carrying the format version, the model kind and its JSON config.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::error::{Error, Result};

pub const FORMAT: &str = "rgbx";
pub const VERSION: &str = "1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: String,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn save(path: &Path, kind: &str, config_json: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let meta: HashMap<String, String> = [("format", FORMAT), ("version", VERSION), ("kind", kind), ("config", config_json)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let contiguous: Vec<(String, Tensor)> = tensors.iter().map(|(k, t)| Ok((k.clone(), t.contiguous()?))).collect::<Result<_>>()?;
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(contiguous.iter().map(|(k, t)| (k.as_str(), t)), Some(meta), &tmp).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path, expected_kind: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("checkpoint {} not found", path.display())));
    }
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("{} lacks `{k}` metadata", path.display())));
    if field("format")? != FORMAT || field("version")? != VERSION {
        return Err(Error::Checkpoint(format!("{} is not a version-{VERSION} {FORMAT} checkpoint", path.display())));
    }
    let kind = field("kind")?;
    if kind != expected_kind {
        return Err(Error::Checkpoint(format!("{} holds a `{kind}` checkpoint, expected `{expected_kind}`", path.display())));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?.into_iter().collect();
    Ok(Checkpoint { kind, config: field("config")?, tensors })
}
