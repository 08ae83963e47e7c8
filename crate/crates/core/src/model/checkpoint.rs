//! Single-file checkpoints: parameters as safetensors, with the model config,
//! its hash and the standardization stored in the header metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::Device;

use super::{build_model, ModelConfig, ModelError, MtlModel, Standardization};

pub const CHECKPOINT_FORMAT: &str = "adas-mtl-checkpoint/1";

pub fn save_checkpoint(model: &MtlModel, path: &Path) -> Result<(), ModelError> {
    let config = serde_json::to_string(model.config()).expect("config serializes");
    let standardization = serde_json::to_string(model.standardization()).expect("standardization serializes");
    let metadata = HashMap::from([
        ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
        ("config".to_string(), config),
        ("config_hash".to_string(), model.config().hash()),
        ("standardization".to_string(), standardization),
    ]);
    let tensors: Vec<(&str, &candle_core::Tensor)> =
        model.store.vars.iter().map(|(k, v)| (k.as_str(), v.as_tensor())).collect();
    safetensors::serialize_to_file(tensors, Some(metadata), path)?;
    Ok(())
}

/// Restores a checkpoint. With `expected`, the stored config hash must match it.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<MtlModel, ModelError> {
    let bytes = std::fs::read(path)?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| ModelError::Checkpoint("missing metadata".into()))?;
    let field = |k: &str| {
        meta.get(k)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing metadata field `{k}`")))
    };
    if field("format")? != CHECKPOINT_FORMAT {
        return Err(ModelError::Checkpoint(format!("unsupported format `{}`", field("format")?)));
    }
    let config: ModelConfig = serde_json::from_str(field("config")?)
        .map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
    let stored_hash = field("config_hash")?;
    if &config.hash() != stored_hash {
        return Err(ModelError::Checkpoint("config does not match its recorded hash".into()));
    }
    if let Some(exp) = expected {
        if &exp.hash() != stored_hash {
            return Err(ModelError::Checkpoint(format!(
                "config hash {stored_hash} differs from expected {}",
                exp.hash()
            )));
        }
    }
    let standardization: Standardization = serde_json::from_str(field("standardization")?)
        .map_err(|e| ModelError::Checkpoint(format!("standardization: {e}")))?;

    let mut model = build_model(&config)?;
    model.set_standardization(standardization)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    if tensors.len() != model.store.vars.len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} tensors, found {}",
            model.store.vars.len(),
            tensors.len()
        )));
    }
    for name in model.store.vars.keys() {
        let t = tensors
            .get(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor `{name}`")))?;
        model.set_parameter(name, t)?;
    }
    Ok(model)
}
