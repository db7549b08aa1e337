//! Single-file checkpoints: parameters, optimizer moments and run metadata in
//! one safetensors archive.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle::Tensor;
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DualBranchModel, ModelConfig};
use crate::nn::ParamStore;
use crate::optim::Moments;

const FORMAT: &str = "adc-checkpoint-v1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointMeta {
    /// Completed optimizer steps.
    pub step: usize,
    /// Hash of the experiment config that produced the checkpoint.
    pub config_hash: String,
    pub version: String,
    /// Free-form JSON payloads, e.g. the training config.
    pub extra: BTreeMap<String, String>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes parameters (and optionally optimizer moments) to `path`.
pub fn save(
    path: &Path,
    arch: &ModelConfig,
    params: &ParamStore,
    moments: Option<&BTreeMap<String, Moments>>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, var) in params.iter() {
        tensors.push((format!("param/{name}"), var.as_tensor().detach()));
    }
    let mut adam_steps = BTreeMap::new();
    if let Some(moments) = moments {
        for (name, m) in moments {
            tensors.push((format!("adam_m/{name}"), m.m.clone()));
            tensors.push((format!("adam_v/{name}"), m.v.clone()));
            adam_steps.insert(name.clone(), m.steps);
        }
    }
    let mut info = HashMap::new();
    info.insert("format".to_string(), FORMAT.to_string());
    info.insert("model_config".into(), serde_json::to_string(arch).expect("serializable"));
    info.insert("arch_hash".into(), arch.hash());
    info.insert("config_hash".into(), meta.config_hash.clone());
    info.insert("version".into(), meta.version.clone());
    info.insert("step".into(), meta.step.to_string());
    info.insert("adam_steps".into(), serde_json::to_string(&adam_steps).expect("serializable"));
    info.insert("extra".into(), serde_json::to_string(&meta.extra).expect("serializable"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(info), &tmp)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub path: PathBuf,
    pub model_config: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: HashMap<String, Tensor>,
    pub moments: BTreeMap<String, Moments>,
}

pub fn load(path: &Path, device: &candle::Device) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let info = header.metadata().clone().unwrap_or_default();
    if info.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(ckpt_err(path, "not a checkpoint written by this tool"));
    }
    let field = |k: &str| info.get(k).cloned().ok_or_else(|| ckpt_err(path, format!("missing `{k}`")));
    let model_config: ModelConfig =
        serde_json::from_str(&field("model_config")?).map_err(|e| ckpt_err(path, e.to_string()))?;
    if model_config.hash() != field("arch_hash")? {
        return Err(ckpt_err(path, "architecture hash does not match stored config"));
    }
    let adam_steps: BTreeMap<String, u64> =
        serde_json::from_str(&field("adam_steps")?).map_err(|e| ckpt_err(path, e.to_string()))?;
    let extra = serde_json::from_str(&field("extra")?).map_err(|e| ckpt_err(path, e.to_string()))?;
    let meta = CheckpointMeta {
        step: field("step")?.parse().map_err(|_| ckpt_err(path, "bad step"))?,
        config_hash: field("config_hash")?,
        version: field("version")?,
        extra,
    };
    let all = candle::safetensors::load_buffer(&bytes, device)?;
    let mut params = HashMap::new();
    let mut m_map = HashMap::new();
    let mut v_map = HashMap::new();
    for (k, t) in all {
        if let Some(n) = k.strip_prefix("param/") {
            params.insert(n.to_string(), t);
        } else if let Some(n) = k.strip_prefix("adam_m/") {
            m_map.insert(n.to_string(), t);
        } else if let Some(n) = k.strip_prefix("adam_v/") {
            v_map.insert(n.to_string(), t);
        }
    }
    let mut moments = BTreeMap::new();
    for (name, steps) in adam_steps {
        let m = m_map.remove(&name).ok_or_else(|| ckpt_err(path, format!("missing moment {name}")))?;
        let v = v_map.remove(&name).ok_or_else(|| ckpt_err(path, format!("missing moment {name}")))?;
        moments.insert(name, Moments { m, v, steps });
    }
    Ok(LoadedCheckpoint {
        path: path.to_path_buf(),
        model_config,
        meta,
        params,
        moments,
    })
}

impl LoadedCheckpoint {
    /// Copies parameters into `store`; the architecture must match exactly.
    pub fn restore_into(&self, runtime: &ModelConfig, store: &ParamStore) -> Result<()> {
        if runtime != &self.model_config {
            return Err(ckpt_err(
                &self.path,
                format!(
                    "architecture mismatch: checkpoint {} vs runtime {}",
                    self.model_config.hash(),
                    runtime.hash()
                ),
            ));
        }
        if self.params.len() != store.len() {
            return Err(ckpt_err(&self.path, "parameter count mismatch"));
        }
        for (name, var) in store.iter() {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| ckpt_err(&self.path, format!("missing parameter {name}")))?;
            var.set(&t.to_dtype(store.dtype())?)?;
        }
        Ok(())
    }

    /// Builds a model from the stored configuration and parameters.
    pub fn into_model(&self, dtype: candle::DType, device: &candle::Device) -> Result<DualBranchModel> {
        let model = DualBranchModel::new(&self.model_config, 0, dtype, device)?;
        self.restore_into(&self.model_config, model.params())?;
        Ok(model)
    }
}

/// SHA-256 of the checkpoint file, for provenance manifests.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
