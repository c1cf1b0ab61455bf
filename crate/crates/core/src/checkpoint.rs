//! Checkpoints: one safetensors file with parameters, buffers and optimizer
//! moments, plus string metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ReidModel};
use crate::optim::Adam;
use crate::seed::fnv1a;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Hash of everything that fixes the network's shape.
pub fn config_hash(model: &ModelConfig) -> String {
    let json = serde_json::to_string(model).expect("model config serializes");
    format!("{:016x}", fnv1a(json.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub step: u64,
    pub adam_t: u64,
    pub best_map: f64,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

const META_KEY: &str = "ccreid";

/// Writes atomically: a temporary sibling is renamed over `path`.
pub fn save_checkpoint(path: &Path, model: &ReidModel, adam: Option<&Adam>, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, var) in model.store().params() {
        tensors.push((format!("param/{name}"), var.as_tensor().clone()));
    }
    for (name, t) in model.store().buffers() {
        tensors.push((format!("buffer/{name}"), t));
    }
    if let Some(adam) = adam {
        let (m, v) = adam.state();
        tensors.extend(m.iter().map(|(k, t)| (format!("adam_m/{k}"), t.clone())));
        tensors.extend(v.iter().map(|(k, t)| (format!("adam_v/{k}"), t.clone())));
    }
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(tensors, Some(info), &tmp)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} has no run metadata", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            meta.version
        )));
    }
    let all = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let mut ck = Checkpoint {
        meta,
        params: BTreeMap::new(),
        buffers: BTreeMap::new(),
        adam_m: BTreeMap::new(),
        adam_v: BTreeMap::new(),
    };
    for (key, t) in all {
        let (kind, name) = key
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {key}")))?;
        let slot = match kind {
            "param" => &mut ck.params,
            "buffer" => &mut ck.buffers,
            "adam_m" => &mut ck.adam_m,
            "adam_v" => &mut ck.adam_v,
            _ => return Err(Error::Checkpoint(format!("unexpected tensor {key}"))),
        };
        slot.insert(name.to_string(), t);
    }
    Ok(ck)
}

/// Loads weights into `model`, refusing a checkpoint built for another configuration.
pub fn restore_model(model: &ReidModel, ck: &Checkpoint) -> Result<()> {
    let expected = config_hash(model.config());
    if ck.meta.config_hash != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint config hash {} does not match this configuration ({expected}); \
             the checkpoint was trained with {:?}, this run builds {:?}",
            ck.meta.config_hash,
            ck.meta.model,
            model.config()
        )));
    }
    model.store().load(&ck.params, &ck.buffers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedStream;
    use candle_core::DType;

    fn model(ids: usize, seed: u64) -> ReidModel {
        let cfg = ModelConfig {
            num_identities: ids,
            num_clothes_classes: 4,
            ..ModelConfig::default()
        };
        ReidModel::new(cfg, DType::F32, SeedStream::new(seed)).unwrap()
    }

    fn meta(m: &ReidModel) -> CheckpointMeta {
        CheckpointMeta {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash(m.config()),
            model: m.config().clone(),
            epoch: 3,
            step: 12,
            adam_t: 12,
            best_map: 0.25,
        }
    }

    #[test]
    fn round_trip_restores_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let a = model(2, 1);
        save_checkpoint(&path, &a, None, &meta(&a)).unwrap();
        let b = model(2, 2);
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.meta, meta(&a));
        restore_model(&b, &ck).unwrap();
        for (name, var) in a.store().params() {
            let other = &b.store().params()[name];
            let d = (var.as_tensor() - other.as_tensor())
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap();
            assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0, "{name}");
        }
    }

    #[test]
    fn hash_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let a = model(2, 1);
        save_checkpoint(&path, &a, None, &meta(&a)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert!(matches!(restore_model(&model(3, 1), &ck), Err(Error::Checkpoint(_))));
    }
}
