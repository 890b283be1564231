//! Model checkpoints: parameters as MTS1 tensors, with `t0`, the branch
//! list, the training config and its digest in the metadata block.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::TensorFile;
use crate::error::{Error, Result};
use crate::net::{Branch, MaskTsModel, Param, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    t0: f32,
    branches: Vec<String>,
    /// Parameter names in canonical order; tensors are stored by name.
    params: Vec<String>,
    config: TrainConfig,
    config_digest: String,
}

pub fn encode_checkpoint(model: &MaskTsModel, cfg: &TrainConfig) -> Result<TensorFile> {
    let meta = CheckpointMeta {
        t0: model.t0(),
        branches: model.branches().iter().map(|b| b.name().to_string()).collect(),
        params: model.params().iter().map(|p| p.name.clone()).collect(),
        config: cfg.clone(),
        config_digest: cfg.digest(),
    };
    let tensors: BTreeMap<_, _> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    Ok(TensorFile::new(tensors).with_meta(serde_json::to_value(meta)?))
}

pub fn decode_checkpoint(mut file: TensorFile) -> Result<(MaskTsModel, TrainConfig)> {
    let meta = file
        .meta
        .take()
        .ok_or_else(|| Error::format(8, "checkpoint has no metadata block"))?;
    let meta: CheckpointMeta = serde_json::from_value(meta)
        .map_err(|e| Error::format(8, format!("checkpoint metadata: {e}")))?;
    if meta.config.digest() != meta.config_digest {
        return Err(Error::format(8, "checkpoint config digest does not match its config"));
    }
    let branches = meta
        .branches
        .iter()
        .map(|n| Branch::from_name(n).ok_or_else(|| Error::format(8, format!("unknown branch `{n}`"))))
        .collect::<Result<Vec<_>>>()?;
    let params = meta
        .params
        .iter()
        .map(|name| {
            let value = file
                .tensors
                .remove(name)
                .ok_or_else(|| Error::format(8, format!("checkpoint is missing `{name}`")))?;
            Ok(Param {
                name: name.clone(),
                value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = MaskTsModel::from_params(&branches, meta.t0, params)?;
    Ok((model, meta.config))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &MaskTsModel, cfg: &TrainConfig) -> Result<()> {
    encode_checkpoint(model, cfg)?.write(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MaskTsModel, TrainConfig)> {
    decode_checkpoint(TensorFile::read(path)?)
}
