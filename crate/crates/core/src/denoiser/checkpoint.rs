use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::network::{DenoiserModel, ModelConfig};
use super::params::{ParamSet, Tensor};
use super::train::TrainConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    /// Loss of the all-zero predictor over the same batches as `final_loss`.
    #[serde(default)]
    pub null_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

/// Raw and averaged weights of a trained denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub params: ParamSet,
    pub ema: ParamSet,
    pub meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
struct EncodedTensor {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: CheckpointConfig,
    tensors: Vec<EncodedTensor>,
    ema_tensors: Vec<EncodedTensor>,
    train_meta: TrainMeta,
}

fn encode(params: &ParamSet) -> Vec<EncodedTensor> {
    params
        .tensors
        .iter()
        .map(|t| {
            let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            EncodedTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: STANDARD.encode(bytes),
            }
        })
        .collect()
}

fn decode(tensors: Vec<EncodedTensor>) -> Result<ParamSet> {
    let tensors = tensors
        .into_iter()
        .map(|t| {
            let bytes = STANDARD
                .decode(t.data.as_bytes())
                .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", t.name)))?;
            let expected: usize = t.shape.iter().product();
            if bytes.len() != expected * 8 {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` holds {} bytes, shape needs {}",
                    t.name,
                    bytes.len(),
                    expected * 8
                )));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect();
            Ok(Tensor {
                name: t.name,
                shape: t.shape,
                data,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamSet { tensors })
}

impl Checkpoint {
    /// Model built from the averaged weights, the default for evaluation.
    pub fn model(&self) -> Result<DenoiserModel> {
        DenoiserModel::from_params(&self.model_config, self.ema.clone())
    }

    pub fn raw_model(&self) -> Result<DenoiserModel> {
        DenoiserModel::from_params(&self.model_config, self.params.clone())
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = CheckpointFile {
            config: CheckpointConfig {
                model: self.model_config.clone(),
                train: self.train_config.clone(),
            },
            tensors: encode(&self.params),
            ema_tensors: encode(&self.ema),
            train_meta: self.meta.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let params = decode(file.tensors)?;
        let ema = decode(file.ema_tensors)?;
        let ckpt = Checkpoint {
            model_config: file.config.model,
            train_config: file.config.train,
            params,
            ema,
            meta: file.train_meta,
        };
        ckpt.raw_model()
            .and_then(|_| ckpt.model())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::CheckpointMissing(path.to_path_buf()));
        }
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Wraps an untrained model, with identical raw and averaged weights.
    pub fn from_model(model: &DenoiserModel) -> Self {
        Self {
            model_config: model.config().clone(),
            train_config: None,
            params: model.params().clone(),
            ema: model.params().clone(),
            meta: TrainMeta {
                seed: 0,
                steps: 0,
                final_loss: 0.0,
                null_loss: 0.0,
            },
        }
    }
}
