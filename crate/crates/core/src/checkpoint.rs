//! Single-file JSON checkpoints: model config, normalization policy,
//! trainable parameters and batch-norm running statistics, all stamped
//! with a digest of the originating config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clsmodel::{ClsModel, ClsModelConfig};
use crate::dataio::{LesionClass, NormalizationPolicy};
use crate::error::{Error, Result};
use crate::segmodel::{SegModel, SegModelConfig};
use crate::tensor::TensorData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Segmentation,
    Classification,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// The model config as JSON, kept generic over the two model types.
    pub model_config: serde_json::Value,
    pub normalization: NormalizationPolicy,
    pub config_digest: String,
    pub seed: u64,
    /// Class names in index order (classification checkpoints).
    pub class_names: Vec<String>,
    pub param_names: Vec<String>,
    pub params: Vec<TensorData>,
    pub state_names: Vec<String>,
    pub state: Vec<TensorData>,
}

/// Content hash of any serializable config, hex-encoded SHA-256 prefix.
pub fn config_digest<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).unwrap_or_default();
    let hash = Sha256::digest(json.as_bytes());
    hash.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

fn to_json<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    serde_json::to_value(value).map_err(|e| Error::Checkpoint(format!("serialize config: {e}")))
}

impl Checkpoint {
    pub fn from_seg(
        model: &SegModel,
        normalization: NormalizationPolicy,
        seed: u64,
    ) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CheckpointKind::Segmentation,
            model_config: to_json(&model.config)?,
            normalization,
            config_digest: config_digest(&model.config),
            seed,
            class_names: Vec::new(),
            param_names: (0..model.params.len())
                .map(|i| model.params.name(i).to_string())
                .collect(),
            params: model.params.values().iter().map(TensorData::from_tensor).collect(),
            state_names: (0..model.state.len())
                .map(|i| model.state.name(i).to_string())
                .collect(),
            state: model.state.values().iter().map(TensorData::from_tensor).collect(),
        })
    }

    pub fn from_cls(
        model: &ClsModel,
        normalization: NormalizationPolicy,
        seed: u64,
    ) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CheckpointKind::Classification,
            model_config: to_json(&model.config)?,
            normalization,
            config_digest: config_digest(&model.config),
            seed,
            class_names: LesionClass::ALL.iter().map(|c| c.to_string()).collect(),
            param_names: (0..model.params.len())
                .map(|i| model.params.name(i).to_string())
                .collect(),
            params: model.params.values().iter().map(TensorData::from_tensor).collect(),
            state_names: (0..model.state.len())
                .map(|i| model.state.name(i).to_string())
                .collect(),
            state: model.state.values().iter().map(TensorData::from_tensor).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Checkpoint(format!("serialize checkpoint: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("parse checkpoint {}: {e}", path.display())))
    }

    /// Refuse evaluation under a normalization policy other than the one
    /// the model was trained with.
    pub fn check_policy(&self, requested: &NormalizationPolicy) -> Result<()> {
        if *requested != self.normalization {
            return Err(Error::PolicyMismatch {
                checkpoint: self.normalization.describe(),
                requested: requested.describe(),
            });
        }
        Ok(())
    }

    fn restore_stores(
        &self,
        params: &mut crate::blocks::ParamStore,
        state: &mut crate::blocks::StateStore,
    ) -> Result<()> {
        if self.params.len() != params.len() || self.state.len() != state.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: checkpoint has {}/{} tensors, model expects {}/{}",
                self.params.len(),
                self.state.len(),
                params.len(),
                state.len()
            )));
        }
        for (i, data) in self.params.iter().enumerate() {
            let t = data.to_tensor()?;
            if t.dim() != params.get(i).dim() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for parameter '{}'",
                    params.name(i)
                )));
            }
            *params.get_mut(i) = t;
        }
        for (i, data) in self.state.iter().enumerate() {
            let t = data.to_tensor()?;
            if t.dim() != state.get(i).dim() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for state '{}'",
                    state.name(i)
                )));
            }
            *state.get_mut(i) = t;
        }
        Ok(())
    }

    pub fn to_seg_model(&self) -> Result<SegModel> {
        if self.kind != CheckpointKind::Segmentation {
            return Err(Error::Checkpoint(
                "expected a segmentation checkpoint, got classification".into(),
            ));
        }
        let config: SegModelConfig = serde_json::from_value(self.model_config.clone())
            .map_err(|e| Error::Checkpoint(format!("parse model config: {e}")))?;
        let mut model = SegModel::build(config, self.seed)?;
        self.restore_stores(&mut model.params, &mut model.state)?;
        Ok(model)
    }

    pub fn to_cls_model(&self) -> Result<ClsModel> {
        if self.kind != CheckpointKind::Classification {
            return Err(Error::Checkpoint(
                "expected a classification checkpoint, got segmentation".into(),
            ));
        }
        let config: ClsModelConfig = serde_json::from_value(self.model_config.clone())
            .map_err(|e| Error::Checkpoint(format!("parse model config: {e}")))?;
        let mut model = ClsModel::build(config, self.seed)?;
        self.restore_stores(&mut model.params, &mut model.state)?;
        Ok(model)
    }
}
