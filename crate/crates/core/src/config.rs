//! Run configuration: model, training and ablation settings in one JSON file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::TrainConfig;
use crate::encoder::EncoderConfig;
use crate::hetgraph::GraphOptions;
use crate::model::{ModelConfig, ModelKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("all models are disabled")]
    NoModels,
}

/// Feature removals studied in the ablation experiments.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_dependency: bool,
    pub no_pos: bool,
    pub no_definitions: bool,
    pub no_subsentence_nodes: bool,
    pub disable_model: Vec<ModelKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    /// Tokens rarer than this in the training set map to the unknown id.
    pub min_freq: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Small model that trains from scratch in seconds per epoch on one core:
    /// 32-wide states, one graph layer over untransformed token embeddings,
    /// and a classification-heavy loss.
    pub fn desk() -> Self {
        let mut train = TrainConfig {
            alpha: 0.8,
            ..TrainConfig::default()
        };
        train.adam.lr = 3e-3;
        Self {
            model: ModelConfig {
                encoder: EncoderConfig {
                    d_model: 32,
                    token_dim: 32,
                    edge_emb_dim: 16,
                    n_selfattn_layers: 0,
                    n_gat_layers: 1,
                    ..EncoderConfig::default()
                },
                label_emb_dim: 16,
            },
            train,
            ablation: Ablation::default(),
            min_freq: 1,
        }
    }

    /// Published dimensions: 300-wide states, 50-wide edge and 100-wide label embeddings.
    pub fn paper() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablation: Ablation::default(),
            min_freq: 1,
        }
    }

    pub fn from_json(text: &str, path: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: shown.clone(),
            source,
        })?;
        Self::from_json(&text, &shown)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Model settings with the definition ablation folded in.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.ablation.no_definitions {
            m.encoder.use_definitions = false;
        }
        m
    }

    pub fn graph_options(&self) -> GraphOptions {
        GraphOptions {
            no_dependency: self.ablation.no_dependency,
            no_pos: self.ablation.no_pos,
            no_subsentence_nodes: self.ablation.no_subsentence_nodes,
            ..GraphOptions::default()
        }
    }

    pub fn enabled_models(&self) -> Result<Vec<ModelKind>, ConfigError> {
        let kinds: Vec<ModelKind> = ModelKind::ALL
            .into_iter()
            .filter(|k| !self.ablation.disable_model.contains(k))
            .collect();
        if kinds.is_empty() {
            return Err(ConfigError::NoModels);
        }
        Ok(kinds)
    }
}
