//! On-disk layout of a training run: config, vocabulary, one checkpoint per
//! model, the epoch log and the selected-model marker.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::corpus::Vocabulary;
use crate::distill::{EpochLog, ModelBundle};
use crate::encoder::EncoderError;
use crate::evalkit::Report;
use crate::model::{Model, ModelKind};
use crate::tensor::TensorError;

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const SELECTED_FILE: &str = "selected.json";

pub fn params_file(kind: ModelKind) -> String {
    format!("model_{}.params.json", kind.short())
}

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("missing {0}")]
    Missing(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] EncoderError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String, ArtifactError> {
    if !path.exists() {
        return Err(ArtifactError::Missing(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(io_err(path))
}

fn write(path: &Path, text: &str) -> Result<(), ArtifactError> {
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevScore {
    pub model: ModelKind,
    pub report: Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub model: ModelKind,
    pub dev: Vec<DevScore>,
}

/// Everything needed to run inference with one model.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: Model,
}

pub fn save_run(
    dir: &Path,
    config: &RunConfig,
    vocab: &Vocabulary,
    bundle: &ModelBundle,
    log: &[EpochLog],
    selection: &Selection,
) -> Result<(), ArtifactError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write(&dir.join(CONFIG_FILE), &config.to_json())?;
    write(&dir.join(VOCAB_FILE), &vocab.to_json())?;
    for m in &bundle.models {
        let path = dir.join(params_file(m.kind));
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        m.store.write_checkpoint(&mut w).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
    }
    let mut lines = String::new();
    for entry in log {
        lines.push_str(&serde_json::to_string(entry).expect("log serializes"));
        lines.push('\n');
    }
    write(&dir.join(LOG_FILE), &lines)?;
    write(
        &dir.join(SELECTED_FILE),
        &serde_json::to_string_pretty(selection).expect("selection serializes"),
    )
}

pub fn load_config(dir: &Path) -> Result<RunConfig, ArtifactError> {
    let path = dir.join(CONFIG_FILE);
    Ok(RunConfig::from_json(&read(&path)?, &path.display().to_string())?)
}

pub fn load_vocab(dir: &Path) -> Result<Vocabulary, ArtifactError> {
    let path = dir.join(VOCAB_FILE);
    Vocabulary::from_json(&read(&path)?).map_err(|e| ArtifactError::Format {
        path,
        message: e.to_string(),
    })
}

pub fn load_selection(dir: &Path) -> Result<Selection, ArtifactError> {
    let path = dir.join(SELECTED_FILE);
    serde_json::from_str(&read(&path)?).map_err(|e| ArtifactError::Format {
        path,
        message: e.to_string(),
    })
}

pub fn load_model(dir: &Path, kind: ModelKind) -> Result<LoadedModel, ArtifactError> {
    let config = load_config(dir)?;
    let vocab = load_vocab(dir)?;
    let mut model = Model::new(kind, config.model_config(), vocab.len(), config.train.seed)?;
    let path = dir.join(params_file(kind));
    if !path.exists() {
        return Err(ArtifactError::Missing(path));
    }
    let file = File::open(&path).map_err(io_err(&path))?;
    model
        .store
        .read_checkpoint(BufReader::new(file))
        .map_err(|e: TensorError| ArtifactError::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
    Ok(LoadedModel { config, vocab, model })
}

/// The model named in the selection marker.
pub fn load_selected(dir: &Path) -> Result<LoadedModel, ArtifactError> {
    let selection = load_selection(dir)?;
    load_model(dir, selection.model)
}
