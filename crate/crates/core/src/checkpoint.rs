//! Checkpoint directory: `model.json` plus `vocab.txt`.
//!
//! `model.json` holds the model config, the relation labels in label-token
//! order and every parameter as `{"name", "shape", "data"}` with row-major
//! `f64` data. `vocab.txt` lists one token per line, the line number being
//! the token id.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::model::{LabelPromptModel, ModelConfig, ModelError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::vocab::{VocabError, Vocabulary};

pub const MODEL_FILE: &str = "model.json";
pub const VOCAB_FILE: &str = "vocab.txt";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("unsupported checkpoint format {0}")]
    Format(u32),
    #[error("tensor {name}: {message}")]
    Tensor { name: String, message: String },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub format: u32,
    pub config: ModelConfig,
    pub relations: Vec<String>,
    pub tensors: Vec<NamedTensor>,
}

pub fn save_checkpoint<S: Scalar>(model: &LabelPromptModel<S>, dir: &Path) -> Result<(), CheckpointError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| CheckpointError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let file = CheckpointFile {
        format: FORMAT_VERSION,
        config: model.config,
        relations: model.vocab.relations().iter().map(|r| r.text.clone()).collect(),
        tensors: model
            .store
            .names()
            .iter()
            .zip(model.store.tensors())
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect(),
    };
    let path = dir.join(MODEL_FILE);
    let text = serde_json::to_string(&file)
        .map_err(|source| CheckpointError::Json { path: path.display().to_string(), source })?;
    std::fs::write(&path, text).map_err(io(&path))?;
    model.vocab.save(&dir.join(VOCAB_FILE))?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<LabelPromptModel<S>, CheckpointError> {
    let path = dir.join(MODEL_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|source| CheckpointError::Json { path: path.display().to_string(), source })?;
    if file.format != FORMAT_VERSION {
        return Err(CheckpointError::Format(file.format));
    }
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE), &file.relations)?;
    let mut store = ParamStore::new();
    for t in file.tensors {
        let tensor = Tensor::new(t.shape.clone(), t.data.into_iter().map(S::lit).collect())
            .map_err(|e| CheckpointError::Tensor { name: t.name.clone(), message: e.to_string() })?;
        store.add(t.name, tensor);
    }
    Ok(LabelPromptModel::from_parts(vocab, store, file.config)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_synthetic;
    use crate::template::TokenStrategy;

    #[test]
    fn round_trip_is_exact() {
        let corpus = generate_synthetic(3, 4, 64, 0).unwrap();
        for strategy in [TokenStrategy::Label, TokenStrategy::Learnable] {
            let config = ModelConfig { strategy, ..Default::default() };
            let model = LabelPromptModel::<f64>::new(Vocabulary::build(&corpus), config, 9).unwrap();
            let dir = tempfile::tempdir().unwrap();
            save_checkpoint(&model, dir.path()).unwrap();
            let back = load_checkpoint::<f64>(dir.path()).unwrap();
            assert_eq!(back, model);
        }
    }
}
