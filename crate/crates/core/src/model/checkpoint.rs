use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ModelParameters;
use crate::error::{Error, Result};
use crate::text::Vocabulary;

pub const CHECKPOINT_FORMAT: &str = "cbdt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained weights together with the vocabulary their embeddings index.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters,
    pub vocabulary: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    config: ModelConfig,
    vocabulary: Vec<String>,
    tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(params: ModelParameters, vocabulary: Vocabulary) -> Result<Self> {
        if vocabulary.len() != params.config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries but the model expects {}",
                vocabulary.len(),
                params.config.vocab_size
            )));
        }
        Ok(Self { params, vocabulary })
    }

    pub fn to_json(&self) -> Result<String> {
        let container = Container {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.params.config.clone(),
            vocabulary: self.vocabulary.learned_tokens().to_vec(),
            tensors: self
                .params
                .tensors()
                .into_iter()
                .map(|(info, data)| TensorRecord {
                    name: info.name,
                    shape: info.shape,
                    data: data.to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&container)?)
    }

    /// Parses and validates every tensor's name and shape against the
    /// stored configuration.
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Container = serde_json::from_str(text)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format {:?}", c.format)));
        }
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", c.version)));
        }
        c.config.validate()?;
        let mut params = ModelParameters::zeros(&c.config);
        let mut stored: HashMap<String, TensorRecord> = HashMap::new();
        for t in c.tensors {
            let name = t.name.clone();
            if stored.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        for (info, slot) in params.tensors_mut() {
            let t = stored
                .remove(&info.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", info.name)))?;
            if t.shape != info.shape || t.data.len() != slot.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    info.name, t.shape, info.shape
                )));
            }
            slot.copy_from_slice(&t.data);
        }
        if let Some(name) = stored.keys().min() {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite weights".into()));
        }
        Checkpoint::new(params, Vocabulary::from_tokens(c.vocabulary))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_json()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_parameters;

    fn small() -> Checkpoint {
        let vocab = Vocabulary::from_tokens(vec!["a".into(), "b".into()]);
        let mut cfg = ModelConfig::new(vocab.len());
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.d_ff = 8;
        cfg.max_len = 6;
        cfg.n_layers = 1;
        Checkpoint::new(init_parameters(&cfg).unwrap(), vocab).unwrap()
    }

    #[test]
    fn round_trips_bit_exactly() {
        let ck = small();
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = small();
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn rejects_wrong_shape() {
        let ck = small();
        let mut v: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        v["tensors"][0]["shape"] = serde_json::json!([1, 1]);
        let err = Checkpoint::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("context.token_embedding"), "{err}");
    }

    #[test]
    fn rejects_missing_tensor_and_bad_version() {
        let ck = small();
        let mut v: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        v["tensors"].as_array_mut().unwrap().pop();
        assert!(Checkpoint::from_json(&v.to_string()).unwrap_err().to_string().contains("missing tensor fusion.bias"));
        let mut v: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        v["version"] = serde_json::json!(9);
        assert!(Checkpoint::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn rejects_vocabulary_size_mismatch() {
        let ck = small();
        let vocab = Vocabulary::from_tokens(vec!["a".into()]);
        assert!(Checkpoint::new(ck.params, vocab).is_err());
    }
}
