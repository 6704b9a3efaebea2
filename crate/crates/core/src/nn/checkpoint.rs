//! Named-tensor archive with a JSON header: model kind, model config, and
//! optional training state (iteration counter plus optimizer moments).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FORMAT: &str = "manga-restore-checkpoint";
const VERSION: &str = "1";
const PARAM: &str = "param.";
const OPTIM: &str = "adam.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: u64,
    pub adam_step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: BTreeMap<String, Tensor>,
    pub train_state: Option<TrainState>,
    pub optimizer: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("version".to_string(), VERSION.to_string());
        meta.insert("kind".to_string(), self.kind.clone());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        if let Some(ts) = &self.train_state {
            meta.insert("train_state".to_string(), serde_json::to_string(ts)?);
        }
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (k, t) in &self.params {
            tensors.push((format!("{PARAM}{k}"), t.contiguous()?));
        }
        for (k, t) in &self.optimizer {
            tensors.push((format!("{OPTIM}{k}"), t.contiguous()?));
        }
        let bytes = safetensors::serialize(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::Checkpoint("missing header".into()))?;
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(Error::Checkpoint(format!("{} is not a model checkpoint", path.display())));
        }
        if meta.get("version").map(String::as_str) != Some(VERSION) {
            return Err(Error::Checkpoint("unsupported checkpoint version".into()));
        }
        let field = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("missing header field {k}")));
        let kind = field("kind")?.clone();
        let config = serde_json::from_str(field("config")?)?;
        let train_state = match meta.get("train_state") {
            Some(s) => Some(serde_json::from_str(s)?),
            None => None,
        };
        let mut params = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for (name, t) in candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)? {
            if let Some(k) = name.strip_prefix(PARAM) {
                params.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(OPTIM) {
                optimizer.insert(k.to_string(), t);
            }
        }
        Ok(Self {
            kind,
            config,
            params,
            train_state,
            optimizer,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let dev = Device::Cpu;
        let mut params = BTreeMap::new();
        params.insert("a.weight".into(), Tensor::new(&[[1.5f32, -2.0]], &dev).unwrap());
        params.insert("b".into(), Tensor::new(&[0.25f64], &dev).unwrap());
        let mut optimizer = BTreeMap::new();
        optimizer.insert("m.b".into(), Tensor::new(&[3.0f64], &dev).unwrap());
        let ck = Checkpoint {
            kind: "se".into(),
            config: serde_json::json!({"base_channels": 8}),
            params,
            train_state: Some(TrainState {
                iteration: 12,
                adam_step: 12,
            }),
            optimizer,
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.kind, "se");
        assert_eq!(back.config, ck.config);
        assert_eq!(back.train_state, ck.train_state);
        assert_eq!(
            back.params["a.weight"].to_vec2::<f32>().unwrap(),
            vec![vec![1.5f32, -2.0]]
        );
        assert_eq!(back.params["b"].to_vec1::<f64>().unwrap(), vec![0.25]);
        assert_eq!(back.optimizer["m.b"].to_vec1::<f64>().unwrap(), vec![3.0]);
        assert!(back.expect_kind("mr").is_err());
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Checkpoint::load(&path).is_err());
        assert!(Checkpoint::load(dir.path().join("missing")).is_err());
    }
}
