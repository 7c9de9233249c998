//! Self-describing binary checkpoints.
//!
//! Layout: magic `TSPK`, format version (`u32` LE), manifest length (`u64`
//! LE), a JSON manifest, then every tensor as raw little-endian `f32` in
//! manifest order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, TriSPrompt};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::train::{EpochRecord, TrainConfig, TrainOutcome};

pub const MAGIC: &[u8; 4] = b"TSPK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the tensor block.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    epoch: usize,
    history: Vec<EpochRecord>,
    adam_t: Option<u64>,
    params: Vec<TensorEntry>,
    adam_m: Vec<TensorEntry>,
    adam_v: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub model: TriSPrompt<f32>,
    pub config: TrainConfig,
    pub adam: Option<AdamState<f32>>,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn from_outcome(outcome: TrainOutcome, config: TrainConfig) -> Self {
        Self {
            model: outcome.model,
            config,
            adam: Some(outcome.adam),
            epoch: outcome.best_epoch,
            history: outcome.history,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut data: Vec<f32> = Vec::new();
        let entries = |store: &ParamStore<f32>, data: &mut Vec<f32>| {
            store
                .ids()
                .map(|id| {
                    let t = store.get(id);
                    let entry = TensorEntry {
                        name: store.name(id).to_string(),
                        shape: t.shape().to_vec(),
                        offset: data.len(),
                    };
                    data.extend(t.iter());
                    entry
                })
                .collect::<Vec<_>>()
        };
        let params = entries(&self.model.store, &mut data);
        let (adam_m, adam_v) = match &self.adam {
            Some(a) => (entries(&a.m, &mut data), entries(&a.v, &mut data)),
            None => (Vec::new(), Vec::new()),
        };
        let mut config = self.config.clone();
        config.model = self.model.config.clone();
        let manifest = Manifest {
            config,
            epoch: self.epoch,
            history: self.history.clone(),
            adam_t: self.adam.as_ref().map(|a| a.t),
            params,
            adam_m,
            adam_v,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut word = [0u8; 4];
        read(&mut r, &mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut len = [0u8; 8];
        read(&mut r, &mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| CheckpointError::Corrupt("manifest length".into()))?;
        if r.len() < len {
            return Err(CheckpointError::Corrupt("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&r[..len])?;
        let body = &r[len..];
        if !body.len().is_multiple_of(4) {
            return Err(CheckpointError::Corrupt("tensor block is not f32-aligned".into()));
        }
        let data: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let store = |entries: &[TensorEntry]| -> Result<ParamStore<f32>, CheckpointError> {
            let mut names = Vec::new();
            let mut tensors = Vec::new();
            for e in entries {
                let n: usize = e.shape.iter().product();
                let slice = data
                    .get(e.offset..e.offset + n)
                    .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {} out of range", e.name)))?;
                names.push(e.name.clone());
                tensors.push(ArrayD::from_shape_vec(IxDyn(&e.shape), slice.to_vec()).expect("sized"));
            }
            Ok(ParamStore::from_parts(names, tensors))
        };
        let params = store(&manifest.params)?;
        let model = TriSPrompt::with_store(manifest.config.model.clone(), params)?;
        let adam = match manifest.adam_t {
            Some(t) => {
                let m = store(&manifest.adam_m)?;
                let v = store(&manifest.adam_v)?;
                if !model.store.same_layout(&m) || !model.store.same_layout(&v) {
                    return Err(CheckpointError::Corrupt("optimizer state layout".into()));
                }
                Some(AdamState { m, v, t })
            }
            None => None,
        };
        Ok(Self {
            model,
            config: manifest.config,
            adam,
            epoch: manifest.epoch,
            history: manifest.history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn read(r: &mut &[u8], buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf)
        .map_err(|_| CheckpointError::Corrupt("truncated header".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Mode;
    use crate::model::ModelConfig;

    fn sample() -> Checkpoint {
        let mut cfg = TrainConfig::default();
        cfg.model = ModelConfig::toy(Mode::Three);
        let model: TriSPrompt<f32> = TriSPrompt::new(cfg.model.clone(), 3).unwrap();
        let mut adam = AdamState::new(&model.store);
        adam.t = 17;
        adam.m.get_mut(adam.m.ids().next().unwrap()).fill(0.25);
        Checkpoint {
            model,
            config: cfg,
            adam: Some(adam),
            epoch: 4,
            history: Vec::new(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.epoch, 4);
        assert_eq!(back.config, ck.config);
        for id in ck.model.store.ids() {
            let (a, b) = (ck.model.store.get(id), back.model.store.get(id));
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let adam = back.adam.as_ref().unwrap();
        assert_eq!(adam.t, 17);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"NOPE0000"), Err(CheckpointError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CheckpointError::Version(9))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 6]),
            Err(CheckpointError::Corrupt(_))
        ));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = Checkpoint::load("/nonexistent/x.ckpt").err().unwrap();
        assert!(err.to_string().contains("/nonexistent/x.ckpt"));
    }
}
