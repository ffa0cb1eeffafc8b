//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "TMOE" | u32 version | u32 × 8 hyperparameters (D E K heads M N_h N_p C)
//! | u32 len | model config JSON | u32 count
//! | count × (u32 len | name | u32 rank | u32 × rank dims | f32 × numel)
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{ModelConfig, ModelError, TrafficMoE};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TMOE";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Named f32 tensors plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn hyperparameters(c: &ModelConfig) -> [u32; 8] {
    [
        c.dim,
        c.experts,
        c.top_k,
        c.heads,
        c.packets,
        c.header_bytes,
        c.payload_bytes,
        c.classes,
    ]
    .map(|v| v as u32)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for h in hyperparameters(&self.config) {
            out.extend_from_slice(&h.to_le_bytes());
        }
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::IncompatibleCheckpoint(format!(
                "format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let mut hp = [0u32; 8];
        for h in &mut hp {
            *h = r.u32()?;
        }
        let len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
        if hyperparameters(&config) != hp {
            return Err(CheckpointError::Corrupt(
                "hyperparameter block disagrees with config".into(),
            ));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(CheckpointError::Corrupt(format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: shape overflow")))?;
            let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl<T: Scalar> TrafficMoE<T> {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            tensors: self
                .params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.cast()))
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        self.checkpoint().save(path)
    }

    /// Rebuilds a model from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let mut model = Self::new(ck.config.clone(), 0)?;
        model.load_weights(ck)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Overwrites every parameter with the checkpoint's values. The
    /// checkpoint must describe exactly this architecture.
    pub fn load_weights(&mut self, ck: &Checkpoint) -> Result<(), CheckpointError> {
        if ck.config != self.config {
            return Err(CheckpointError::IncompatibleCheckpoint(format!(
                "hyperparameters {:?} do not match model {:?}",
                hyperparameters(&ck.config),
                hyperparameters(&self.config)
            )));
        }
        if ck.tensors.len() != self.params.len() {
            return Err(CheckpointError::IncompatibleCheckpoint(format!(
                "{} tensors, model has {}",
                ck.tensors.len(),
                self.params.len()
            )));
        }
        for (name, t) in &ck.tensors {
            let id = self.params.id(name).ok_or_else(|| {
                CheckpointError::IncompatibleCheckpoint(format!("unknown tensor {name}"))
            })?;
            let p = self.params.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(CheckpointError::IncompatibleCheckpoint(format!(
                    "{name}: shape {:?}, model has {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }
}
