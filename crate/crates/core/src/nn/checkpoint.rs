use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{join, Module};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("tensor {name}: shape {got:?} does not match {want:?}")]
    Shape { name: String, got: Vec<usize>, want: Vec<usize> },
    #[error("tensor {0} holds non-finite values")]
    NonFinite(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named parameter tensors in a versioned JSON document. Floats are written
/// in shortest round-trip form, so write → read → write is byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: Vec<NamedTensor>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self { version: CHECKPOINT_VERSION, tensors: Vec::new() }
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<M: Module + ?Sized>(&mut self, prefix: &str, module: &M) -> Result<(), CheckpointError> {
        for (name, p) in module.named_params() {
            let name = join(prefix, &name);
            if !p.value.is_finite() {
                return Err(CheckpointError::NonFinite(name));
            }
            self.tensors.push(NamedTensor { name, shape: p.value.shape.clone(), data: p.value.data.clone() });
        }
        Ok(())
    }

    pub fn load<M: Module + ?Sized>(&self, prefix: &str, module: &mut M) -> Result<(), CheckpointError> {
        let names: Vec<(String, Vec<usize>)> =
            module.named_params().into_iter().map(|(n, p)| (join(prefix, &n), p.value.shape.clone())).collect();
        let mut params = module.params_mut();
        for ((name, shape), p) in names.into_iter().zip(params.iter_mut()) {
            let t =
                self.tensors.iter().find(|t| t.name == name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if t.shape != shape || t.data.len() != p.value.data.len() {
                return Err(CheckpointError::Shape { name, got: t.shape.clone(), want: shape });
            }
            p.value.data.copy_from_slice(&t.data);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(ck.version));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self, CheckpointError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
