//! Named parameter storage with a versioned on-disk format.

use super::{AdError, Gradients, Tape, Tensor, Value};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

const FORMAT: &str = "cvgae-params";
const VERSION: u32 = 1;

/// Ordered map of parameter name to tensor. Iteration order is the sorted
/// name order, which keeps optimizer updates and serialization deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Mapping from parameter names to their leaf nodes on one tape.
pub struct BoundParams {
    ids: BTreeMap<String, Value>,
}

#[derive(Debug)]
pub enum StoreError {
    Io(std::io::Error),
    Format(String),
    MissingParam(String),
}

impl fmt::Display for StoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StoreError::Io(e) => write!(f, "parameter store i/o error: {}", e),
            StoreError::Format(msg) => write!(f, "parameter store format error: {}", msg),
            StoreError::MissingParam(name) => write!(f, "missing parameter `{}`", name),
        }
    }
}

impl std::error::Error for StoreError {}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e)
    }
}

#[derive(Serialize, Deserialize)]
struct StoreFile {
    format: String,
    version: u32,
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries across all tensors.
    pub fn entry_count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Register every tensor as a parameter leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.tensors {
            ids.insert(name.clone(), tape.parameter(t.clone()));
        }
        BoundParams { ids }
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let file = StoreFile {
            format: FORMAT.to_string(),
            version: VERSION,
            tensors: self.tensors.clone(),
        };
        let json = serde_json::to_string(&file)
            .map_err(|e| StoreError::Format(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let bytes = std::fs::read(path)?;
        let file: StoreFile = serde_json::from_slice(&bytes)
            .map_err(|e| StoreError::Format(e.to_string()))?;
        if file.format != FORMAT {
            return Err(StoreError::Format(format!(
                "expected format `{}`, found `{}`",
                FORMAT, file.format
            )));
        }
        if file.version != VERSION {
            return Err(StoreError::Format(format!(
                "unsupported version {} (expected {})",
                file.version, VERSION
            )));
        }
        for (name, t) in &file.tensors {
            t.validate()
                .map_err(|e| StoreError::Format(format!("tensor `{}`: {}", name, e)))?;
            if !t.is_finite() {
                return Err(StoreError::Format(format!(
                    "tensor `{}` contains non-finite values",
                    name
                )));
            }
        }
        Ok(ParamStore { tensors: file.tensors })
    }
}

impl BoundParams {
    pub fn value(&self, name: &str) -> Result<Value, StoreError> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| StoreError::MissingParam(name.to_string()))
    }

    /// Gradients per parameter name after a backward sweep. Parameters with
    /// no path to the loss map to zero tensors.
    pub fn grads_by_name(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.ids
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get(v)))
            .collect()
    }
}

/// Glorot-uniform matrix in `+-sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(
    rows: usize,
    cols: usize,
    rng: &mut impl rand::Rng,
) -> Result<Tensor, AdError> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data)
}
