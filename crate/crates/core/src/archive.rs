//! Single-file tensor archive used for checkpoints, importance masks and
//! exemplar memory.
//!
//! The archive is a JSON document holding a free-form metadata object and a
//! map of named tensors. Tensor payloads are stored as base64-encoded
//! little-endian `f64` bytes, so values round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    data: String,
}

impl StoredTensor {
    pub fn new(shape: &[usize], values: &[f64]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: STANDARD.encode(bytes),
        })
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Archive(format!("bad tensor payload: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Archive("tensor payload is not a multiple of 8 bytes".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let expected: usize = self.shape.iter().product();
        if values.len() != expected {
            return Err(Error::Archive(format!(
                "tensor of shape {:?} holds {} values",
                self.shape,
                values.len()
            )));
        }
        Ok(values)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl TensorArchive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], values: &[f64]) -> Result<()> {
        self.tensors.insert(name.into(), StoredTensor::new(shape, values)?);
        Ok(())
    }

    /// Returns the shape and values of a named tensor.
    pub fn get(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing tensor `{name}`")))?;
        Ok((t.shape.clone(), t.values()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn values_round_trip_bit_exactly(values in proptest::collection::vec(any::<f64>(), 0..64)) {
            let t = StoredTensor::new(&[values.len()], &values).unwrap();
            let back = t.values().unwrap();
            prop_assert_eq!(back.len(), values.len());
            for (a, b) in back.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(StoredTensor::new(&[2, 3], &[0.0; 5]).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let mut a = TensorArchive::new(serde_json::json!({"step": 3}));
        a.insert("w", &[2, 2], &[1.0, -2.5, 1e-300, f64::MAX]).unwrap();
        a.save(&path).unwrap();
        let b = TensorArchive::load(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.get("w").unwrap().1, vec![1.0, -2.5, 1e-300, f64::MAX]);
        assert!(b.get("missing").is_err());
    }
}
