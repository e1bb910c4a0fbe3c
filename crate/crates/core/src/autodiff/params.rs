use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{contract, Error, Result};

/// Named parameter arrays with fixed shapes, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    arrays: BTreeMap<String, Matrix>,
}

/// Shape declaration of one named array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: [usize; 2],
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a new array. Names are unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        if self.arrays.contains_key(&name) {
            return contract(format!("duplicate parameter name '{name}'"));
        }
        self.arrays.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.arrays.get(name)
    }

    /// Overwrites the values of an existing array; the shape must match.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        match self.arrays.get_mut(name) {
            None => contract(format!("unknown parameter '{name}'")),
            Some(old) if old.shape() != value.shape() => contract(format!(
                "shape of '{name}' is fixed at {:?}, got {:?}",
                old.shape(),
                value.shape()
            )),
            Some(old) => {
                *old = value;
                Ok(())
            }
        }
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.arrays.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(Matrix::len).sum()
    }

    pub fn specs(&self) -> Vec<ArraySpec> {
        self.arrays
            .iter()
            .map(|(name, m)| ArraySpec { name: name.clone(), shape: [m.rows(), m.cols()] })
            .collect()
    }

    /// Arrays whose name starts with `prefix`, keeping their full names.
    pub fn subset(&self, prefix: &str) -> ParameterSet {
        let arrays = self
            .arrays
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParameterSet { arrays }
    }

    /// Little-endian `f64` payload of all arrays in name order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 8);
        for m in self.arrays.values() {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Inverse of [`ParameterSet::to_le_bytes`] given the declared shapes.
    /// `base_offset` is only used for error messages.
    pub fn from_le_bytes(specs: &[ArraySpec], bytes: &[u8], base_offset: u64) -> Result<Self> {
        let mut set = ParameterSet::new();
        let mut pos = 0usize;
        for spec in specs {
            let n = spec.shape[0] * spec.shape[1];
            let need = n * 8;
            if bytes.len() < pos + need {
                return Err(Error::Format {
                    offset: base_offset + bytes.len() as u64,
                    message: format!("truncated while reading parameter '{}' ({need} bytes expected)", spec.name),
                });
            }
            let data = bytes[pos..pos + need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            set.insert(spec.name.clone(), Matrix::from_vec(spec.shape[0], spec.shape[1], data))?;
            pos += need;
        }
        if pos != bytes.len() {
            return Err(Error::Format {
                offset: base_offset + pos as u64,
                message: format!("{} trailing bytes after the last parameter", bytes.len() - pos),
            });
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_fixed() {
        let mut p = ParameterSet::new();
        p.insert("w", Matrix::zeros(2, 3)).unwrap();
        assert!(p.set("w", Matrix::zeros(3, 2)).is_err());
        assert!(p.set("w", Matrix::filled(2, 3, 1.0)).is_ok());
        assert!(p.insert("w", Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn byte_round_trip_is_exact() {
        let mut p = ParameterSet::new();
        p.insert("b", Matrix::row_vector(vec![0.1, -0.0, f64::MIN_POSITIVE])).unwrap();
        p.insert("a", Matrix::from_vec(2, 1, vec![1e300, -3.25])).unwrap();
        let bytes = p.to_le_bytes();
        let q = ParameterSet::from_le_bytes(&p.specs(), &bytes, 0).unwrap();
        assert_eq!(q.to_le_bytes(), bytes);
        assert!(ParameterSet::from_le_bytes(&p.specs(), &bytes[..bytes.len() - 1], 0).is_err());
    }
}
