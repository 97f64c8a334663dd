use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token amounts. Balances are kept as reals so reputation-weighted splits are exact.
pub type Tokens = f64;

/// A 32-byte content digest (SHA-256 on the production path).
pub type Digest = [u8; 32];

/// Identifier of a participant (user, supplier, validator, cache or official validator).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for NodeId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

/// Tolerance on the Euclidean norm of an [`Embedding`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding is empty")]
    Empty,
    #[error("embedding contains a non-finite component")]
    NonFinite,
    #[error("embedding norm {0} is not 1 within {UNIT_NORM_TOLERANCE}")]
    NotUnit(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("cannot normalize a zero vector")]
    Zero,
}

/// A unit-norm vector used for similarity search and the official topic check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps an already-normalized vector, rejecting anything off the unit sphere.
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = l2(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(EmbeddingError::NotUnit(norm));
        }
        Ok(Self(values))
    }

    /// Scales `values` onto the unit sphere.
    pub fn normalized(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = l2(&values);
        if norm == 0.0 {
            return Err(EmbeddingError::Zero);
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Dot product, which equals cosine similarity for unit vectors.
    pub fn dot(&self, other: &Embedding) -> Result<f64, EmbeddingError> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::Dimension(self.dim(), other.dim()));
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn is_unit(&self) -> bool {
        (l2(&self.0) - 1.0).abs() <= UNIT_NORM_TOLERANCE
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Clamps into `[0, 1]`.
pub(crate) fn unit_clamp(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

pub(crate) fn in_unit_range(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_has_unit_norm() {
        let e = Embedding::normalized(vec![3.0, 4.0]).unwrap();
        assert!(e.is_unit());
        assert_eq!(e.as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn rejects_non_unit() {
        assert!(matches!(
            Embedding::new(vec![1.0, 1.0]),
            Err(EmbeddingError::NotUnit(_))
        ));
        assert_eq!(Embedding::normalized(vec![0.0; 3]), Err(EmbeddingError::Zero));
        assert_eq!(Embedding::new(vec![]), Err(EmbeddingError::Empty));
    }

    #[test]
    fn dot_checks_dimension() {
        let a = Embedding::new(vec![1.0, 0.0]).unwrap();
        let b = Embedding::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(a.dot(&b), Err(EmbeddingError::Dimension(2, 3)));
    }
}
