//! Unit-norm embedding vectors and the cosine similarity over them.

use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Norm tolerance an embedding must satisfy after normalization.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmbeddingError {
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("vector contains a non-finite component at position {0}")]
    NonFinite(usize),
}

/// A finite, L2-normalized feature vector.
///
/// The only ways to obtain one are [`normalize`] and
/// [`Embedding::from_unit_unchecked`], so holders can rely on the unit-norm
/// invariant.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Embedding<S: Scalar> {
    values: Vec<S>,
}

impl<S: Scalar> Embedding<S> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<S> {
        self.values
    }

    /// Wraps values that are already known to be unit-norm (for example
    /// bytes read back from a persisted index). Finiteness is still checked.
    pub fn from_unit_unchecked(values: Vec<S>) -> Result<Self, EmbeddingError> {
        check_finite(&values)?;
        Ok(Self { values })
    }

    /// L2 norm accumulated in `f64`.
    pub fn norm(&self) -> f64 {
        l2_norm_f64(&self.values)
    }
}

impl<S: Scalar> Deref for Embedding<S> {
    type Target = [S];

    fn deref(&self) -> &[S] {
        &self.values
    }
}

impl<'de, S: Scalar + Deserialize<'de>> Deserialize<'de> for Embedding<S> {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = Vec::<S>::deserialize(deserializer)?;
        let dim = raw.len();
        normalize(&raw, dim).map_err(serde::de::Error::custom)
    }
}

fn check_finite<S: Scalar>(v: &[S]) -> Result<(), EmbeddingError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(EmbeddingError::NonFinite(i)),
        None => Ok(()),
    }
}

pub(crate) fn l2_norm_f64<S: Scalar>(v: &[S]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

/// Returns `v / ‖v‖₂`.
///
/// The norm is computed in `f64` and the division is done in `f64` before
/// rounding back to `S`, which keeps `f32` outputs within `1e-6` of unit norm.
pub fn normalize<S: Scalar>(v: &[S], dim: usize) -> Result<Embedding<S>, EmbeddingError> {
    if v.len() != dim {
        return Err(EmbeddingError::DimensionMismatch {
            expected: dim,
            actual: v.len(),
        });
    }
    check_finite(v)?;
    let norm = l2_norm_f64(v);
    if norm == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    let values = v
        .iter()
        .map(|x| S::from_f64_lossy(x.as_f64() / norm))
        .collect();
    Ok(Embedding { values })
}

/// Dot product of two unit vectors accumulated sequentially in `S`, clamped
/// to `[-1, 1]`.
pub fn cosine<S: Scalar>(a: &Embedding<S>, b: &Embedding<S>) -> Result<S, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(dot_clamped(a, b))
}

/// Sequential dot product in fixed component order, clamped to `[-1, 1]`.
/// Callers guarantee equal lengths.
#[inline]
pub(crate) fn dot_clamped<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc.max(-S::one()).min(S::one())
}
