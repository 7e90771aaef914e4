//! Immutable exact-search index over image embeddings.
//!
//! Similarities are computed exhaustively; the result order is
//! similarity descending with ties broken by ascending insertion order.

mod file;

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{dot_clamped, l2_norm_f64, normalize, Embedding, EmbeddingError};
use crate::scalar::Scalar;

pub use file::{load_index, read_index, save_index, write_index, FILE_MAGIC, FILE_VERSION};

/// Default embedding width of the retrieval encoder.
pub const DEFAULT_DIM: usize = 256;

/// Inputs whose norm is further than this from 1 are renormalized at build.
pub const RENORMALIZE_THRESHOLD: f64 = 1e-4;

/// Above this many records scoring is spread over the rayon pool. Each
/// similarity is still a sequential dot product, so results are identical.
const PARALLEL_SCORING_MIN: usize = 16_384;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("no records supplied")]
    EmptyInput,
    #[error("index is empty")]
    EmptyIndex,
    #[error("unknown target id {0:?}")]
    UnknownTarget(String),
    #[error("invalid image id {0:?}: ids must be non-empty and at most 65535 bytes")]
    InvalidId(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("record {id:?}: {source}")]
    BadEmbedding {
        id: String,
        #[source]
        source: EmbeddingError,
    },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 8]),
    #[error("unsupported index file version {0}")]
    UnsupportedVersion(u32),
    #[error("index file truncated")]
    TruncatedFile,
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A database image: identifier, content locator and embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord<S: Scalar> {
    pub id: String,
    pub uri: String,
    pub embedding: Vec<S>,
}

impl<S: Scalar> ImageRecord<S> {
    /// A record whose locator is its id.
    pub fn new(id: impl Into<String>, embedding: Vec<S>) -> Self {
        let id = id.into();
        Self {
            uri: id.clone(),
            id,
            embedding,
        }
    }
}

/// One scored hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId<S> {
    pub id: String,
    pub similarity: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult<S> {
    pub entries: Vec<ScoredId<S>>,
    pub k_requested: usize,
}

impl<S> RetrievalResult<S> {
    pub fn top1(&self) -> Option<&str> {
        self.entries.first().map(|e| e.id.as_str())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }
}

/// Stored record: the embedding lives in the snapshot's flat buffer.
#[derive(Debug, Clone, PartialEq)]
struct Entry {
    id: String,
    uri: String,
}

/// Immutable, exactly searchable collection of normalized image embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexSnapshot<S: Scalar> {
    dim: usize,
    entries: Vec<Entry>,
    /// Row-major `len × dim` matrix of unit vectors in insertion order.
    matrix: Vec<S>,
    by_id: HashMap<String, usize>,
}

fn validate_id(id: &str) -> Result<(), IndexError> {
    if id.is_empty() || id.len() > u16::MAX as usize {
        return Err(IndexError::InvalidId(id.to_string()));
    }
    Ok(())
}

/// Builds a snapshot, renormalizing inputs whose norm is off by more than
/// [`RENORMALIZE_THRESHOLD`].
pub fn build_index<S: Scalar>(
    records: Vec<ImageRecord<S>>,
    dim: usize,
) -> Result<IndexSnapshot<S>, IndexError> {
    if records.is_empty() {
        return Err(IndexError::EmptyInput);
    }
    if dim == 0 {
        return Err(IndexError::DimensionMismatch {
            expected: 1,
            actual: 0,
        });
    }
    let mut builder = IndexSnapshot::with_capacity(dim, records.len());
    for rec in records {
        validate_id(&rec.id)?;
        if rec.embedding.len() != dim {
            return Err(IndexError::DimensionMismatch {
                expected: dim,
                actual: rec.embedding.len(),
            });
        }
        let bad = |source| IndexError::BadEmbedding {
            id: rec.id.clone(),
            source,
        };
        let norm = l2_norm_f64(&rec.embedding);
        let values = if norm.is_finite() && (norm - 1.0).abs() <= RENORMALIZE_THRESHOLD {
            Embedding::from_unit_unchecked(rec.embedding.clone())
                .map_err(bad)?
                .into_vec()
        } else {
            normalize(&rec.embedding, dim).map_err(bad)?.into_vec()
        };
        builder.push(rec.id, rec.uri, values)?;
    }
    Ok(builder)
}

impl<S: Scalar> IndexSnapshot<S> {
    fn with_capacity(dim: usize, n: usize) -> Self {
        Self {
            dim,
            entries: Vec::with_capacity(n),
            matrix: Vec::with_capacity(n * dim),
            by_id: HashMap::with_capacity(n),
        }
    }

    fn push(&mut self, id: String, uri: String, values: Vec<S>) -> Result<(), IndexError> {
        debug_assert_eq!(values.len(), self.dim);
        if self.by_id.contains_key(&id) {
            return Err(IndexError::DuplicateId(id));
        }
        self.by_id.insert(id.clone(), self.entries.len());
        self.entries.push(Entry { id, uri });
        self.matrix.extend_from_slice(&values);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Insertion position of `id`.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn ids(&self) -> impl ExactSizeIterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn id_at(&self, pos: usize) -> &str {
        &self.entries[pos].id
    }

    pub fn uri_at(&self, pos: usize) -> &str {
        &self.entries[pos].uri
    }

    pub fn vector_at(&self, pos: usize) -> &[S] {
        &self.matrix[pos * self.dim..(pos + 1) * self.dim]
    }

    /// Stored (normalized) embedding of `id`.
    pub fn embedding(&self, id: &str) -> Option<Embedding<S>> {
        let pos = self.position(id)?;
        Embedding::from_unit_unchecked(self.vector_at(pos).to_vec()).ok()
    }

    /// Records in insertion order.
    pub fn records(&self) -> impl Iterator<Item = ImageRecord<S>> + '_ {
        (0..self.len()).map(|i| ImageRecord {
            id: self.entries[i].id.clone(),
            uri: self.entries[i].uri.clone(),
            embedding: self.vector_at(i).to_vec(),
        })
    }

    #[cfg(test)]
    pub(crate) fn raw_matrix(&self) -> &[S] {
        &self.matrix
    }

    fn check_query(&self, query: &Embedding<S>) -> Result<(), IndexError> {
        if self.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        Ok(())
    }

    /// Similarity of `query` against every record, in insertion order.
    pub fn scores(&self, query: &Embedding<S>) -> Result<Vec<S>, IndexError> {
        self.check_query(query)?;
        let q = query.as_slice();
        let rows = self.matrix.chunks_exact(self.dim);
        let scores = if self.len() >= PARALLEL_SCORING_MIN {
            self.matrix
                .par_chunks_exact(self.dim)
                .map(|row| dot_clamped(row, q))
                .collect()
        } else {
            rows.map(|row| dot_clamped(row, q)).collect()
        };
        Ok(scores)
    }

    /// Exact top-`k` by cosine similarity.
    pub fn top_k(&self, query: &Embedding<S>, k: usize) -> Result<RetrievalResult<S>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        let scores = self.scores(query)?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        let by_rank = |a: &usize, b: &usize| rank_order(scores[*a], *a, scores[*b], *b);
        let take = k.min(order.len());
        if take < order.len() {
            order.select_nth_unstable_by(take - 1, by_rank);
            order.truncate(take);
        }
        order.sort_unstable_by(by_rank);
        Ok(RetrievalResult {
            entries: order
                .into_iter()
                .map(|i| ScoredId {
                    id: self.entries[i].id.clone(),
                    similarity: scores[i],
                })
                .collect(),
            k_requested: k,
        })
    }

    /// 1-based position of `target_id` in the full similarity ordering.
    pub fn rank_of(&self, query: &Embedding<S>, target_id: &str) -> Result<usize, IndexError> {
        let target = self
            .position(target_id)
            .ok_or_else(|| IndexError::UnknownTarget(target_id.to_string()))?;
        let scores = self.scores(query)?;
        let t = scores[target];
        let ahead = scores
            .iter()
            .enumerate()
            .filter(|&(i, &s)| rank_order(s, i, t, target) == Ordering::Less)
            .count();
        Ok(ahead + 1)
    }
}

/// Total order used for ranking: higher similarity first, then lower
/// insertion position.
#[inline]
fn rank_order<S: Scalar>(sa: S, ia: usize, sb: S, ib: usize) -> Ordering {
    sb.partial_cmp(&sa)
        .unwrap_or(Ordering::Equal)
        .then(ia.cmp(&ib))
}
