//! Sparse retrieval and dense re-scoring.

mod bm25;
mod rerank;

pub use bm25::{Bm25Params, IdfVariant, Index, Posting};
pub use rerank::{
    rerank, CachedEmbedder, EmbeddingProvider, HttpEmbeddingProvider, DEFAULT_EMBED_BATCH, DEFAULT_RERANK_POOL,
};

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::http::HttpError;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("k must be at least 1 (got {0})")]
    InvalidK(usize),
    #[error("passage '{0}' is not in the index")]
    UnknownPassage(String),
    #[error("invalid rerank request: {0}")]
    InvalidRerank(String),
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("vector dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("index i/o at {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Producer {
    Bm25,
    Rerank,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub passage_id: String,
    pub score: f64,
}

/// Passages sorted by descending score, ties by ascending passage id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
    pub producer: Producer,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.passage_id.as_str())
    }

    /// The first `k` entries (or all, if shorter).
    pub fn prefix(&self, k: usize) -> &[RankedEntry] {
        &self.entries[..k.min(self.entries.len())]
    }

    /// True when entries are sorted by the ranking rule and ids are unique.
    pub fn is_well_formed(&self) -> bool {
        let sorted = self
            .entries
            .windows(2)
            .all(|w| rank_order(&w[0], &w[1]) != Ordering::Greater);
        let mut ids: Vec<&str> = self.ids().collect();
        ids.sort_unstable();
        ids.dedup();
        sorted && ids.len() == self.entries.len()
    }
}

/// Descending score, then ascending passage id.
pub fn rank_order(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.passage_id.cmp(&b.passage_id))
}

/// Lowercased runs of Unicode alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, RetrievalError> {
    if u.len() != v.len() {
        return Err(RetrievalError::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("The CAT sat."), ["the", "cat", "sat"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("e-mail 42"), ["e", "mail", "42"]);
        assert_eq!(tokenize("Ünïcode_naïve"), ["ünïcode", "naïve"]);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(RetrievalError::ZeroVector)
        ));
        assert!(matches!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn well_formed_checks_order_and_uniqueness() {
        let e = |id: &str, s: f64| RankedEntry {
            passage_id: id.into(),
            score: s,
        };
        let mut l = RankedList {
            query_id: "q".into(),
            entries: vec![e("a", 2.0), e("b", 1.0), e("c", 1.0)],
            producer: Producer::Bm25,
        };
        assert!(l.is_well_formed());
        l.entries.swap(1, 2);
        assert!(!l.is_well_formed());
        l.entries = vec![e("a", 2.0), e("a", 1.0)];
        assert!(!l.is_well_formed());
    }
}
