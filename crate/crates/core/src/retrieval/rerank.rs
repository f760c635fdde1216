//! Dense re-scoring of a BM25 candidate pool by embedding cosine similarity.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{cosine, rank_order, Producer, RankedEntry, RankedList, RetrievalError};
use crate::corpus::Corpus;
use crate::hash::{content_hash, StableHasher};
use crate::http::JsonClient;

pub const DEFAULT_RERANK_POOL: usize = 100;
pub const DEFAULT_EMBED_BATCH: usize = 32;

pub trait EmbeddingProvider: Send + Sync {
    fn model_name(&self) -> &str;

    /// One vector per input text, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError>;
}

/// Client for an OpenAI-compatible `/embeddings` endpoint.
pub struct HttpEmbeddingProvider {
    endpoint: String,
    model_name: String,
    dimension: Option<usize>,
    batch_size: usize,
    client: JsonClient,
}

impl HttpEmbeddingProvider {
    pub fn new(endpoint: impl Into<String>, model_name: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            dimension: None,
            batch_size: DEFAULT_EMBED_BATCH,
            client: JsonClient::new(Duration::from_secs(60), 3, api_key),
        }
    }

    pub fn with_dimension(mut self, dimension: usize) -> Self {
        self.dimension = Some(dimension);
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn with_client(mut self, client: JsonClient) -> Self {
        self.client = client;
        self
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let mut out = Vec::with_capacity(texts.len());
        let mut dimension = self.dimension;
        for batch in texts.chunks(self.batch_size) {
            let body = json!({ "model": self.model_name, "input": batch });
            let raw = self.client.post(&self.endpoint, &body)?;
            let resp: EmbeddingResponse =
                serde_json::from_value(raw).map_err(|e| RetrievalError::Protocol(e.to_string()))?;
            if resp.data.len() != batch.len() {
                return Err(RetrievalError::Protocol(format!(
                    "sent {} input(s), received {} embedding(s)",
                    batch.len(),
                    resp.data.len()
                )));
            }
            let mut data = resp.data;
            if data.iter().all(|d| d.index.is_some()) {
                data.sort_by_key(|d| d.index);
            }
            for d in data {
                let expected = *dimension.get_or_insert(d.embedding.len());
                if d.embedding.len() != expected {
                    return Err(RetrievalError::DimensionMismatch {
                        expected,
                        got: d.embedding.len(),
                    });
                }
                out.push(d.embedding);
            }
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    vector: Vec<f64>,
}

/// Memoises embeddings by `(model_name, text hash)`, optionally persisted
/// to an append-only journal.
pub struct CachedEmbedder<P> {
    inner: P,
    entries: Mutex<HashMap<String, Vec<f64>>>,
    journal: Option<PathBuf>,
}

impl<P: EmbeddingProvider> CachedEmbedder<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            entries: Mutex::new(HashMap::new()),
            journal: None,
        }
    }

    pub fn with_journal(inner: P, path: &Path) -> Result<Self, RetrievalError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let io = |e: &dyn std::fmt::Display| RetrievalError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            };
            let file = File::open(path).map_err(|e| io(&e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| io(&e))?;
                if line.trim().is_empty() {
                    continue;
                }
                // A torn final line from a crash is skipped, not fatal.
                if let Ok(l) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert(l.key, l.vector);
                }
            }
            let bytes = std::fs::read(path).map_err(|e| io(&e))?;
            if bytes.last().is_some_and(|&b| b != b'\n') {
                let mut f = OpenOptions::new().append(true).open(path).map_err(|e| io(&e))?;
                f.write_all(b"\n").map_err(|e| io(&e))?;
            }
        }
        Ok(Self {
            inner,
            entries: Mutex::new(entries),
            journal: Some(path.to_path_buf()),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn key(&self, text: &str) -> String {
        StableHasher::new()
            .str(self.inner.model_name())
            .str(&content_hash(text.as_bytes()))
            .finish_hex()
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedEmbedder<P> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let keys: Vec<String> = texts.iter().map(|t| self.key(t)).collect();
        let mut missing: Vec<usize> = Vec::new();
        {
            let entries = self.entries.lock().unwrap();
            for (i, k) in keys.iter().enumerate() {
                if !entries.contains_key(k) && !missing.iter().any(|&j| keys[j] == *k) {
                    missing.push(i);
                }
            }
        }
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let vectors = self.inner.embed(&batch)?;
            let mut entries = self.entries.lock().unwrap();
            let mut journal = match &self.journal {
                Some(p) => {
                    Some(
                        OpenOptions::new()
                            .create(true)
                            .append(true)
                            .open(p)
                            .map_err(|e| RetrievalError::Io {
                                path: p.display().to_string(),
                                message: e.to_string(),
                            })?,
                    )
                }
                None => None,
            };
            for (&i, v) in missing.iter().zip(vectors) {
                if let Some(f) = journal.as_mut() {
                    let line = serde_json::to_string(&CacheLine {
                        key: keys[i].clone(),
                        vector: v.clone(),
                    })
                    .expect("vectors serialize");
                    let _ = writeln!(f, "{line}");
                }
                entries.insert(keys[i].clone(), v);
            }
        }
        let entries = self.entries.lock().unwrap();
        Ok(keys.iter().map(|k| entries[k].clone()).collect())
    }
}

/// Re-scores the first `pool` BM25 candidates by cosine similarity between
/// question and passage embeddings and keeps the top `k`.
pub fn rerank(
    candidates: &RankedList,
    question: &str,
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    pool: usize,
    k: usize,
) -> Result<RankedList, RetrievalError> {
    if candidates.producer != Producer::Bm25 {
        return Err(RetrievalError::InvalidRerank(format!(
            "candidates must come from bm25, got {:?}",
            candidates.producer
        )));
    }
    if k < 1 {
        return Err(RetrievalError::InvalidK(k));
    }
    if pool < k {
        return Err(RetrievalError::InvalidRerank(format!(
            "pool {pool} is smaller than k {k}"
        )));
    }
    let head = candidates.prefix(pool);
    let mut texts = Vec::with_capacity(head.len() + 1);
    texts.push(question.to_string());
    for e in head {
        let p = corpus
            .get(&e.passage_id)
            .ok_or_else(|| RetrievalError::UnknownPassage(e.passage_id.clone()))?;
        texts.push(p.text.clone());
    }
    let vectors = provider.embed(&texts)?;
    if vectors.len() != texts.len() {
        return Err(RetrievalError::Protocol(format!(
            "requested {} embedding(s), received {}",
            texts.len(),
            vectors.len()
        )));
    }
    let q = &vectors[0];
    let mut entries = Vec::with_capacity(head.len());
    for (e, v) in head.iter().zip(&vectors[1..]) {
        entries.push(RankedEntry {
            passage_id: e.passage_id.clone(),
            score: cosine(q, v)?,
        });
    }
    entries.sort_by(rank_order);
    entries.truncate(k);
    Ok(RankedList {
        query_id: candidates.query_id.clone(),
        entries,
        producer: Producer::Rerank,
    })
}
