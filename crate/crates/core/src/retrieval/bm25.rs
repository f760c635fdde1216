//! In-memory inverted index with Okapi BM25 scoring.
//!
//! ```text
//! score(D, Q) = Σ_{t ∈ Q} idf(t) · tf(t, D) · (k1 + 1)
//!                        / (tf(t, D) + k1 · (1 − b + b · |D| / avgdl))
//! ```
//!
//! Documents are stored sorted by passage id, so ascending document number
//! is the same as ascending passage id and doubles as the tie-break order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tokenize, Producer, RankedEntry, RankedList, RetrievalError};
use crate::corpus::Corpus;

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IdfVariant {
    /// `ln(1 + (N − df + 0.5) / (df + 0.5))`; always positive.
    #[default]
    Smoothed,
    /// `max(0, ln((N − df + 0.5) / (df + 0.5)))`; zero for terms in half or
    /// more of the documents.
    RobertsonFloored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    #[serde(default)]
    pub idf: IdfVariant,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: 1.2,
            b: 0.75,
            idf: IdfVariant::Smoothed,
        }
    }
}

impl Bm25Params {
    pub fn idf(&self, doc_count: usize, df: usize) -> f64 {
        let n = doc_count as f64;
        let df = df as f64;
        let ratio = (n - df + 0.5) / (df + 0.5);
        match self.idf {
            IdfVariant::Smoothed => ratio.ln_1p(),
            IdfVariant::RobertsonFloored => ratio.ln().max(0.0),
        }
    }

    /// Saturated, length-normalised term frequency contribution.
    pub fn tf_weight(&self, tf: u32, doc_len: u32, avg_doc_len: f64) -> f64 {
        let tf = tf as f64;
        let len_ratio = if avg_doc_len > 0.0 {
            doc_len as f64 / avg_doc_len
        } else {
            1.0
        };
        tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * len_ratio))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Index {
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    postings: BTreeMap<String, Vec<Posting>>,
}

impl Index {
    pub fn build(corpus: &Corpus, params: Bm25Params) -> Result<Self, RetrievalError> {
        if corpus.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut docs: Vec<_> = corpus.passages().iter().collect();
        docs.sort_by(|a, b| a.id.cmp(&b.id));

        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_ids = Vec::with_capacity(docs.len());
        let mut doc_lengths = Vec::with_capacity(docs.len());
        for (doc, p) in docs.iter().enumerate() {
            let terms = tokenize(&p.text);
            doc_lengths.push(terms.len() as u32);
            doc_ids.push(p.id.clone());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    tf: count,
                });
            }
        }
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        Ok(Self {
            params,
            doc_ids,
            doc_lengths,
            avg_doc_length,
            postings,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, passage_id: &str) -> Option<u32> {
        self.doc_index(passage_id).map(|d| self.doc_lengths[d])
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn passage_id(&self, doc: u32) -> &str {
        &self.doc_ids[doc as usize]
    }

    fn doc_index(&self, passage_id: &str) -> Option<usize> {
        self.doc_ids.binary_search_by(|id| id.as_str().cmp(passage_id)).ok()
    }

    fn term_idf(&self, term: &str) -> Option<(f64, &[Posting])> {
        let list = self.postings.get(term)?;
        Some((self.params.idf(self.doc_count(), list.len()), list))
    }

    pub fn bm25_score(&self, query_terms: &[String], passage_id: &str) -> Result<f64, RetrievalError> {
        let doc = self
            .doc_index(passage_id)
            .ok_or_else(|| RetrievalError::UnknownPassage(passage_id.to_string()))?;
        let dl = self.doc_lengths[doc];
        let mut score = 0.0;
        for term in query_terms {
            let Some((idf, list)) = self.term_idf(term) else {
                continue;
            };
            if let Ok(pos) = list.binary_search_by_key(&(doc as u32), |p| p.doc) {
                score += idf * self.params.tf_weight(list[pos].tf, dl, self.avg_doc_length);
            }
        }
        Ok(score)
    }

    /// Top-`k` passages for `question`. Passages scoring zero are omitted, so
    /// the list may hold fewer than `k` entries.
    pub fn search(&self, query_id: &str, question: &str, k: usize) -> Result<RankedList, RetrievalError> {
        if k < 1 {
            return Err(RetrievalError::InvalidK(k));
        }
        let terms = tokenize(question);
        let mut acc = vec![0.0f64; self.doc_count()];
        for term in &terms {
            let Some((idf, list)) = self.term_idf(term) else {
                continue;
            };
            for p in list {
                let d = p.doc as usize;
                acc[d] += idf * self.params.tf_weight(p.tf, self.doc_lengths[d], self.avg_doc_length);
            }
        }
        let mut hits: Vec<(u32, f64)> = acc
            .into_iter()
            .enumerate()
            .filter(|&(_, s)| s > 0.0)
            .map(|(d, s)| (d as u32, s))
            .collect();
        let cmp = |a: &(u32, f64), b: &(u32, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, cmp);
            hits.truncate(k);
        }
        hits.sort_unstable_by(cmp);
        Ok(RankedList {
            query_id: query_id.to_string(),
            entries: hits
                .into_iter()
                .map(|(d, score)| RankedEntry {
                    passage_id: self.doc_ids[d as usize].clone(),
                    score,
                })
                .collect(),
            producer: Producer::Bm25,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), RetrievalError> {
        let path = dir.join(INDEX_FILE);
        let io = |e: &dyn std::fmt::Display| RetrievalError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| io(&e))?;
        let json = serde_json::to_string(self).map_err(|e| io(&e))?;
        fs::write(&path, json).map_err(|e| io(&e))
    }

    pub fn load(dir: &Path) -> Result<Self, RetrievalError> {
        let path = dir.join(INDEX_FILE);
        let io = |e: &dyn std::fmt::Display| RetrievalError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let raw = fs::read_to_string(&path).map_err(|e| io(&e))?;
        serde_json::from_str(&raw).map_err(|e| io(&e))
    }
}
