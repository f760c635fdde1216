//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seed = 13
//!
//! [data]
//! corpus = "corpus.jsonl"
//! dataset = "dataset.jsonl"
//!
//! [retriever]
//! kind = "bm25"            # or "bm25_rerank"
//!
//! [reader]
//! backend = "mock_containment"
//!
//! [[conditions]]
//! kind = "retrieved"
//! k_grid = [5, 10, 25, 50, 75, 100]
//! orderings = ["standard", "reverse", "random"]
//!
//! [[conditions]]
//! kind = "sweep"
//! k = 10
//!
//! [[conditions]]
//! kind = "oracle"
//! modes = ["closed_book", "oracle_passages", "oracle_bm25_reverse"]
//! k_grid = [10]
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::calibration::DEFAULT_K_GRID;
use crate::composer::{ContextMode, ContextSpec, DistractorPolicy, OrderingKind, PromptTemplate};
use crate::hash::StableHasher;
use crate::reader::ReaderConfig;
use crate::retrieval::{Bm25Params, IdfVariant, DEFAULT_EMBED_BATCH, DEFAULT_RERANK_POOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub corpus: PathBuf,
    pub dataset: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    #[default]
    Bm25,
    Bm25Rerank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieverConfig {
    pub kind: RetrieverKind,
    pub k1: f64,
    pub b: f64,
    pub idf: IdfVariant,
    pub pool: usize,
    pub embed_endpoint: Option<String>,
    pub embed_model: Option<String>,
    pub embed_batch: usize,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        let p = Bm25Params::default();
        Self {
            kind: RetrieverKind::Bm25,
            k1: p.k1,
            b: p.b,
            idf: p.idf,
            pool: DEFAULT_RERANK_POOL,
            embed_endpoint: None,
            embed_model: None,
            embed_batch: DEFAULT_EMBED_BATCH,
        }
    }
}

impl RetrieverConfig {
    pub fn bm25_params(&self) -> Bm25Params {
        Bm25Params {
            k1: self.k1,
            b: self.b,
            idf: self.idf,
        }
    }
}

fn default_k_grid() -> Vec<usize> {
    DEFAULT_K_GRID.iter().map(|&k| k as usize).collect()
}

fn default_orderings() -> Vec<OrderingKind> {
    OrderingKind::ALL.to_vec()
}

/// A family of conditions expanded into concrete [`ContextSpec`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionTemplate {
    Retrieved {
        #[serde(default = "default_k_grid")]
        k_grid: Vec<usize>,
        #[serde(default = "default_orderings")]
        orderings: Vec<OrderingKind>,
    },
    Sweep {
        k: usize,
        /// Defaults to every position `1..=k`; positions where the gold
        /// block does not fit are skipped per query.
        #[serde(default)]
        positions: Option<Vec<usize>>,
    },
    Oracle {
        modes: Vec<ContextMode>,
        /// Context sizes for the hybrid oracle+BM25 modes.
        #[serde(default = "default_k_grid")]
        k_grid: Vec<usize>,
    },
}

impl ConditionTemplate {
    pub fn expand(&self) -> Result<Vec<ContextSpec>, RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        let mut out = Vec::new();
        match self {
            ConditionTemplate::Retrieved { k_grid, orderings } => {
                for &k in k_grid {
                    for &ordering in orderings {
                        out.push(ContextSpec::Retrieved { k, ordering });
                    }
                }
            }
            ConditionTemplate::Sweep { k, positions } => {
                let positions = positions.clone().unwrap_or_else(|| (1..=*k).collect());
                for position in positions {
                    if position < 1 || position > *k {
                        return bad(format!("sweep position {position} outside 1..={k}"));
                    }
                    out.push(ContextSpec::PositionalSweep { k: *k, position });
                }
            }
            ConditionTemplate::Oracle { modes, k_grid } => {
                for &mode in modes {
                    match mode {
                        ContextMode::ClosedBook => out.push(ContextSpec::ClosedBook),
                        ContextMode::OraclePassages => out.push(ContextSpec::OraclePassages),
                        ContextMode::OracleSents => out.push(ContextSpec::OracleSents),
                        ContextMode::OracleBm25Standard => {
                            out.extend(k_grid.iter().map(|&k| ContextSpec::OracleBm25Standard { k }))
                        }
                        ContextMode::OracleBm25Reverse => {
                            out.extend(k_grid.iter().map(|&k| ContextSpec::OracleBm25Reverse { k }))
                        }
                        other => return bad(format!("'{}' is not an oracle mode", other.name())),
                    }
                }
            }
        }
        if out.iter().any(|s| s.k() == Some(0)) {
            return bad("context sizes must be positive".into());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub retriever: RetrieverConfig,
    #[serde(default)]
    pub reader: ReaderConfig,
    #[serde(default)]
    pub prompt: PromptTemplate,
    #[serde(default)]
    pub distractor_policy: DistractorPolicy,
    pub conditions: Vec<ConditionTemplate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(corpus: impl Into<PathBuf>, dataset: impl Into<PathBuf>, conditions: Vec<ConditionTemplate>) -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                corpus: corpus.into(),
                dataset: dataset.into(),
            },
            retriever: RetrieverConfig::default(),
            reader: ReaderConfig::default(),
            prompt: PromptTemplate::default(),
            distractor_policy: DistractorPolicy::default(),
            conditions,
            out_dir: None,
        }
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, RunError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.corpus);
        fix(&mut self.data.dataset);
        if let Some(o) = self.out_dir.as_mut() {
            fix(o);
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.conditions.is_empty() {
            return Err(RunError::Config("at least one condition is required".into()));
        }
        self.specs()?;
        self.reader.validate().map_err(|e| RunError::Config(e.to_string()))?;
        if self.retriever.kind == RetrieverKind::Bm25Rerank
            && (self.retriever.embed_endpoint.is_none() || self.retriever.embed_model.is_none())
        {
            return Err(RunError::Config(
                "bm25_rerank requires embed_endpoint and embed_model".into(),
            ));
        }
        Ok(())
    }

    /// Every concrete condition, deduplicated, in template order.
    pub fn specs(&self) -> Result<Vec<ContextSpec>, RunError> {
        let mut out: Vec<ContextSpec> = Vec::new();
        for t in &self.conditions {
            for s in t.expand()? {
                if !out.contains(&s) {
                    out.push(s);
                }
            }
        }
        Ok(out)
    }

    /// Deepest retrieval any condition needs.
    pub fn retrieval_depth(&self) -> Result<usize, RunError> {
        let specs = self.specs()?;
        let deepest = specs.iter().filter_map(|s| s.k()).max().unwrap_or(0) as usize;
        Ok(match self.retriever.kind {
            RetrieverKind::Bm25 => deepest,
            RetrieverKind::Bm25Rerank => deepest.max(self.retriever.pool),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash over every setting that can change a record's content.
    /// Concurrency, output and cache locations are excluded.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.reader.concurrency = 1;
        c.reader.cache_dir = None;
        c.reader.api_key_env = String::new();
        c.reader.timeout_secs = 0;
        c.reader.max_retries = 0;
        StableHasher::new()
            .str(&serde_json::to_string(&c).expect("config serializes"))
            .finish_hex()
    }
}
