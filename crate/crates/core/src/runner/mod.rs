//! Grid execution: one retrieval pass per query, then composition,
//! generation and scoring for every (query, condition) cell, with
//! resumable on-disk state.

mod config;
mod report;
mod state;

pub use config::{ConditionTemplate, DataConfig, ExperimentConfig, RetrieverConfig, RetrieverKind};
pub use report::{build_report, load_run, write_report, Report, ReportMode, RunData};
pub use state::{
    load_records, load_score_records, read_failures, read_skips, record_file_name, FailureEntry, RecordProvenance,
    RunManifest, RunRecord, RunSummary, SkipEntry, EFFECTIVE_CONFIG_FILE, FAILURES_FILE, MANIFEST_FILE, RECORDS_DIR,
    SKIPS_FILE, SUMMARY_FILE,
};

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crate::composer::{ComposeError, ComposedContext, Composer, ContextMode, ContextSpec, DistractorPolicy};
use crate::corpus::{load_corpus, load_dataset, validate, Corpus, CorpusError, Dataset, Query};
use crate::hash::content_hash;
use crate::http::{HttpError, JsonClient};
use crate::metrics::{score, MetricsError};
use crate::reader::{AnswerCache, GenerationRequest, Generator, Reader, ReaderError};
use crate::retrieval::{
    rerank, CachedEmbedder, EmbeddingProvider, HttpEmbeddingProvider, Index, RankedList, RetrievalError,
};
use state::{io_err, RecordSink};

pub const EMBEDDING_JOURNAL: &str = "embeddings.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Reader(#[from] ReaderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("run directory {dir} belongs to config {found}, current config is {expected}")]
    ConfigMismatch {
        dir: String,
        expected: String,
        found: String,
    },
    #[error("cannot combine runs over different datasets: {0} vs {1}")]
    MixedDatasets(String, String),
    #[error("report: {0}")]
    Report(String),
}

/// A loaded, validated and indexed experiment.
pub struct Experiment {
    config: ExperimentConfig,
    corpus: Corpus,
    dataset: Dataset,
    index: Index,
    specs: Vec<ContextSpec>,
    /// Candidates fetched from BM25 per query.
    search_depth: usize,
    /// Length of the list handed to composition.
    list_depth: usize,
}

impl Experiment {
    pub fn load(config: ExperimentConfig) -> Result<Self, RunError> {
        config.validate()?;
        let corpus = load_corpus(&config.data.corpus)?;
        let dataset = load_dataset(&config.data.dataset, &corpus)?;
        Self::from_parts(config, corpus, dataset)
    }

    pub fn from_parts(config: ExperimentConfig, corpus: Corpus, dataset: Dataset) -> Result<Self, RunError> {
        config.validate()?;
        let report = validate(&dataset, &corpus);
        if !report.is_valid() {
            return Err(CorpusError::Validation(report.violations).into());
        }
        let index = Index::build(&corpus, config.retriever.bm25_params())?;
        let specs = config.specs()?;

        let max_golds = dataset
            .queries
            .iter()
            .map(|q| q.gold_passage_ids.len())
            .max()
            .unwrap_or(0);
        let list_depth = specs
            .iter()
            .filter(|s| needs_ranking(s, config.distractor_policy))
            .map(|s| match s {
                // retrieved distractors must survive removal of the golds
                ContextSpec::PositionalSweep { k, .. } => k + max_golds,
                other => other.k().unwrap_or(0) as usize,
            })
            .max()
            .unwrap_or(0);
        let search_depth = match config.retriever.kind {
            RetrieverKind::Bm25 => list_depth,
            RetrieverKind::Bm25Rerank => {
                if list_depth > config.retriever.pool {
                    return Err(RunError::Config(format!(
                        "rerank pool {} is smaller than the deepest context ({list_depth})",
                        config.retriever.pool
                    )));
                }
                config.retriever.pool
            }
        };
        Ok(Self {
            config,
            corpus,
            dataset,
            index,
            specs,
            search_depth,
            list_depth,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn index(&self) -> &Index {
        &self.index
    }

    pub fn specs(&self) -> &[ContextSpec] {
        &self.specs
    }

    pub fn composer(&self) -> Composer<'_> {
        Composer::new(
            &self.corpus,
            self.config.prompt.clone(),
            self.config.seed,
            self.config.distractor_policy,
        )
    }

    pub fn manifest(&self) -> RunManifest {
        let queries = serde_json::to_string(&self.dataset.queries).expect("queries serialize");
        RunManifest {
            config_hash: self.config.fingerprint(),
            dataset: self.dataset.name.clone(),
            dataset_hash: content_hash(queries.as_bytes()),
            corpus: self.corpus.name().to_string(),
            model_name: self.config.reader.model_name.clone(),
            retriever: retriever_name(self.config.retriever.kind).to_string(),
            seed: self.config.seed,
            conditions: self.specs.iter().map(|s| s.to_string()).collect(),
            queries: self.dataset.queries.len(),
        }
    }

    /// The query's ranked list at the depth the configured conditions need,
    /// or `None` when no condition uses retrieval.
    pub fn retrieve(
        &self,
        query: &Query,
        embedder: Option<&dyn EmbeddingProvider>,
    ) -> Result<Option<RankedList>, RetrievalError> {
        if self.list_depth == 0 {
            return Ok(None);
        }
        let list = self.index.search(&query.id, &query.question, self.search_depth)?;
        match self.config.retriever.kind {
            RetrieverKind::Bm25 => Ok(Some(list)),
            RetrieverKind::Bm25Rerank => {
                let provider =
                    embedder.ok_or_else(|| RetrievalError::InvalidRerank("no embedding provider configured".into()))?;
                rerank(
                    &list,
                    &query.question,
                    &self.corpus,
                    provider,
                    self.config.retriever.pool,
                    self.list_depth,
                )
                .map(Some)
            }
        }
    }

    /// Why `spec` cannot be applied to `query`, if that is knowable
    /// without composing.
    pub fn ineligibility(&self, query: &Query, spec: &ContextSpec) -> Option<String> {
        let mode = spec.mode();
        if mode.needs_golds() && !query.has_gold_passages() {
            return Some("no gold passages".into());
        }
        if mode == ContextMode::OracleSents && !query.has_gold_sentences() {
            return Some("no gold sentences".into());
        }
        if let ContextSpec::PositionalSweep { k, position } = *spec {
            let golds = query.gold_passage_ids.len();
            if position + golds - 1 > k {
                return Some(format!(
                    "gold block of {golds} does not fit at position {position} in k={k}"
                ));
            }
        }
        None
    }

    pub fn compose(
        &self,
        query: &Query,
        spec: ContextSpec,
        ranked: Option<&RankedList>,
    ) -> Result<ComposedContext, ComposeError> {
        self.composer().compose(query, spec, ranked)
    }

    /// Executes every pending cell, appending records under `out_dir`.
    /// Cells already recorded there are not re-run.
    pub fn run(
        &self,
        out_dir: &Path,
        generator: &dyn Generator,
        embedder: Option<&dyn EmbeddingProvider>,
    ) -> Result<RunSummary, RunError> {
        let manifest = self.manifest();
        state::open_run(out_dir, &manifest, &self.config.to_toml())?;
        let existing = state::scan_records(out_dir, true)?;
        let done = state::completed_cells(&existing);

        let mut summary = RunSummary::default();
        let mut skips: Vec<(usize, usize, SkipEntry)> = Vec::new();
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (qi, query) in self.dataset.queries.iter().enumerate() {
            let mut pending = Vec::new();
            for (si, spec) in self.specs.iter().enumerate() {
                summary.cells += 1;
                let label = spec.to_string();
                if done.contains(&(query.id.clone(), label.clone())) {
                    summary.resumed += 1;
                } else if let Some(reason) = self.ineligibility(query, spec) {
                    skips.push((qi, si, skip(query, &label, reason)));
                } else {
                    pending.push(si);
                }
            }
            if !pending.is_empty() {
                groups.push((qi, pending));
            }
        }
        log::info!(
            "{} cells: {} already recorded, {} ineligible, {} queries pending",
            summary.cells,
            summary.resumed,
            skips.len(),
            groups.len()
        );

        let sink = RecordSink::new(out_dir);
        let outcomes = Mutex::new(Outcomes::default());
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let workers = self.config.reader.concurrency.min(groups.len()).max(1);
        let composer = self.composer();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let g = next.fetch_add(1, Ordering::SeqCst);
                    let Some((qi, specs)) = groups.get(g) else { break };
                    let result = self.run_group(*qi, specs, &composer, generator, embedder, &sink);
                    let mut o = outcomes.lock().unwrap();
                    o.merge(result);
                    if o.fatal.is_some() || o.failures.iter().any(|(_, _, f)| f.transport) {
                        abort.store(true, Ordering::SeqCst);
                    }
                });
            }
        });
        let mut outcomes = outcomes.into_inner().unwrap();
        if let Some(e) = outcomes.fatal.take() {
            return Err(e);
        }
        // groups never started because of an abort
        let attempted: std::collections::HashSet<usize> = outcomes.attempted.iter().copied().collect();
        for (qi, specs) in &groups {
            if attempted.contains(qi) {
                continue;
            }
            let q = &self.dataset.queries[*qi];
            for &si in specs {
                outcomes.failures.push((
                    *qi,
                    si,
                    FailureEntry {
                        query_id: q.id.clone(),
                        condition_label: self.specs[si].to_string(),
                        error: "not attempted: run stopped after a transport failure".into(),
                        transport: false,
                    },
                ));
            }
        }

        skips.extend(outcomes.skips);
        skips.sort_by_key(|(qi, si, _)| (*qi, *si));
        outcomes.failures.sort_by_key(|(qi, si, _)| (*qi, *si));
        summary.completed = outcomes.completed;
        summary.skipped = skips.len();
        summary.failed = outcomes.failures.len();
        summary.transport_failures = outcomes.failures.iter().filter(|(_, _, f)| f.transport).count();

        let rank: HashMap<&str, usize> = self
            .dataset
            .queries
            .iter()
            .enumerate()
            .map(|(i, q)| (q.id.as_str(), i))
            .collect();
        state::sort_record_files(out_dir, &rank)?;
        state::write_skips(out_dir, &skips.into_iter().map(|(_, _, s)| s).collect::<Vec<_>>())?;
        state::write_failures(
            out_dir,
            &outcomes.failures.into_iter().map(|(_, _, f)| f).collect::<Vec<_>>(),
        )?;
        state::write_summary(out_dir, &summary)?;
        Ok(summary)
    }

    fn run_group(
        &self,
        qi: usize,
        specs: &[usize],
        composer: &Composer<'_>,
        generator: &dyn Generator,
        embedder: Option<&dyn EmbeddingProvider>,
        sink: &RecordSink,
    ) -> Outcomes {
        let query = &self.dataset.queries[qi];
        let mut out = Outcomes {
            attempted: vec![qi],
            ..Default::default()
        };
        let policy = self.config.distractor_policy;
        let ranked = if specs.iter().any(|&si| needs_ranking(&self.specs[si], policy)) {
            self.retrieve(query, embedder)
        } else {
            Ok(None)
        };
        for &si in specs {
            let spec = self.specs[si];
            let label = spec.to_string();
            let fail = |error: String, transport: bool| FailureEntry {
                query_id: query.id.clone(),
                condition_label: label.clone(),
                error,
                transport,
            };
            let ranked = match &ranked {
                Ok(r) => r.as_ref(),
                Err(e) if needs_ranking(&spec, policy) => {
                    let transport = matches!(e, RetrievalError::Http(HttpError::Transport { .. }));
                    out.failures.push((qi, si, fail(format!("retrieval: {e}"), transport)));
                    continue;
                }
                Err(_) => None,
            };
            let context = match composer.compose(query, spec, ranked) {
                Ok(c) => c,
                Err(
                    e @ (ComposeError::NoGolds { .. }
                    | ComposeError::Placement { .. }
                    | ComposeError::InsufficientDistractors { .. }
                    | ComposeError::MissingSentences(_)),
                ) => {
                    out.skips.push((qi, si, skip(query, &label, e.to_string())));
                    continue;
                }
                Err(e) => {
                    out.failures.push((qi, si, fail(format!("compose: {e}"), false)));
                    continue;
                }
            };
            let answer = match generator.generate(GenerationRequest {
                query,
                context: &context,
            }) {
                Ok(a) => a,
                Err(e) => {
                    let transport = e.is_transport();
                    out.failures.push((qi, si, fail(format!("reader: {e}"), transport)));
                    if transport {
                        // the endpoint is unreachable; the rest of the group would fail the same way
                        for &rest in specs.iter().skip_while(|&&s| s != si).skip(1) {
                            out.failures.push((
                                qi,
                                rest,
                                FailureEntry {
                                    query_id: query.id.clone(),
                                    condition_label: self.specs[rest].to_string(),
                                    error: "not attempted: run stopped after a transport failure".into(),
                                    transport: false,
                                },
                            ));
                        }
                        return out;
                    }
                    continue;
                }
            };
            let scored = match score(&query.id, &label, &answer.text, &query.gold_answers) {
                Ok(s) => s,
                Err(e) => {
                    out.failures.push((qi, si, fail(format!("metrics: {e}"), false)));
                    continue;
                }
            };
            let record = RunRecord {
                query_id: query.id.clone(),
                condition_label: label.clone(),
                prompt_hash: content_hash(context.prompt.as_bytes()),
                passage_ids: context.passage_ids.clone(),
                answer: answer.text,
                f1: scored.f1,
                exact_match: scored.exact_match,
                accuracy: scored.accuracy,
                provenance: RecordProvenance {
                    retriever: retriever_name(self.config.retriever.kind).to_string(),
                    context_source: context.provenance.source.clone(),
                    seed: self.config.seed,
                    context_seed: context.provenance.seed,
                    prompt_template: context.provenance.template.clone(),
                    model_name: generator.model_name().to_string(),
                    cache_key: answer.cache_key,
                    cached: answer.cached,
                    short: context.provenance.short,
                    dropped_for_budget: context.provenance.dropped_for_budget,
                    latency_ms: answer.latency_ms,
                    recorded_at_ms: now_ms(),
                },
            };
            if let Err(e) = sink.append(&record) {
                out.fatal = Some(e);
                return out;
            }
            out.completed += 1;
        }
        out
    }
}

#[derive(Default)]
struct Outcomes {
    attempted: Vec<usize>,
    completed: usize,
    skips: Vec<(usize, usize, SkipEntry)>,
    failures: Vec<(usize, usize, FailureEntry)>,
    fatal: Option<RunError>,
}

impl Outcomes {
    fn merge(&mut self, other: Outcomes) {
        self.attempted.extend(other.attempted);
        self.completed += other.completed;
        self.skips.extend(other.skips);
        self.failures.extend(other.failures);
        if self.fatal.is_none() {
            self.fatal = other.fatal;
        }
    }
}

fn skip(query: &Query, label: &str, reason: String) -> SkipEntry {
    SkipEntry {
        query_id: query.id.clone(),
        condition_label: label.to_string(),
        reason,
    }
}

fn needs_ranking(spec: &ContextSpec, policy: DistractorPolicy) -> bool {
    match spec {
        ContextSpec::Retrieved { .. }
        | ContextSpec::OracleBm25Standard { .. }
        | ContextSpec::OracleBm25Reverse { .. } => true,
        ContextSpec::PositionalSweep { .. } => policy == DistractorPolicy::Retrieved,
        _ => false,
    }
}

fn retriever_name(kind: RetrieverKind) -> &'static str {
    match kind {
        RetrieverKind::Bm25 => "bm25",
        RetrieverKind::Bm25Rerank => "bm25_rerank",
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn api_key(env: &str) -> Option<String> {
    if env.is_empty() {
        return None;
    }
    std::env::var(env).ok().filter(|k| !k.is_empty())
}

/// The embedding provider a rerank configuration asks for, cached in
/// `cache_dir`.
pub fn configured_embedder(
    config: &ExperimentConfig,
    cache_dir: &Path,
) -> Result<Option<Box<dyn EmbeddingProvider>>, RunError> {
    if config.retriever.kind != RetrieverKind::Bm25Rerank {
        return Ok(None);
    }
    let r = &config.retriever;
    let (Some(endpoint), Some(model)) = (&r.embed_endpoint, &r.embed_model) else {
        return Err(RunError::Config(
            "bm25_rerank requires embed_endpoint and embed_model".into(),
        ));
    };
    let client = JsonClient::new(
        Duration::from_secs(config.reader.timeout_secs),
        config.reader.max_retries,
        api_key(&config.reader.api_key_env),
    );
    let provider = HttpEmbeddingProvider::new(endpoint.clone(), model.clone(), None)
        .with_client(client)
        .with_batch_size(r.embed_batch);
    std::fs::create_dir_all(cache_dir).map_err(|e| io_err(cache_dir, e))?;
    let cached = CachedEmbedder::with_journal(provider, &cache_dir.join(EMBEDDING_JOURNAL))?;
    Ok(Some(Box::new(cached)))
}

/// Loads the experiment, builds the configured reader and embedder, and
/// runs the grid into `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary, RunError> {
    let experiment = Experiment::load(config.clone())?;
    let cache_dir = config.reader.cache_dir.as_ref().map(|d| out_dir.join(d));
    let cache = match &cache_dir {
        Some(d) => Some(AnswerCache::open(d)?),
        None => None,
    };
    let reader = Reader::new(config.reader.clone(), cache)?;
    let embedder = configured_embedder(config, cache_dir.as_deref().unwrap_or(&out_dir.join("cache")))?;
    experiment.run(out_dir, &reader, embedder.as_deref())
}
