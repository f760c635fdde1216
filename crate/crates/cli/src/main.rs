//! `ragorder`: ingest, index, retrieve, compose, run, calibrate and report.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ragorder_core::calibration::{
    calibrate, default_pairs, synthetic_matrix, CalibrationConfig, CalibrationError, ScoreMatrix, StrategyPair,
    DEFAULT_BUDGETS, DEFAULT_EPSILON, DEFAULT_K_GRID, DEFAULT_SUBSETS,
};
use ragorder_core::corpus::{load_corpus, read_dataset, validate, CorpusError};
use ragorder_core::reader::{Backend, ReaderError, DEFAULT_API_KEY_ENV};
use ragorder_core::retrieval::{
    rerank, Bm25Params, CachedEmbedder, HttpEmbeddingProvider, IdfVariant, Index, RetrievalError, DEFAULT_EMBED_BATCH,
    DEFAULT_RERANK_POOL,
};
use ragorder_core::runner::{
    build_report, configured_embedder, load_run, load_score_records, run_experiment, write_report, Experiment,
    ExperimentConfig, ReportMode, RunError, SkipEntry, EMBEDDING_JOURNAL,
};

const EXIT_VALIDATION: u8 = 2;
const EXIT_GRID: u8 = 3;
const EXIT_TRANSPORT: u8 = 4;

#[derive(Parser)]
#[command(
    name = "ragorder",
    version,
    about = "Passage-ordering experiments for retrieval-augmented QA"
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and dataset and write a validation report.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Build a BM25 index over a corpus.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1.2)]
        k1: f64,
        #[arg(long, default_value_t = 0.75)]
        b: f64,
        /// `smoothed` or `robertson_floored`.
        #[arg(long, default_value = "smoothed", value_parser = parse_idf)]
        idf: IdfVariant,
    },
    /// Write the top-k ranked list for every query.
    Retrieve(RetrieveArgs),
    /// Write the composed context (prompt included) of every grid cell.
    Compose,
    /// Execute the configured grid, resuming an existing run directory.
    Run(RunArgs),
    /// Recommend a topic budget from run records or synthetic scores.
    Calibrate(CalibrateArgs),
    /// Aggregate one or more run directories.
    Report {
        /// Run directory; repeat to compare models.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "curves")]
        mode: ReportMode,
        /// Strategy pair such as `reverse:standard`; repeatable.
        #[arg(long = "pair")]
        pairs: Vec<StrategyPair>,
    },
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    k: usize,
    /// Rerank the BM25 pool by embedding similarity.
    #[arg(long)]
    rerank: bool,
    /// Passage texts for reranking.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RERANK_POOL)]
    pool: usize,
    #[arg(long)]
    embed_endpoint: Option<String>,
    #[arg(long)]
    embed_model: Option<String>,
    #[arg(long, default_value_t = DEFAULT_EMBED_BATCH)]
    embed_batch: usize,
}

#[derive(Args)]
struct RunArgs {
    /// `http_chat`, `mock_containment` or `mock_positional`.
    #[arg(long)]
    backend: Option<Backend>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    concurrency: Option<usize>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Run directory whose records supply per-topic F1.
    #[arg(long = "run", conflicts_with = "synthetic")]
    run: Option<PathBuf>,
    /// Use planted-effect synthetic scores instead of a run.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 0.01, requires = "synthetic")]
    mu: f64,
    #[arg(long, default_value_t = 0.15, requires = "synthetic")]
    sigma: f64,
    #[arg(long, default_value_t = 5000, requires = "synthetic")]
    topics: usize,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BUDGETS)]
    budgets: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_SUBSETS)]
    subsets: usize,
    #[arg(long = "k", value_delimiter = ',', default_values_t = DEFAULT_K_GRID)]
    k_grid: Vec<u32>,
    /// Strategy pair such as `reverse:standard`; repeatable.
    #[arg(long = "pair")]
    pairs: Vec<StrategyPair>,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// Draw smaller budgets as prefixes of larger ones.
    #[arg(long)]
    nested: bool,
}

fn parse_idf(s: &str) -> Result<IdfVariant, String> {
    match s {
        "smoothed" => Ok(IdfVariant::Smoothed),
        "robertson_floored" => Ok(IdfVariant::RobertsonFloored),
        _ => Err(format!("unknown idf variant '{s}'")),
    }
}

/// Exit status for a failed command.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<RunError>() {
            return match e {
                RunError::Config(_) | RunError::Corpus(_) | RunError::ConfigMismatch { .. } => EXIT_VALIDATION,
                RunError::MixedDatasets(..) | RunError::Report(_) => EXIT_VALIDATION,
                RunError::Reader(r) if r.is_transport() => EXIT_TRANSPORT,
                RunError::Reader(ReaderError::Config(_)) => EXIT_VALIDATION,
                RunError::Retrieval(RetrievalError::Http(h)) if h.attempts().is_some() => EXIT_TRANSPORT,
                _ => 1,
            };
        }
        if cause.downcast_ref::<CorpusError>().is_some() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<CalibrationError>() {
            return match e {
                CalibrationError::CoverageGap(_) => EXIT_GRID,
                _ => EXIT_VALIDATION,
            };
        }
        if let Some(RetrievalError::Http(h)) = cause.downcast_ref::<RetrievalError>() {
            if h.attempts().is_some() {
                return EXIT_TRANSPORT;
            }
        }
        if let Some(e) = cause.downcast_ref::<ReaderError>() {
            return if e.is_transport() { EXIT_TRANSPORT } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose {
        "debug"
    } else {
        "info"
    }))
    .format_timestamp(None)
    .init();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Ingest { corpus, dataset } => ingest(cli, corpus, dataset),
        Command::Index { corpus, k1, b, idf } => index(
            cli,
            corpus,
            Bm25Params {
                k1: *k1,
                b: *b,
                idf: *idf,
            },
        ),
        Command::Retrieve(args) => retrieve(cli, args),
        Command::Compose => compose(cli),
        Command::Run(args) => run(cli, args),
        Command::Calibrate(args) => calibrate_cmd(cli, args),
        Command::Report { runs, mode, pairs } => report(cli, runs, *mode, pairs),
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    let dir = cli
        .out
        .as_deref()
        .ok_or_else(|| RunError::Config("--out is required".into()))?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| RunError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn jsonl_writer(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn ingest(cli: &Cli, corpus: &Path, dataset: &Path) -> Result<u8> {
    let corpus = load_corpus(corpus)?;
    let dataset = read_dataset(dataset, corpus.name())?;
    let report = validate(&dataset, &corpus);
    match &cli.out {
        Some(_) => {
            let path = out_dir(cli)?.join("validation_report.json");
            write_json(&path, &report)?;
            log::info!("wrote {}", path.display());
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    for v in &report.violations {
        log::error!("{v}");
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    log::info!(
        "{} queries, {} passages, {} violation(s)",
        report.queries,
        report.passages,
        report.violations.len()
    );
    Ok(if report.is_valid() { 0 } else { EXIT_VALIDATION })
}

fn index(cli: &Cli, corpus: &Path, params: Bm25Params) -> Result<u8> {
    let corpus = load_corpus(corpus)?;
    let index = Index::build(&corpus, params)?;
    let dir = out_dir(cli)?;
    index.save(dir)?;
    log::info!("indexed {} passages into {}", index.doc_count(), dir.display());
    Ok(0)
}

fn retrieve(cli: &Cli, args: &RetrieveArgs) -> Result<u8> {
    let index = Index::load(&args.index)?;
    let dataset = read_dataset(&args.dataset, "")?;
    let dir = out_dir(cli)?;
    let reranker = if args.rerank {
        let corpus_path = args
            .corpus
            .as_deref()
            .ok_or_else(|| RunError::Config("--rerank needs --corpus".into()))?;
        let (Some(endpoint), Some(model)) = (&args.embed_endpoint, &args.embed_model) else {
            return Err(RunError::Config("--rerank needs --embed-endpoint and --embed-model".into()).into());
        };
        let api_key = std::env::var(DEFAULT_API_KEY_ENV).ok().filter(|k| !k.is_empty());
        let provider =
            HttpEmbeddingProvider::new(endpoint.clone(), model.clone(), api_key).with_batch_size(args.embed_batch);
        let cache = dir.join("cache");
        fs::create_dir_all(&cache)?;
        let embedder = CachedEmbedder::with_journal(provider, &cache.join(EMBEDDING_JOURNAL))?;
        Some((load_corpus(corpus_path)?, embedder))
    } else {
        None
    };
    let path = dir.join("ranked.jsonl");
    let mut w = jsonl_writer(&path)?;
    for q in &dataset.queries {
        let list = match &reranker {
            None => index.search(&q.id, &q.question, args.k)?,
            Some((corpus, embedder)) => {
                let pool = index.search(&q.id, &q.question, args.pool)?;
                rerank(&pool, &q.question, corpus, embedder, args.pool, args.k)?
            }
        };
        writeln!(w, "{}", serde_json::to_string(&list)?)?;
    }
    w.flush()?;
    log::info!("wrote {} ranked lists to {}", dataset.queries.len(), path.display());
    Ok(0)
}

fn compose(cli: &Cli) -> Result<u8> {
    let cfg = load_config(cli)?;
    let dir = out_dir(cli)?;
    let exp = Experiment::load(cfg)?;
    let embedder = configured_embedder(exp.config(), &dir.join("cache"))?;
    let path = dir.join("contexts.jsonl");
    let mut w = jsonl_writer(&path)?;
    let mut skips = Vec::new();
    let mut written = 0usize;
    for q in &exp.dataset().queries {
        let ranked = exp.retrieve(q, embedder.as_deref()).map_err(RunError::from)?;
        for &spec in exp.specs() {
            let label = spec.to_string();
            if let Some(reason) = exp.ineligibility(q, &spec) {
                skips.push(SkipEntry {
                    query_id: q.id.clone(),
                    condition_label: label,
                    reason,
                });
                continue;
            }
            match exp.compose(q, spec, ranked.as_ref()) {
                Ok(ctx) => {
                    writeln!(w, "{}", serde_json::to_string(&ctx)?)?;
                    written += 1;
                }
                Err(e) => skips.push(SkipEntry {
                    query_id: q.id.clone(),
                    condition_label: label,
                    reason: e.to_string(),
                }),
            }
        }
    }
    w.flush()?;
    let skip_path = dir.join("compose_skips.jsonl");
    let mut sw = jsonl_writer(&skip_path)?;
    for s in &skips {
        writeln!(sw, "{}", serde_json::to_string(s)?)?;
    }
    sw.flush()?;
    log::info!(
        "wrote {written} contexts to {} ({} skipped)",
        path.display(),
        skips.len()
    );
    Ok(0)
}

fn run(cli: &Cli, args: &RunArgs) -> Result<u8> {
    let mut cfg = load_config(cli)?;
    if let Some(b) = args.backend {
        cfg.reader.backend = b;
    }
    if let Some(m) = &args.model {
        cfg.reader.model_name = m.clone();
    }
    if let Some(e) = &args.endpoint {
        cfg.reader.endpoint = Some(e.clone());
    }
    if let Some(c) = args.concurrency {
        cfg.reader.concurrency = c;
    }
    let dir = match (&cli.out, &cfg.out_dir) {
        (Some(_), _) => out_dir(cli)?.to_path_buf(),
        (None, Some(d)) => d.clone(),
        (None, None) => bail!(RunError::Config(
            "no output directory: pass --out or set out_dir".into()
        )),
    };
    let summary = run_experiment(&cfg, &dir)?;
    log::info!(
        "{} cells: {} resumed, {} completed, {} skipped, {} failed",
        summary.cells,
        summary.resumed,
        summary.completed,
        summary.skipped,
        summary.failed
    );
    Ok(if summary.transport_failures > 0 {
        EXIT_TRANSPORT
    } else if summary.failed > 0 {
        EXIT_GRID
    } else {
        0
    })
}

fn calibrate_cmd(cli: &Cli, args: &CalibrateArgs) -> Result<u8> {
    let seed = match (cli.seed, &cli.config) {
        (Some(s), _) => s,
        (None, Some(_)) => load_config(cli)?.seed,
        (None, None) => 0,
    };
    let pairs = if args.pairs.is_empty() {
        if args.synthetic {
            vec![StrategyPair::new("reverse", "standard")]
        } else {
            default_pairs()
        }
    } else {
        args.pairs.clone()
    };
    let matrix = if args.synthetic {
        if pairs.len() != 1 {
            bail!(RunError::Config(
                "synthetic calibration takes exactly one --pair".into()
            ));
        }
        if args.sigma.is_nan() || args.sigma < 0.0 {
            bail!(RunError::Config("--sigma must be non-negative".into()));
        }
        synthetic_matrix(args.mu, args.sigma, args.topics, seed, &pairs[0], &args.k_grid)
    } else {
        let run = args
            .run
            .as_deref()
            .ok_or_else(|| RunError::Config("pass --run <dir> or --synthetic".into()))?;
        ScoreMatrix::from_records(&load_score_records(run)?)
    };
    let config = CalibrationConfig {
        budgets: args.budgets.clone(),
        subsets_per_budget: args.subsets,
        seed,
        strategy_pairs: pairs,
        k_grid: args.k_grid.clone(),
        epsilon: args.epsilon,
        nested: args.nested,
    };
    let report = calibrate(&matrix, &config)?;
    let dir = out_dir(cli)?;
    write_json(&dir.join("calibration.json"), &report)?;
    fs::write(dir.join("calibration.csv"), report.cells_csv())?;
    for t in &report.criterion_trace {
        log::info!(
            "n={}: {} cells, {} noticeable, {} crossing, {} vetoing",
            t.n,
            t.cells,
            t.noticeable,
            t.crossings,
            t.vetoing
        );
    }
    println!("recommended budget: {}", report.recommendation);
    Ok(0)
}

fn report(cli: &Cli, runs: &[PathBuf], mode: ReportMode, pairs: &[StrategyPair]) -> Result<u8> {
    let data = runs
        .iter()
        .map(|d| load_run(d).with_context(|| format!("loading run {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let report = build_report(&data, mode, pairs)?;
    let dir = out_dir(cli)?;
    let (csv, json) = write_report(&report, dir)?;
    log::info!("wrote {} and {}", csv.display(), json.display());
    if report.csv.lines().count() <= 1 {
        log::warn!("{mode} report has no rows");
    }
    Ok(0)
}
