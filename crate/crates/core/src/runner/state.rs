//! On-disk run layout:
//!
//! ```text
//! <run>/manifest.json          identity of the run (config hash, dataset)
//! <run>/effective_config.toml  every setting, defaults filled in
//! <run>/records/<label>.jsonl  one RunRecord per completed cell
//! <run>/skips.jsonl            ineligible cells with a reason
//! <run>/failures.jsonl         cells that errored in the latest attempt
//! <run>/summary.json           counts for the latest attempt
//! ```

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::RunError;
use crate::metrics::ScoreRecord;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";
pub const RECORDS_DIR: &str = "records";
pub const SKIPS_FILE: &str = "skips.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

pub(crate) fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub dataset: String,
    pub dataset_hash: String,
    pub corpus: String,
    pub model_name: String,
    pub retriever: String,
    pub seed: u64,
    pub conditions: Vec<String>,
    pub queries: usize,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(&path, e))
    }
}

/// Creates the run directory, or checks that an existing one belongs to the
/// same configuration.
pub(crate) fn open_run(dir: &Path, manifest: &RunManifest, effective_config: &str) -> Result<(), RunError> {
    fs::create_dir_all(dir.join(RECORDS_DIR)).map_err(|e| io_err(dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    if path.exists() {
        let existing = RunManifest::load(dir)?;
        if existing.config_hash != manifest.config_hash {
            return Err(RunError::ConfigMismatch {
                dir: dir.display().to_string(),
                expected: manifest.config_hash.clone(),
                found: existing.config_hash,
            });
        }
        return Ok(());
    }
    write_atomic(&dir.join(EFFECTIVE_CONFIG_FILE), effective_config.as_bytes())?;
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_atomic(&path, json.as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordProvenance {
    /// Configured retriever (`bm25` or `bm25_rerank`).
    pub retriever: String,
    /// Where the context passages came from (`bm25`, `rerank`, `oracle`, `corpus`, `none`).
    pub context_source: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_seed: Option<u64>,
    pub prompt_template: String,
    pub model_name: String,
    pub cache_key: String,
    pub cached: bool,
    pub short: bool,
    pub dropped_for_budget: usize,
    pub latency_ms: u64,
    pub recorded_at_ms: u64,
}

/// One completed cell. Written once, never modified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub query_id: String,
    pub condition_label: String,
    pub prompt_hash: String,
    pub passage_ids: Vec<String>,
    pub answer: String,
    pub f1: f64,
    pub exact_match: u8,
    pub accuracy: u8,
    pub provenance: RecordProvenance,
}

impl RunRecord {
    pub fn score(&self) -> ScoreRecord {
        ScoreRecord {
            query_id: self.query_id.clone(),
            condition_label: self.condition_label.clone(),
            f1: self.f1,
            exact_match: self.exact_match,
            accuracy: self.accuracy,
        }
    }

    /// The record with wall-clock fields zeroed, for reproducibility checks.
    pub fn payload(&self) -> RunRecord {
        let mut r = self.clone();
        r.provenance.latency_ms = 0;
        r.provenance.recorded_at_ms = 0;
        r
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub query_id: String,
    pub condition_label: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub query_id: String,
    pub condition_label: String,
    pub error: String,
    pub transport: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub cells: usize,
    /// Cells already on disk when the run started.
    pub resumed: usize,
    pub completed: usize,
    pub skipped: usize,
    pub failed: usize,
    pub transport_failures: usize,
}

impl RunSummary {
    pub fn is_complete(&self) -> bool {
        self.failed == 0
    }
}

/// `retrieved:k=25:reverse` → `retrieved_k25_reverse.jsonl`.
pub fn record_file_name(label: &str) -> String {
    let stem: String = label
        .chars()
        .filter(|&c| c != '=')
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect();
    format!("{stem}.jsonl")
}

fn jsonl_files(dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

/// Parses every line of a jsonl file. Returns the parsed items and whether
/// any line was unreadable (a torn write).
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, bool), RunError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    let mut torn = false;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => out.push(v),
            Err(_) => torn = true,
        }
    }
    Ok((out, torn))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), RunError> {
    let mut buf = String::new();
    for it in items {
        buf.push_str(&serde_json::to_string(it).expect("entries serialize"));
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}

pub(crate) fn write_skips(dir: &Path, skips: &[SkipEntry]) -> Result<(), RunError> {
    write_jsonl(&dir.join(SKIPS_FILE), skips)
}

pub(crate) fn write_failures(dir: &Path, failures: &[FailureEntry]) -> Result<(), RunError> {
    write_jsonl(&dir.join(FAILURES_FILE), failures)
}

pub(crate) fn write_summary(dir: &Path, summary: &RunSummary) -> Result<(), RunError> {
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    write_atomic(&dir.join(SUMMARY_FILE), json.as_bytes())
}

pub fn read_skips(dir: &Path) -> Result<Vec<SkipEntry>, RunError> {
    let path = dir.join(SKIPS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read_jsonl(&path)?.0)
}

pub fn read_failures(dir: &Path) -> Result<Vec<FailureEntry>, RunError> {
    let path = dir.join(FAILURES_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read_jsonl(&path)?.0)
}

/// All records of a run. Torn lines are dropped and, when `repair` is set,
/// removed from disk so later appends start clean.
pub(crate) fn scan_records(dir: &Path, repair: bool) -> Result<Vec<RunRecord>, RunError> {
    let mut all = Vec::new();
    for path in jsonl_files(&dir.join(RECORDS_DIR))? {
        let (records, torn): (Vec<RunRecord>, bool) = read_jsonl(&path)?;
        if torn && repair {
            log::warn!("dropping unreadable lines from {}", path.display());
            write_jsonl(&path, &records)?;
        }
        all.extend(records);
    }
    Ok(all)
}

pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>, RunError> {
    scan_records(dir, false)
}

/// Score records from a run directory or from a directory of jsonl files
/// holding run records or bare score records.
pub fn load_score_records(dir: &Path) -> Result<Vec<ScoreRecord>, RunError> {
    let records_dir = dir.join(RECORDS_DIR);
    let source = if records_dir.is_dir() {
        records_dir
    } else {
        dir.to_path_buf()
    };
    let mut out = Vec::new();
    for path in jsonl_files(&source)? {
        let (scores, torn): (Vec<ScoreRecord>, bool) = read_jsonl(&path)?;
        if torn {
            log::warn!("skipped unreadable lines in {}", path.display());
        }
        out.extend(scores);
    }
    Ok(out)
}

/// Rewrites each record file ordered by `rank(query_id)`.
pub(crate) fn sort_record_files(dir: &Path, rank: &HashMap<&str, usize>) -> Result<(), RunError> {
    for path in jsonl_files(&dir.join(RECORDS_DIR))? {
        let (mut records, _): (Vec<RunRecord>, bool) = read_jsonl(&path)?;
        let key = |r: &RunRecord| {
            (
                rank.get(r.query_id.as_str()).copied().unwrap_or(usize::MAX),
                r.query_id.clone(),
            )
        };
        if records.windows(2).all(|w| key(&w[0]) <= key(&w[1])) {
            continue;
        }
        records.sort_by_key(key);
        write_jsonl(&path, &records)?;
    }
    Ok(())
}

pub(crate) fn completed_cells(records: &[RunRecord]) -> HashSet<(String, String)> {
    records
        .iter()
        .map(|r| (r.query_id.clone(), r.condition_label.clone()))
        .collect()
}

/// Appends records to per-condition files; each line is a single write.
pub(crate) struct RecordSink {
    dir: PathBuf,
    files: Mutex<HashMap<String, File>>,
}

impl RecordSink {
    pub(crate) fn new(run_dir: &Path) -> Self {
        Self {
            dir: run_dir.join(RECORDS_DIR),
            files: Mutex::new(HashMap::new()),
        }
    }

    pub(crate) fn append(&self, record: &RunRecord) -> Result<(), RunError> {
        let mut line = serde_json::to_string(record).expect("records serialize");
        line.push('\n');
        let mut files = self.files.lock().unwrap();
        if !files.contains_key(&record.condition_label) {
            let path = self.dir.join(record_file_name(&record.condition_label));
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| io_err(&path, e))?;
            files.insert(record.condition_label.clone(), f);
        }
        let f = files.get_mut(&record.condition_label).unwrap();
        f.write_all(line.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| io_err(&self.dir, e))
    }
}
