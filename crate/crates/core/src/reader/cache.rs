use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::ReaderError;

pub const CACHE_JOURNAL: &str = "answers.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model: String,
    pub prompt: String,
    pub text: String,
    pub latency_ms: u64,
}

/// Content-addressed answer store backed by an append-only journal.
/// Lookups share a read lock; appends are serialized.
pub struct AnswerCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, CacheEntry>>,
    writer: Mutex<File>,
}

impl AnswerCache {
    pub fn open(dir: &Path) -> Result<Self, ReaderError> {
        let err = |e: std::io::Error| ReaderError::Cache(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(err)?;
        let path = dir.join(CACHE_JOURNAL);
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path).map_err(err)?).lines() {
                let line = line.map_err(err)?;
                // skip a torn tail line left by a crash
                if let Ok(e) = serde_json::from_str::<CacheEntry>(&line) {
                    entries.insert(e.key.clone(), e);
                }
            }
        }
        let mut writer = OpenOptions::new().create(true).append(true).open(&path).map_err(err)?;
        // terminate a torn tail so the next append starts on a fresh line
        let bytes = fs::read(&path).map_err(err)?;
        if bytes.last().is_some_and(|&b| b != b'\n') {
            writer.write_all(b"\n").map_err(err)?;
        }
        Ok(Self {
            path,
            entries: RwLock::new(entries),
            writer: Mutex::new(writer),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn put(&self, entry: CacheEntry) -> Result<(), ReaderError> {
        let mut line = serde_json::to_string(&entry).map_err(|e| ReaderError::Cache(e.to_string()))?;
        line.push('\n');
        {
            let mut w = self.writer.lock().unwrap();
            if self.entries.read().unwrap().contains_key(&entry.key) {
                return Ok(());
            }
            w.write_all(line.as_bytes())
                .and_then(|_| w.flush())
                .map_err(|e| ReaderError::Cache(format!("{}: {e}", self.path.display())))?;
            self.entries.write().unwrap().insert(entry.key.clone(), entry);
        }
        Ok(())
    }
}
