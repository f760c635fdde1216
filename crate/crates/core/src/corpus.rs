//! Passage corpora and QA datasets read from line-delimited JSON files.
//!
//! Corpus lines look like `{"id", "text", "title"?, "sentences"?}` and dataset
//! lines like `{"id", "question", "gold_answers", "gold_passage_ids"?,
//! "gold_sentence_refs"?}`. Sentence references are `[passage_id, index]`
//! pairs with a zero-based sentence index.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::retrieval::tokenize;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: malformed record: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("duplicate id '{id}' at {path}:{line}")]
    DuplicateId { path: String, line: usize, id: String },
    #[error("{path}:{line}: passage '{id}' has empty text")]
    EmptyText { path: String, line: usize, id: String },
    #[error("dataset failed validation with {} violation(s); first: {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Validation(Vec<Violation>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentences: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SentenceRef(pub String, pub usize);

impl SentenceRef {
    pub fn passage_id(&self) -> &str {
        &self.0
    }

    pub fn index(&self) -> usize {
        self.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub gold_passage_ids: Vec<String>,
    #[serde(default)]
    pub gold_sentence_refs: Vec<SentenceRef>,
}

impl Query {
    pub fn has_gold_passages(&self) -> bool {
        !self.gold_passage_ids.is_empty()
    }

    pub fn has_gold_sentences(&self) -> bool {
        !self.gold_sentence_refs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopType {
    SingleHop,
    MultiHop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub queries: Vec<Query>,
    pub corpus_ref: String,
    pub hop_type: HopType,
}

impl Dataset {
    /// Builds a dataset, inferring `hop_type` from the gold annotations:
    /// any query with two or more gold passages marks it multi-hop.
    pub fn new(name: impl Into<String>, corpus_ref: impl Into<String>, queries: Vec<Query>) -> Self {
        let hop_type = if queries.iter().any(|q| q.gold_passage_ids.len() > 1) {
            HopType::MultiHop
        } else {
            HopType::SingleHop
        };
        Self {
            name: name.into(),
            queries,
            corpus_ref: corpus_ref.into(),
            hop_type,
        }
    }

    pub fn query(&self, id: &str) -> Option<&Query> {
        self.queries.iter().find(|q| q.id == id)
    }
}

/// An immutable passage collection with id lookup.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    name: String,
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_passages(name: impl Into<String>, passages: Vec<Passage>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if p.text.trim().is_empty() {
                return Err(CorpusError::EmptyText {
                    path: "<memory>".into(),
                    line: i + 1,
                    id: p.id.clone(),
                });
            }
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId {
                    path: "<memory>".into(),
                    line: i + 1,
                    id: p.id.clone(),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            passages,
            by_id,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    /// Set equality, ignoring the order passages were loaded in.
    pub fn same_passages(&self, other: &Corpus) -> bool {
        self.len() == other.len() && self.passages.iter().all(|p| other.get(&p.id).is_some_and(|q| q == p))
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(BufReader::new(file).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads a corpus file; rejects malformed lines, empty texts and duplicate ids.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let display = path.display().to_string();
    let mut passages = Vec::new();
    let mut seen = HashSet::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let passage: Passage = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: display.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        if passage.text.trim().is_empty() {
            return Err(CorpusError::EmptyText {
                path: display,
                line: line_no,
                id: passage.id,
            });
        }
        if !seen.insert(passage.id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: display,
                line: line_no,
                id: passage.id,
            });
        }
        passages.push(passage);
    }
    if passages.is_empty() {
        log::warn!("corpus {display} contains no passages");
    }
    Corpus::from_passages(stem(path), passages)
}

/// Parses a dataset file without resolving gold references.
pub fn read_dataset(path: &Path, corpus_ref: &str) -> Result<Dataset, CorpusError> {
    let display = path.display().to_string();
    let mut queries = Vec::new();
    let mut seen = HashSet::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let query: Query = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: display.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(query.id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: display,
                line: line_no,
                id: query.id,
            });
        }
        queries.push(query);
    }
    Ok(Dataset::new(stem(path), corpus_ref, queries))
}

/// Reads a dataset and resolves every gold reference against `corpus`.
pub fn load_dataset(path: &Path, corpus: &Corpus) -> Result<Dataset, CorpusError> {
    let dataset = read_dataset(path, corpus.name())?;
    let report = validate(&dataset, corpus);
    if report.violations.is_empty() {
        Ok(dataset)
    } else {
        Err(CorpusError::Validation(report.violations))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    EmptyGoldAnswers,
    UnresolvedGoldPassage,
    UnresolvedSentencePassage,
    MissingSentences,
    SentenceIndexOutOfRange,
    SentencesDoNotCoverText,
    CorpusMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub passage_id: Option<String>,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (&self.query_id, &self.passage_id) {
            (Some(q), Some(p)) => write!(f, "{:?} [{q}/{p}]: {}", self.kind, self.detail),
            (Some(q), None) => write!(f, "{:?} [{q}]: {}", self.kind, self.detail),
            (None, Some(p)) => write!(f, "{:?} [{p}]: {}", self.kind, self.detail),
            (None, None) => write!(f, "{:?}: {}", self.kind, self.detail),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub dataset: String,
    pub corpus: String,
    pub queries: usize,
    pub with_gold_passages: usize,
    pub with_gold_sentences: usize,
    pub passages: usize,
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every dataset invariant against `corpus`. Never fails; all
/// problems are collected in the report.
pub fn validate(dataset: &Dataset, corpus: &Corpus) -> ValidationReport {
    let mut violations = Vec::new();
    let mut warnings = Vec::new();

    if dataset.queries.is_empty() {
        warnings.push(format!("dataset '{}' contains no queries", dataset.name));
    }
    if dataset.corpus_ref != corpus.name() {
        violations.push(Violation {
            kind: ViolationKind::CorpusMismatch,
            query_id: None,
            passage_id: None,
            detail: format!(
                "dataset references corpus '{}' but '{}' was supplied",
                dataset.corpus_ref,
                corpus.name()
            ),
        });
    }

    // Passages referenced by sentence refs are checked for coverage once.
    let mut sentence_passages = BTreeSet::new();

    for q in &dataset.queries {
        if !q.gold_answers.iter().any(|a| !a.trim().is_empty()) {
            violations.push(Violation {
                kind: ViolationKind::EmptyGoldAnswers,
                query_id: Some(q.id.clone()),
                passage_id: None,
                detail: "gold_answers must contain at least one non-empty string".into(),
            });
        }
        for pid in &q.gold_passage_ids {
            if !corpus.contains(pid) {
                violations.push(Violation {
                    kind: ViolationKind::UnresolvedGoldPassage,
                    query_id: Some(q.id.clone()),
                    passage_id: Some(pid.clone()),
                    detail: format!("gold passage '{pid}' not found in corpus"),
                });
            }
        }
        for r in &q.gold_sentence_refs {
            let pid = r.passage_id();
            let Some(p) = corpus.get(pid) else {
                violations.push(Violation {
                    kind: ViolationKind::UnresolvedSentencePassage,
                    query_id: Some(q.id.clone()),
                    passage_id: Some(pid.to_string()),
                    detail: format!("sentence ref ({pid}, {}) names a missing passage", r.index()),
                });
                continue;
            };
            match &p.sentences {
                None => violations.push(Violation {
                    kind: ViolationKind::MissingSentences,
                    query_id: Some(q.id.clone()),
                    passage_id: Some(pid.to_string()),
                    detail: format!("passage '{pid}' has no sentence segmentation"),
                }),
                Some(s) if r.index() >= s.len() => violations.push(Violation {
                    kind: ViolationKind::SentenceIndexOutOfRange,
                    query_id: Some(q.id.clone()),
                    passage_id: Some(pid.to_string()),
                    detail: format!(
                        "sentence index {} out of range for passage with {} sentence(s)",
                        r.index(),
                        s.len()
                    ),
                }),
                Some(_) => {
                    sentence_passages.insert(pid.to_string());
                }
            }
        }
    }

    for pid in sentence_passages {
        let p = corpus.get(&pid).expect("checked above");
        let sentences = p.sentences.as_ref().expect("checked above");
        let covered = tokenize(&sentences.join(" ")).len();
        let needed = tokenize(&p.text).len();
        if covered < needed {
            violations.push(Violation {
                kind: ViolationKind::SentencesDoNotCoverText,
                query_id: None,
                passage_id: Some(pid.clone()),
                detail: format!("sentences hold {covered} token(s), text holds {needed}"),
            });
        }
    }

    ValidationReport {
        dataset: dataset.name.clone(),
        corpus: corpus.name().to_string(),
        queries: dataset.queries.len(),
        with_gold_passages: dataset.queries.iter().filter(|q| q.has_gold_passages()).count(),
        with_gold_sentences: dataset.queries.iter().filter(|q| q.has_gold_sentences()).count(),
        passages: corpus.len(),
        violations,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".jsonl").tempfile().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn fixture_corpus() -> Corpus {
        Corpus::from_passages(
            "c",
            vec![
                Passage {
                    id: "p1".into(),
                    text: "Paris is the capital. It is in France. It has a tower.".into(),
                    title: Some("Paris".into()),
                    sentences: Some(vec![
                        "Paris is the capital.".into(),
                        "It is in France.".into(),
                        "It has a tower.".into(),
                    ]),
                },
                Passage {
                    id: "p2".into(),
                    text: "Berlin is in Germany.".into(),
                    title: None,
                    sentences: None,
                },
            ],
        )
        .unwrap()
    }

    fn query(id: &str, golds: &[&str], refs: &[(&str, usize)]) -> Query {
        Query {
            id: id.into(),
            question: "q?".into(),
            gold_answers: vec!["Paris".into()],
            gold_passage_ids: golds.iter().map(|s| s.to_string()).collect(),
            gold_sentence_refs: refs.iter().map(|(p, i)| SentenceRef(p.to_string(), *i)).collect(),
        }
    }

    #[test]
    fn loads_two_records() {
        let f = write_lines(&[
            r#"{"id":"p1","text":"cat sat"}"#,
            r#"{"id":"p2","text":"dog ran","title":"Dogs"}"#,
        ]);
        let c = load_corpus(f.path()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get("p2").unwrap().title.as_deref(), Some("Dogs"));
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let f = write_lines(&[r#"{"id":"p1","text":"cat sat"}"#, r#"{"id":"p1","text":"dog ran"}"#]);
        match load_corpus(f.path()) {
            Err(CorpusError::DuplicateId { id, line, .. }) => {
                assert_eq!(id, "p1");
                assert_eq!(line, 2);
            }
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_line_number() {
        let f = write_lines(&[r#"{"id":"p1","text":"cat"}"#, r#"{"id": "p2""#]);
        match load_corpus(f.path()) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        let f = write_lines(&[]);
        assert!(load_corpus(f.path()).unwrap().is_empty());
    }

    #[test]
    fn blank_text_is_rejected() {
        let f = write_lines(&[r#"{"id":"p1","text":"   "}"#]);
        assert!(matches!(load_corpus(f.path()), Err(CorpusError::EmptyText { .. })));
    }

    #[test]
    fn dataset_resolving_existing_passage_is_accepted() {
        let corpus = fixture_corpus();
        let f = write_lines(&[
            r#"{"id":"q1","question":"capital?","gold_answers":["Paris"],"gold_passage_ids":["p1"],"gold_sentence_refs":[["p1",0]]}"#,
        ]);
        let ds = read_dataset(f.path(), corpus.name()).unwrap();
        assert!(validate(&ds, &corpus).is_valid());
    }

    #[test]
    fn dataset_with_missing_passage_is_rejected() {
        let corpus = fixture_corpus();
        let f = write_lines(&[r#"{"id":"q7","question":"?","gold_answers":["x"],"gold_passage_ids":["p9"]}"#]);
        match load_dataset(f.path(), &corpus) {
            Err(CorpusError::Validation(v)) => {
                assert_eq!(v.len(), 1);
                assert_eq!(v[0].query_id.as_deref(), Some("q7"));
                assert_eq!(v[0].passage_id.as_deref(), Some("p9"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn empty_gold_answers_is_a_violation() {
        let corpus = fixture_corpus();
        let mut q = query("q1", &[], &[]);
        q.gold_answers = vec!["  ".into()];
        let ds = Dataset::new("d", "c", vec![q]);
        let r = validate(&ds, &corpus);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].kind, ViolationKind::EmptyGoldAnswers);
    }

    #[test]
    fn consistent_dataset_has_no_violations() {
        let ds = Dataset::new(
            "d",
            "c",
            vec![query("q1", &["p1"], &[("p1", 0), ("p1", 2)]), query("q2", &["p2"], &[])],
        );
        let r = validate(&ds, &fixture_corpus());
        assert!(r.violations.is_empty(), "{:?}", r.violations);
        assert_eq!(r.queries, 2);
        assert_eq!(r.with_gold_passages, 2);
        assert_eq!(r.with_gold_sentences, 1);
    }

    #[test]
    fn sentence_index_out_of_range_is_one_violation() {
        let ds = Dataset::new("d", "c", vec![query("q1", &["p1"], &[("p1", 3)])]);
        let r = validate(&ds, &fixture_corpus());
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].kind, ViolationKind::SentenceIndexOutOfRange);
    }

    #[test]
    fn empty_dataset_warns() {
        let ds = Dataset::new("d", "c", vec![]);
        let r = validate(&ds, &fixture_corpus());
        assert_eq!(r.queries, 0);
        assert!(r.violations.is_empty());
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn sentences_must_cover_text() {
        let corpus = Corpus::from_passages(
            "c",
            vec![Passage {
                id: "p1".into(),
                text: "one two three four".into(),
                title: None,
                sentences: Some(vec!["one two".into()]),
            }],
        )
        .unwrap();
        let ds = Dataset::new("d", "c", vec![query("q1", &["p1"], &[("p1", 0)])]);
        let r = validate(&ds, &corpus);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].kind, ViolationKind::SentencesDoNotCoverText);
    }

    #[test]
    fn hop_type_is_inferred() {
        let single = Dataset::new("d", "c", vec![query("q1", &["p1"], &[])]);
        let multi = Dataset::new("d", "c", vec![query("q1", &["p1", "p2"], &[])]);
        assert_eq!(single.hop_type, HopType::SingleHop);
        assert_eq!(multi.hop_type, HopType::MultiHop);
    }
}
