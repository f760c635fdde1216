//! Answer scoring and per-condition aggregation.
//!
//! All three string metrics share one normalizer: lowercase, drop ASCII
//! punctuation, blank out the articles `a`/`an`/`the`, split on whitespace.
//! Multi-answer queries take the maximum over gold answers.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::composer::ConditionLabel;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("gold answer list is empty")]
    EmptyGolds,
    #[error("strategies cover different (query, k) cells; missing: {}", format_missing(.0))]
    CoverageGap(Vec<MissingCell>),
    #[error("no records for strategy '{0}'")]
    UnknownStrategy(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MissingCell {
    pub strategy: String,
    pub k: u32,
    pub query_id: String,
}

fn format_missing(cells: &[MissingCell]) -> String {
    let mut parts: Vec<String> = cells
        .iter()
        .take(10)
        .map(|c| format!("{}@k={}/{}", c.strategy, c.k, c.query_id))
        .collect();
    if cells.len() > 10 {
        parts.push(format!("... {} more", cells.len() - 10));
    }
    parts.join(", ")
}

fn articles() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(a|an|the)\b").expect("static regex"))
}

pub fn normalize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let no_articles = articles().replace_all(&no_punct, " ");
    no_articles.split_whitespace().map(str::to_string).collect()
}

fn f1_tokens(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred == gold { 1.0 } else { 0.0 };
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Normalized gold answers. Golds that normalize to nothing are dropped
/// unless every gold does, in which case a single empty answer remains.
fn normalized_golds(golds: &[String]) -> Result<Vec<Vec<String>>, MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::EmptyGolds);
    }
    let mut out: Vec<Vec<String>> = golds.iter().map(|g| normalize(g)).filter(|g| !g.is_empty()).collect();
    if out.is_empty() {
        out.push(Vec::new());
    }
    Ok(out)
}

pub fn token_f1(prediction: &str, gold_answers: &[String]) -> Result<f64, MetricsError> {
    let golds = normalized_golds(gold_answers)?;
    let pred = normalize(prediction);
    Ok(golds.iter().map(|g| f1_tokens(&pred, g)).fold(0.0, f64::max))
}

pub fn exact_match(prediction: &str, gold_answers: &[String]) -> Result<u8, MetricsError> {
    let golds = normalized_golds(gold_answers)?;
    let pred = normalize(prediction);
    Ok(golds.contains(&pred) as u8)
}

/// 1 when some normalized gold token sequence appears contiguously in the
/// normalized prediction. An empty gold only matches an empty prediction.
pub fn substring_accuracy(prediction: &str, gold_answers: &[String]) -> Result<u8, MetricsError> {
    let golds = normalized_golds(gold_answers)?;
    let pred = normalize(prediction);
    Ok(golds.iter().any(|g| {
        if g.is_empty() {
            pred.is_empty()
        } else {
            contains_run(&pred, g)
        }
    }) as u8)
}

pub(crate) fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    needle.is_empty() || haystack.windows(needle.len()).any(|w| w == needle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub query_id: String,
    pub condition_label: String,
    pub f1: f64,
    pub exact_match: u8,
    pub accuracy: u8,
}

pub fn score(
    query_id: &str,
    condition_label: &str,
    prediction: &str,
    gold_answers: &[String],
) -> Result<ScoreRecord, MetricsError> {
    Ok(ScoreRecord {
        query_id: query_id.to_string(),
        condition_label: condition_label.to_string(),
        f1: token_f1(prediction, gold_answers)?,
        exact_match: exact_match(prediction, gold_answers)?,
        accuracy: substring_accuracy(prediction, gold_answers)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition_label: String,
    pub count: usize,
    pub f1: f64,
    pub exact_match: f64,
    pub accuracy: f64,
}

/// Mean of each metric per condition label, sorted by label. Records are
/// summed in query-id order so the result does not depend on input order.
pub fn aggregate(records: &[ScoreRecord]) -> Vec<ConditionSummary> {
    let mut groups: BTreeMap<&str, Vec<&ScoreRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.condition_label).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(label, mut rs)| {
            rs.sort_by(|a, b| a.query_id.cmp(&b.query_id).then(a.f1.total_cmp(&b.f1)));
            let n = rs.len() as f64;
            ConditionSummary {
                condition_label: label.to_string(),
                count: rs.len(),
                f1: rs.iter().map(|r| r.f1).sum::<f64>() / n,
                exact_match: rs.iter().map(|r| r.exact_match as f64).sum::<f64>() / n,
                accuracy: rs.iter().map(|r| r.accuracy as f64).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Per-query F1 indexed by `(strategy, k)`, where the strategy comes from
/// the condition label (e.g. `reverse` for `retrieved:k=25:reverse`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    cells: BTreeMap<(String, u32), BTreeMap<String, f64>>,
}

impl ScoreTable {
    pub fn from_records(records: &[ScoreRecord]) -> Self {
        let mut t = Self::default();
        for r in records {
            if let Ok(label) = ConditionLabel::parse(&r.condition_label) {
                t.insert(&label.strategy(), label.k().unwrap_or(0), &r.query_id, r.f1);
            }
        }
        t
    }

    pub fn insert(&mut self, strategy: &str, k: u32, query_id: &str, f1: f64) {
        self.cells
            .entry((strategy.to_string(), k))
            .or_default()
            .insert(query_id.to_string(), f1);
    }

    pub fn strategies(&self) -> BTreeSet<&str> {
        self.cells.keys().map(|(s, _)| s.as_str()).collect()
    }

    pub fn ks(&self, strategy: &str) -> BTreeSet<u32> {
        self.cells
            .keys()
            .filter(|(s, _)| s == strategy)
            .map(|&(_, k)| k)
            .collect()
    }

    pub fn queries(&self, strategy: &str, k: u32) -> Option<&BTreeMap<String, f64>> {
        self.cells.get(&(strategy.to_string(), k))
    }

    /// Mean F1 over all queries of a cell.
    pub fn mean(&self, strategy: &str, k: u32) -> Option<f64> {
        let q = self.queries(strategy, k)?;
        if q.is_empty() {
            return None;
        }
        Some(q.values().sum::<f64>() / q.len() as f64)
    }

    /// Mean F1 over `subset` (summed in sorted id order); `None` when any
    /// query is missing.
    pub fn subset_mean(&self, strategy: &str, k: u32, subset: &[String]) -> Option<f64> {
        let q = self.queries(strategy, k)?;
        let mut ids: Vec<&String> = subset.iter().collect();
        ids.sort();
        let mut sum = 0.0;
        for id in &ids {
            sum += q.get(id.as_str())?;
        }
        Some(sum / ids.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaPoint {
    pub mean_delta: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub n_subsets: usize,
}

impl DeltaPoint {
    pub fn from_deltas(deltas: &[f64]) -> Self {
        let (mean, std) = mean_and_sample_std(deltas);
        Self {
            mean_delta: mean,
            std,
            min: deltas.iter().copied().fold(f64::INFINITY, f64::min),
            max: deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            n_subsets: deltas.len(),
        }
    }
}

/// Mean and `n − 1` standard deviation; the deviation of a single value is 0.
pub fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// `F1(strategy_a) − F1(strategy_b)` per context size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaCurve {
    pub strategy_a: String,
    pub strategy_b: String,
    pub points: BTreeMap<u32, DeltaPoint>,
}

impl DeltaCurve {
    pub fn pair_label(&self) -> String {
        format!("{}-{}", self.strategy_a, self.strategy_b)
    }
}

fn coverage_gaps(table: &ScoreTable, a: &str, b: &str) -> Vec<MissingCell> {
    let mut missing = Vec::new();
    let ks: BTreeSet<u32> = table.ks(a).union(&table.ks(b)).copied().collect();
    let empty = BTreeMap::new();
    for k in ks {
        let qa = table.queries(a, k).unwrap_or(&empty);
        let qb = table.queries(b, k).unwrap_or(&empty);
        for q in qa.keys().filter(|q| !qb.contains_key(*q)) {
            missing.push(MissingCell {
                strategy: b.into(),
                k,
                query_id: q.clone(),
            });
        }
        for q in qb.keys().filter(|q| !qa.contains_key(*q)) {
            missing.push(MissingCell {
                strategy: a.into(),
                k,
                query_id: q.clone(),
            });
        }
    }
    missing
}

/// Without subsets each k yields one delta over all queries; with subsets
/// the per-subset deltas are summarised by mean, sample std, min and max.
pub fn delta_curve(
    table: &ScoreTable,
    strategy_a: &str,
    strategy_b: &str,
    subsets: Option<&[Vec<String>]>,
) -> Result<DeltaCurve, MetricsError> {
    for s in [strategy_a, strategy_b] {
        if table.ks(s).is_empty() {
            return Err(MetricsError::UnknownStrategy(s.to_string()));
        }
    }
    let gaps = coverage_gaps(table, strategy_a, strategy_b);
    if !gaps.is_empty() {
        return Err(MetricsError::CoverageGap(gaps));
    }
    let mut points = BTreeMap::new();
    for k in table.ks(strategy_a) {
        let deltas: Vec<f64> = match subsets {
            None => vec![table.mean(strategy_a, k).unwrap() - table.mean(strategy_b, k).unwrap()],
            Some(subsets) => {
                let mut out = Vec::with_capacity(subsets.len());
                for subset in subsets {
                    let ma = table.subset_mean(strategy_a, k, subset);
                    let mb = table.subset_mean(strategy_b, k, subset);
                    match (ma, mb) {
                        (Some(ma), Some(mb)) => out.push(ma - mb),
                        _ => {
                            let cover = table.queries(strategy_a, k).unwrap();
                            return Err(MetricsError::CoverageGap(
                                subset
                                    .iter()
                                    .filter(|q| !cover.contains_key(*q))
                                    .map(|q| MissingCell {
                                        strategy: strategy_a.into(),
                                        k,
                                        query_id: q.clone(),
                                    })
                                    .collect(),
                            ));
                        }
                    }
                }
                out
            }
        };
        points.insert(k, DeltaPoint::from_deltas(&deltas));
    }
    Ok(DeltaCurve {
        strategy_a: strategy_a.to_string(),
        strategy_b: strategy_b.to_string(),
        points,
    })
}
