//! Topic-budget calibration.
//!
//! For every budget `n`, `S` random topic subsets are drawn and the F1
//! difference between two strategies is measured on each subset, at every
//! context size `k`. A cell *crosses zero* when its per-subset deltas take
//! both signs (`min < 0 < max`): the apparent winner depends on which topics
//! were sampled. A cell is *noticeable* when the full-set delta (or, without
//! one, the subset mean) is at least `epsilon` in magnitude. The recommended
//! budget is the smallest `n` with no noticeable crossing cell.
//!
//! Subsets are stored as sorted topic indices and every mean is summed in
//! index order, so a subset equal to the full population reproduces the
//! full-set delta bit for bit.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::composer::ContextSpec;
use crate::hash::StableHasher;
use crate::metrics::{mean_and_sample_std, MissingCell, ScoreRecord};

pub const DEFAULT_BUDGETS: [usize; 6] = [500, 1000, 2000, 3000, 4000, 5000];
pub const DEFAULT_SUBSETS: usize = 10;
pub const DEFAULT_K_GRID: [u32; 6] = [5, 10, 25, 50, 75, 100];
pub const DEFAULT_EPSILON: f64 = 0.005;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CalibrationError {
    #[error("budget {n} exceeds the topic population of {population}")]
    BudgetTooLarge { n: usize, population: usize },
    #[error("invalid calibration config: {0}")]
    Config(String),
    #[error("score records leave {} (strategy, k, topic) cell(s) uncovered, e.g. {}", .0.len(), .0.first().map(|c| format!("{}@k={}/{}", c.strategy, c.k, c.query_id)).unwrap_or_default())]
    CoverageGap(Vec<MissingCell>),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StrategyPair {
    pub a: String,
    pub b: String,
}

impl StrategyPair {
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Self {
        Self {
            a: a.into(),
            b: b.into(),
        }
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.a, self.b)
    }
}

impl std::str::FromStr for StrategyPair {
    type Err = CalibrationError;

    /// `reverse:standard` or `reverse-standard`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once(':')
            .or_else(|| s.split_once('-'))
            .ok_or_else(|| CalibrationError::Config(format!("bad strategy pair '{s}'")))?;
        if a.is_empty() || b.is_empty() {
            return Err(CalibrationError::Config(format!("bad strategy pair '{s}'")));
        }
        Ok(Self::new(a, b))
    }
}

pub fn default_pairs() -> Vec<StrategyPair> {
    vec![
        StrategyPair::new("reverse", "standard"),
        StrategyPair::new("reverse", "random"),
        StrategyPair::new("standard", "random"),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub budgets: Vec<usize>,
    pub subsets_per_budget: usize,
    pub seed: u64,
    pub strategy_pairs: Vec<StrategyPair>,
    pub k_grid: Vec<u32>,
    pub epsilon: f64,
    /// Draw smaller budgets as prefixes of the larger ones instead of
    /// independently.
    pub nested: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            budgets: DEFAULT_BUDGETS.to_vec(),
            subsets_per_budget: DEFAULT_SUBSETS,
            seed: 0,
            strategy_pairs: default_pairs(),
            k_grid: DEFAULT_K_GRID.to_vec(),
            epsilon: DEFAULT_EPSILON,
            nested: false,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.budgets.is_empty() || self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CalibrationError::Config(
                "budgets must be non-empty and strictly ascending".into(),
            ));
        }
        if self.budgets[0] == 0 {
            return Err(CalibrationError::Config("budgets must be positive".into()));
        }
        if self.subsets_per_budget < 2 {
            return Err(CalibrationError::Config(
                "at least 2 subsets per budget are required".into(),
            ));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(CalibrationError::Config("epsilon must be >= 0".into()));
        }
        if self.strategy_pairs.is_empty() || self.k_grid.is_empty() {
            return Err(CalibrationError::Config(
                "strategy pairs and k grid must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Dense per-topic F1 table: sorted topic ids × `(strategy, k)` columns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreMatrix {
    topics: Vec<String>,
    columns: BTreeMap<(String, u32), Vec<Option<f64>>>,
}

impl ScoreMatrix {
    pub fn new(mut topics: Vec<String>) -> Self {
        topics.sort();
        topics.dedup();
        Self {
            topics,
            columns: BTreeMap::new(),
        }
    }

    /// Builds the matrix from run records, keying columns by the condition
    /// label's strategy and k. Records with unparseable labels are ignored.
    pub fn from_records(records: &[ScoreRecord]) -> Self {
        let parsed: Vec<(&ScoreRecord, ContextSpec)> = records
            .iter()
            .filter_map(|r| ContextSpec::parse(&r.condition_label).ok().map(|s| (r, s)))
            .collect();
        let mut m = Self::new(parsed.iter().map(|(r, _)| r.query_id.clone()).collect());
        for (r, spec) in parsed {
            m.set(&spec.strategy(), spec.k().unwrap_or(0), &r.query_id, r.f1);
        }
        m
    }

    pub fn topics(&self) -> &[String] {
        &self.topics
    }

    pub fn population(&self) -> usize {
        self.topics.len()
    }

    pub fn set(&mut self, strategy: &str, k: u32, topic: &str, f1: f64) {
        let Ok(i) = self.topics.binary_search_by(|t| t.as_str().cmp(topic)) else {
            panic!("topic '{topic}' is not part of this matrix");
        };
        let n = self.topics.len();
        self.columns
            .entry((strategy.to_string(), k))
            .or_insert_with(|| vec![None; n])[i] = Some(f1);
    }

    pub fn column(&self, strategy: &str, k: u32) -> Option<&[Option<f64>]> {
        self.columns.get(&(strategy.to_string(), k)).map(Vec::as_slice)
    }

    fn require(&self, strategy: &str, k: u32) -> Result<Vec<f64>, Vec<MissingCell>> {
        let missing = |topic: &String| MissingCell {
            strategy: strategy.to_string(),
            k,
            query_id: topic.clone(),
        };
        match self.column(strategy, k) {
            None => Err(self.topics.iter().map(missing).collect()),
            Some(col) => {
                let gaps: Vec<MissingCell> = col
                    .iter()
                    .zip(&self.topics)
                    .filter(|(v, _)| v.is_none())
                    .map(|(_, t)| missing(t))
                    .collect();
                if gaps.is_empty() {
                    Ok(col.iter().map(|v| v.unwrap()).collect())
                } else {
                    Err(gaps)
                }
            }
        }
    }

    /// Dense columns for every `(pair, k)`; any gap is an error listing all
    /// missing cells.
    fn dense(&self, pairs: &[StrategyPair], k_grid: &[u32]) -> Result<DenseColumns, CalibrationError> {
        let mut out = BTreeMap::new();
        let mut gaps = BTreeSet::new();
        for p in pairs {
            for &k in k_grid {
                for s in [&p.a, &p.b] {
                    if out.contains_key(&(s.clone(), k)) {
                        continue;
                    }
                    match self.require(s, k) {
                        Ok(v) => {
                            out.insert((s.clone(), k), v);
                        }
                        Err(m) => gaps.extend(m),
                    }
                }
            }
        }
        if gaps.is_empty() {
            Ok(out)
        } else {
            Err(CalibrationError::CoverageGap(gaps.into_iter().collect()))
        }
    }
}

type DenseColumns = BTreeMap<(String, u32), Vec<f64>>;

fn subset_seed(seed: u64, n: Option<usize>, index: usize) -> u64 {
    let h = StableHasher::new().str("subset").u64(seed);
    let h = match n {
        Some(n) => h.u64(n as u64),
        None => h.str("nested"),
    };
    h.u64(index as u64).finish_u64()
}

/// First `n` positions of a Fisher–Yates shuffle of `0..population`, sorted.
fn partial_shuffle(population: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..population).collect();
    for i in 0..n {
        let j = rng.random_range(i..population);
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx.sort_unstable();
    idx
}

/// `S` subsets of `n` distinct indices into a population, each drawn
/// uniformly without replacement from sub-seed `H(seed, n, s)`. Nested mode
/// drops `n` from the sub-seed, so smaller budgets are prefixes of larger ones.
pub fn sample_subset_indices(
    population: usize,
    n: usize,
    count: usize,
    seed: u64,
    nested: bool,
) -> Result<Vec<Vec<usize>>, CalibrationError> {
    if n > population {
        return Err(CalibrationError::BudgetTooLarge { n, population });
    }
    Ok((0..count)
        .map(|s| partial_shuffle(population, n, subset_seed(seed, (!nested).then_some(n), s)))
        .collect())
}

pub fn sample_subsets(
    topic_ids: &[String],
    n: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<String>>, CalibrationError> {
    Ok(sample_subset_indices(topic_ids.len(), n, count, seed, false)?
        .into_iter()
        .map(|s| s.into_iter().map(|i| topic_ids[i].clone()).collect())
        .collect())
}

fn subset_mean(column: &[f64], subset: &[usize]) -> f64 {
    let mut sum = 0.0;
    for &i in subset {
        sum += column[i];
    }
    sum / subset.len() as f64
}

fn full_mean(column: &[f64]) -> f64 {
    column.iter().sum::<f64>() / column.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDelta {
    pub pair: StrategyPair,
    pub k: u32,
    pub delta: f64,
}

/// One full-population delta per `(pair, k)`.
pub fn reference_deltas(
    matrix: &ScoreMatrix,
    pairs: &[StrategyPair],
    k_grid: &[u32],
) -> Result<Vec<ReferenceDelta>, CalibrationError> {
    let cols = matrix.dense(pairs, k_grid)?;
    Ok(reference_from(&cols, pairs, k_grid))
}

fn reference_from(cols: &DenseColumns, pairs: &[StrategyPair], k_grid: &[u32]) -> Vec<ReferenceDelta> {
    let mut out = Vec::new();
    for p in pairs {
        for &k in k_grid {
            let a = &cols[&(p.a.clone(), k)];
            let b = &cols[&(p.b.clone(), k)];
            out.push(ReferenceDelta {
                pair: p.clone(),
                k,
                delta: full_mean(a) - full_mean(b),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCell {
    pub pair: StrategyPair,
    pub k: u32,
    pub n: usize,
    pub per_subset_deltas: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
    pub crossing: bool,
    pub noticeable: bool,
}

impl StabilityCell {
    pub fn new(pair: StrategyPair, k: u32, n: usize, deltas: Vec<f64>, reference: Option<f64>, epsilon: f64) -> Self {
        let (mean, std) = mean_and_sample_std(&deltas);
        let min = deltas.iter().copied().fold(f64::INFINITY, f64::min);
        let max = deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let crossing = min < 0.0 && max > 0.0;
        let noticeable = reference.unwrap_or(mean).abs() >= epsilon;
        Self {
            pair,
            k,
            n,
            per_subset_deltas: deltas,
            mean,
            std,
            min,
            max,
            reference,
            crossing,
            noticeable,
        }
    }

    /// A noticeable difference whose sign flips across subsets.
    pub fn vetoes(&self) -> bool {
        self.noticeable && self.crossing
    }
}

/// Stability cells for one budget: per-subset delta is the subset-mean F1
/// of strategy `a` minus that of strategy `b`, per `k`.
pub fn evaluate_budget(
    matrix: &ScoreMatrix,
    subsets: &[Vec<usize>],
    pairs: &[StrategyPair],
    k_grid: &[u32],
    reference: Option<&[ReferenceDelta]>,
    epsilon: f64,
) -> Result<Vec<StabilityCell>, CalibrationError> {
    let cols = matrix.dense(pairs, k_grid)?;
    for s in subsets {
        if let Some(&bad) = s.iter().find(|&&i| i >= matrix.population()) {
            return Err(CalibrationError::Config(format!(
                "subset index {bad} outside the population"
            )));
        }
    }
    Ok(evaluate_dense(&cols, subsets, pairs, k_grid, reference, epsilon))
}

fn evaluate_dense(
    cols: &DenseColumns,
    subsets: &[Vec<usize>],
    pairs: &[StrategyPair],
    k_grid: &[u32],
    reference: Option<&[ReferenceDelta]>,
    epsilon: f64,
) -> Vec<StabilityCell> {
    let n = subsets.first().map_or(0, Vec::len);
    let mut cells = Vec::with_capacity(pairs.len() * k_grid.len());
    for p in pairs {
        for &k in k_grid {
            let a = &cols[&(p.a.clone(), k)];
            let b = &cols[&(p.b.clone(), k)];
            let deltas: Vec<f64> = subsets.iter().map(|s| subset_mean(a, s) - subset_mean(b, s)).collect();
            let r = reference.and_then(|rs| rs.iter().find(|r| r.pair == *p && r.k == k).map(|r| r.delta));
            cells.push(StabilityCell::new(p.clone(), k, n, deltas, r, epsilon));
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetTrace {
    pub n: usize,
    pub cells: usize,
    pub noticeable: usize,
    pub crossings: usize,
    /// Cells that are both noticeable and crossing.
    pub vetoing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    /// `None` means no budget in the grid is stable.
    pub budget: Option<usize>,
    pub trace: Vec<BudgetTrace>,
}

impl Recommendation {
    pub fn describe(&self) -> String {
        match self.budget {
            Some(n) => n.to_string(),
            None => "none within grid".to_string(),
        }
    }
}

/// Smallest budget whose cells contain no noticeable zero-crossing.
pub fn recommend_budget(cells: &[StabilityCell]) -> Recommendation {
    let mut by_budget: BTreeMap<usize, Vec<&StabilityCell>> = BTreeMap::new();
    for c in cells {
        by_budget.entry(c.n).or_default().push(c);
    }
    let trace: Vec<BudgetTrace> = by_budget
        .into_iter()
        .map(|(n, cs)| BudgetTrace {
            n,
            cells: cs.len(),
            noticeable: cs.iter().filter(|c| c.noticeable).count(),
            crossings: cs.iter().filter(|c| c.crossing).count(),
            vetoing: cs.iter().filter(|c| c.vetoes()).count(),
        })
        .collect();
    Recommendation {
        budget: trace.iter().find(|t| t.vetoing == 0).map(|t| t.n),
        trace,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub config: CalibrationConfig,
    pub population: usize,
    pub reference_deltas: Vec<ReferenceDelta>,
    pub cells: Vec<StabilityCell>,
    pub recommended_budget: Option<usize>,
    pub recommendation: String,
    pub criterion_trace: Vec<BudgetTrace>,
}

#[derive(Serialize)]
struct CellRow<'a> {
    pair: String,
    k: u32,
    n: usize,
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
    reference: Option<f64>,
    crossing: bool,
    noticeable: bool,
    deltas: &'a str,
}

impl CalibrationReport {
    /// One row per (pair, k, n) cell; per-subset deltas are `;`-separated.
    pub fn cells_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.cells {
            let deltas: Vec<String> = c.per_subset_deltas.iter().map(|d| d.to_string()).collect();
            w.serialize(CellRow {
                pair: c.pair.label(),
                k: c.k,
                n: c.n,
                mean: c.mean,
                std: c.std,
                min: c.min,
                max: c.max,
                reference: c.reference,
                crossing: c.crossing,
                noticeable: c.noticeable,
                deltas: &deltas.join(";"),
            })
            .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }
}

/// Runs every budget of `config` over `matrix` and recommends a budget.
pub fn calibrate(matrix: &ScoreMatrix, config: &CalibrationConfig) -> Result<CalibrationReport, CalibrationError> {
    config.validate()?;
    let population = matrix.population();
    if let Some(&n) = config.budgets.iter().find(|&&n| n > population) {
        return Err(CalibrationError::BudgetTooLarge { n, population });
    }
    let cols = matrix.dense(&config.strategy_pairs, &config.k_grid)?;
    let reference = reference_from(&cols, &config.strategy_pairs, &config.k_grid);
    let mut cells = Vec::new();
    for &n in &config.budgets {
        let subsets = sample_subset_indices(population, n, config.subsets_per_budget, config.seed, config.nested)?;
        cells.extend(evaluate_dense(
            &cols,
            &subsets,
            &config.strategy_pairs,
            &config.k_grid,
            Some(&reference),
            config.epsilon,
        ));
    }
    let rec = recommend_budget(&cells);
    Ok(CalibrationReport {
        config: config.clone(),
        population,
        reference_deltas: reference,
        cells,
        recommended_budget: rec.budget,
        recommendation: rec.describe(),
        criterion_trace: rec.trace,
    })
}

/// Per-topic paired scores with a planted mean difference.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScores {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Topic ids used by synthetic data; zero-padded so sorting preserves order.
pub fn synthetic_topic_id(i: usize) -> String {
    format!("t{i:07}")
}

/// Draws, per topic, a centre `c ~ U(0.3, 0.7)` and a difference
/// `d = mu + e` with `e ~ N(0, sigma)`, then sets `a = c + d/2`,
/// `b = c − d/2`, each clamped to [0, 1].
pub fn synth_effect_generator(mu: f64, sigma: f64, topics: usize, seed: u64) -> SyntheticScores {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(StableHasher::new().str("synth").u64(seed).finish_u64());
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let mut a = Vec::with_capacity(topics);
    let mut b = Vec::with_capacity(topics);
    for _ in 0..topics {
        let c: f64 = rng.random_range(0.3..0.7);
        let e = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        let d = mu + e;
        a.push((c + d / 2.0).clamp(0.0, 1.0));
        b.push((c - d / 2.0).clamp(0.0, 1.0));
    }
    SyntheticScores { a, b }
}

impl SyntheticScores {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Loads the scores into `matrix` as `(pair.a, k)` and `(pair.b, k)`.
    /// The matrix topics must be `synthetic_topic_id(0..len)`.
    pub fn fill(&self, matrix: &mut ScoreMatrix, pair: &StrategyPair, k: u32) {
        for i in 0..self.len() {
            let t = synthetic_topic_id(i);
            matrix.set(&pair.a, k, &t, self.a[i]);
            matrix.set(&pair.b, k, &t, self.b[i]);
        }
    }
}

/// Matrix with one independent synthetic effect per `k`.
pub fn synthetic_matrix(
    mu: f64,
    sigma: f64,
    topics: usize,
    seed: u64,
    pair: &StrategyPair,
    k_grid: &[u32],
) -> ScoreMatrix {
    let mut m = ScoreMatrix::new((0..topics).map(synthetic_topic_id).collect());
    for &k in k_grid {
        let s = StableHasher::new().u64(seed).u64(k as u64).finish_u64();
        synth_effect_generator(mu, sigma, topics, s).fill(&mut m, pair, k);
    }
    m
}
