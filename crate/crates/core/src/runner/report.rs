//! Tables and figures data from one or more completed runs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::state::{io_err, write_atomic, RunManifest, RunRecord};
use super::RunError;
use crate::calibration::StrategyPair;
use crate::composer::{ContextSpec, OrderingKind};
use crate::metrics::{aggregate, delta_curve, ScoreRecord, ScoreTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportMode {
    /// Mean metrics per condition.
    Curves,
    /// `F1(a) − F1(b)` per context size for each strategy pair.
    Delta,
    /// Accuracy by gold position.
    Sweep,
    /// Per-model ordering delta and best F1 per context size.
    ModelCompare,
}

impl ReportMode {
    pub fn name(self) -> &'static str {
        match self {
            ReportMode::Curves => "curves",
            ReportMode::Delta => "delta",
            ReportMode::Sweep => "sweep",
            ReportMode::ModelCompare => "model_compare",
        }
    }
}

impl fmt::Display for ReportMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReportMode {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "curves" => Ok(ReportMode::Curves),
            "delta" => Ok(ReportMode::Delta),
            "sweep" => Ok(ReportMode::Sweep),
            "model_compare" => Ok(ReportMode::ModelCompare),
            _ => Err(RunError::Report(format!("unknown report mode '{s}'"))),
        }
    }
}

/// A run directory's manifest and records.
#[derive(Debug, Clone)]
pub struct RunData {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub records: Vec<RunRecord>,
}

impl RunData {
    pub fn scores(&self) -> Vec<ScoreRecord> {
        self.records.iter().map(RunRecord::score).collect()
    }

    fn model(&self) -> &str {
        &self.manifest.model_name
    }
}

pub fn load_run(dir: &Path) -> Result<RunData, RunError> {
    Ok(RunData {
        dir: dir.to_path_buf(),
        manifest: RunManifest::load(dir)?,
        records: super::load_records(dir)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub model: String,
    pub condition_label: String,
    pub mode: String,
    pub strategy: String,
    pub k: u32,
    pub count: usize,
    pub f1: f64,
    pub exact_match: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub pair: String,
    pub k: u32,
    pub mean_delta: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub n_subsets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub k: u32,
    pub position: usize,
    pub count: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub exact_match: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCompareRow {
    pub model: String,
    pub pair: String,
    pub k: u32,
    pub delta_f1: f64,
    pub best_f1: f64,
    pub best_strategy: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub mode: ReportMode,
    pub csv: String,
    pub json: serde_json::Value,
}

fn render<T: Serialize>(mode: ReportMode, rows: &[T]) -> Result<Report, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| RunError::Report(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| RunError::Report(e.to_string()))?;
    Ok(Report {
        mode,
        csv: String::from_utf8(bytes).expect("csv is utf-8"),
        json: serde_json::json!({ "mode": mode.name(), "rows": rows }),
    })
}

fn check_same_dataset(runs: &[RunData]) -> Result<(), RunError> {
    if let Some(first) = runs.first() {
        for r in &runs[1..] {
            if r.manifest.dataset_hash != first.manifest.dataset_hash {
                return Err(RunError::MixedDatasets(
                    first.manifest.dataset.clone(),
                    r.manifest.dataset.clone(),
                ));
            }
        }
    }
    Ok(())
}

/// Builds the report for `mode`. Runs must share a dataset; their order
/// does not affect the output.
pub fn build_report(runs: &[RunData], mode: ReportMode, pairs: &[StrategyPair]) -> Result<Report, RunError> {
    if runs.is_empty() {
        return Err(RunError::Report("no runs given".into()));
    }
    check_same_dataset(runs)?;
    let mut runs: Vec<&RunData> = runs.iter().collect();
    runs.sort_by(|a, b| a.model().cmp(b.model()).then(a.dir.cmp(&b.dir)));
    let multi = runs.len() > 1;
    match mode {
        ReportMode::Curves => {
            let mut rows = Vec::new();
            for run in &runs {
                for s in aggregate(&run.scores()) {
                    let Ok(spec) = ContextSpec::parse(&s.condition_label) else {
                        continue;
                    };
                    rows.push(CurveRow {
                        model: run.model().to_string(),
                        mode: spec.mode().name().to_string(),
                        strategy: spec.strategy(),
                        k: spec.k().unwrap_or(0),
                        condition_label: s.condition_label,
                        count: s.count,
                        f1: s.f1,
                        exact_match: s.exact_match,
                        accuracy: s.accuracy,
                    });
                }
            }
            rows.sort_by(|a, b| (&a.model, &a.mode, &a.strategy, a.k).cmp(&(&b.model, &b.mode, &b.strategy, b.k)));
            render(mode, &rows)
        }
        ReportMode::Delta => {
            let mut rows = Vec::new();
            for run in &runs {
                let table = ScoreTable::from_records(&run.scores());
                for pair in present_pairs(&table, pairs) {
                    let curve = delta_curve(&table, &pair.a, &pair.b, None)?;
                    let label = if multi {
                        format!("{}/{}", run.model(), curve.pair_label())
                    } else {
                        curve.pair_label()
                    };
                    for (k, p) in &curve.points {
                        rows.push(DeltaRow {
                            pair: label.clone(),
                            k: *k,
                            mean_delta: p.mean_delta,
                            std: p.std,
                            min: p.min,
                            max: p.max,
                            n_subsets: p.n_subsets,
                        });
                    }
                }
            }
            render(mode, &rows)
        }
        ReportMode::Sweep => {
            let mut rows = Vec::new();
            for run in &runs {
                let mut cells: BTreeMap<(u32, usize), Vec<&RunRecord>> = BTreeMap::new();
                for r in &run.records {
                    if let Ok(ContextSpec::PositionalSweep { k, position }) = ContextSpec::parse(&r.condition_label) {
                        cells.entry((k as u32, position)).or_default().push(r);
                    }
                }
                for ((k, position), mut rs) in cells {
                    rs.sort_by(|a, b| a.query_id.cmp(&b.query_id));
                    let n = rs.len() as f64;
                    rows.push(SweepRow {
                        model: run.model().to_string(),
                        k,
                        position,
                        count: rs.len(),
                        accuracy: rs.iter().map(|r| r.accuracy as f64).sum::<f64>() / n,
                        f1: rs.iter().map(|r| r.f1).sum::<f64>() / n,
                        exact_match: rs.iter().map(|r| r.exact_match as f64).sum::<f64>() / n,
                    });
                }
            }
            render(mode, &rows)
        }
        ReportMode::ModelCompare => {
            let pair = pairs
                .first()
                .cloned()
                .unwrap_or_else(|| StrategyPair::new(OrderingKind::Reverse.name(), OrderingKind::Standard.name()));
            let orderings: Vec<&str> = OrderingKind::ALL.iter().map(|o| o.name()).collect();
            let mut rows = Vec::new();
            for run in &runs {
                let table = ScoreTable::from_records(&run.scores());
                if present_pairs(&table, std::slice::from_ref(&pair)).is_empty() {
                    continue;
                }
                let curve = delta_curve(&table, &pair.a, &pair.b, None)?;
                for (k, p) in &curve.points {
                    let mut best: Option<(f64, &str)> = None;
                    for s in &orderings {
                        if let Some(m) = table.mean(s, *k) {
                            if best.is_none_or(|(b, _)| m > b) {
                                best = Some((m, s));
                            }
                        }
                    }
                    let (best_f1, best_strategy) = best.expect("pair strategies are present");
                    rows.push(ModelCompareRow {
                        model: run.model().to_string(),
                        pair: curve.pair_label(),
                        k: *k,
                        delta_f1: p.mean_delta,
                        best_f1,
                        best_strategy: best_strategy.to_string(),
                    });
                }
            }
            render(mode, &rows)
        }
    }
}

fn present_pairs(table: &ScoreTable, pairs: &[StrategyPair]) -> Vec<StrategyPair> {
    let have = table.strategies();
    let wanted = if pairs.is_empty() {
        crate::calibration::default_pairs()
    } else {
        pairs.to_vec()
    };
    wanted
        .into_iter()
        .filter(|p| have.contains(p.a.as_str()) && have.contains(p.b.as_str()))
        .collect()
}

/// Writes `<mode>.csv` and `<mode>.json` into `dir`.
pub fn write_report(report: &Report, dir: &Path) -> Result<(PathBuf, PathBuf), RunError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let csv_path = dir.join(format!("{}.csv", report.mode));
    let json_path = dir.join(format!("{}.json", report.mode));
    write_atomic(&csv_path, report.csv.as_bytes())?;
    let json = serde_json::to_string_pretty(&report.json).expect("report serializes");
    write_atomic(&json_path, json.as_bytes())?;
    Ok((csv_path, json_path))
}
