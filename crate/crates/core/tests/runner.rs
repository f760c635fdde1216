use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use ragorder_core::composer::OrderingKind;
use ragorder_core::reader::{Answer, GenerationRequest, Generator, Reader, ReaderConfig, ReaderError};
use ragorder_core::runner::{
    build_report, load_records, load_run, read_failures, read_skips, write_report, ConditionTemplate, Experiment,
    ExperimentConfig, ReportMode, RunError, RunRecord, RECORDS_DIR,
};
use ragorder_core::synth::{generate, SynthSpec};

struct Counting<G> {
    inner: G,
    calls: AtomicUsize,
}

impl<G: Generator> Counting<G> {
    fn new(inner: G) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<G: Generator> Generator for Counting<G> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn generate(&self, request: GenerationRequest<'_>) -> Result<Answer, ReaderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.generate(request)
    }
}

/// Fails with a transport error after `ok` successful calls.
struct Flaky {
    inner: Reader,
    ok: usize,
    calls: AtomicUsize,
}

impl Generator for Flaky {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn generate(&self, request: GenerationRequest<'_>) -> Result<Answer, ReaderError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.ok {
            return Err(ReaderError::Transport {
                attempts: 3,
                message: "connection refused".into(),
            });
        }
        self.inner.generate(request)
    }
}

fn mock_reader() -> Reader {
    Reader::new(
        ReaderConfig {
            cache_dir: None,
            ..Default::default()
        },
        None,
    )
    .unwrap()
}

fn config(dir: &Path, spec: SynthSpec, conditions: Vec<ConditionTemplate>) -> ExperimentConfig {
    let (corpus, dataset) = generate(&spec).write(dir, &spec.name).unwrap();
    let mut c = ExperimentConfig::new(corpus, dataset, conditions);
    c.seed = 7;
    c
}

fn grid() -> Vec<ConditionTemplate> {
    vec![
        ConditionTemplate::Retrieved {
            k_grid: vec![5, 10],
            orderings: OrderingKind::ALL.to_vec(),
        },
        ConditionTemplate::Sweep { k: 3, positions: None },
        ConditionTemplate::Oracle {
            modes: vec![
                ragorder_core::composer::ContextMode::ClosedBook,
                ragorder_core::composer::ContextMode::OracleSents,
                ragorder_core::composer::ContextMode::OracleBm25Reverse,
            ],
            k_grid: vec![5],
        },
    ]
}

#[test]
fn grid_is_tiled_by_records_skips_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SynthSpec::multi_hop("mh", 12, 1), grid());
    let exp = Experiment::load(cfg).unwrap();
    let out = dir.path().join("run");
    let summary = exp.run(&out, &mock_reader(), None).unwrap();

    let labels = exp.specs().len();
    assert_eq!(summary.cells, 12 * labels);
    assert_eq!(summary.completed + summary.skipped + summary.failed, summary.cells);
    assert_eq!(summary.failed, 0);

    let mut cells = HashSet::new();
    for r in load_records(&out).unwrap() {
        assert!(cells.insert((r.query_id, r.condition_label)));
    }
    for s in read_skips(&out).unwrap() {
        assert!(cells.insert((s.query_id, s.condition_label)), "skip overlaps a record");
    }
    assert_eq!(cells.len(), summary.cells);

    // two golds cannot start at the last of three positions
    let skips = read_skips(&out).unwrap();
    assert_eq!(skips.len(), 12);
    assert!(skips.iter().all(|s| s.condition_label == "sweep:k=3:i=3"));
    assert!(read_failures(&out).unwrap().is_empty());
}

#[test]
fn resume_does_not_recompute_and_repairs_torn_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SynthSpec::single_hop("sh", 10, 2), grid());
    let exp = Experiment::load(cfg).unwrap();
    let out = dir.path().join("run");

    // interrupted: the reader dies after 25 answers
    let flaky = Flaky {
        inner: mock_reader(),
        ok: 25,
        calls: AtomicUsize::new(0),
    };
    let first = exp.run(&out, &flaky, None).unwrap();
    assert_eq!(first.completed, 25);
    assert!(first.transport_failures >= 1);
    assert_eq!(first.completed + first.skipped + first.failed, first.cells);

    // simulate a crash mid-write
    let rec = out.join(RECORDS_DIR).join("retrieved_k5_standard.jsonl");
    let mut text = fs::read_to_string(&rec).unwrap();
    text.push_str("{\"query_id\":\"sh-q9");
    fs::write(&rec, text).unwrap();

    let counting = Counting::new(mock_reader());
    let second = exp.run(&out, &counting, None).unwrap();
    assert_eq!(second.resumed, 25);
    assert_eq!(counting.calls(), second.cells - 25 - second.skipped);
    assert_eq!(second.failed, 0);
    assert!(read_failures(&out).unwrap().is_empty());

    let again = Counting::new(mock_reader());
    let third = exp.run(&out, &again, None).unwrap();
    assert_eq!(again.calls(), 0);
    assert_eq!(third.resumed, third.cells - third.skipped);
    assert_eq!(load_records(&out).unwrap().len(), third.resumed);
}

#[test]
fn changed_config_is_refused_in_existing_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SynthSpec::single_hop("sh", 3, 2), grid());
    let out = dir.path().join("run");
    Experiment::load(cfg.clone())
        .unwrap()
        .run(&out, &mock_reader(), None)
        .unwrap();
    let mut changed = cfg;
    changed.seed += 1;
    let err = Experiment::load(changed)
        .unwrap()
        .run(&out, &mock_reader(), None)
        .unwrap_err();
    assert!(matches!(err, RunError::ConfigMismatch { .. }));
}

#[test]
fn fresh_runs_are_reproducible_regardless_of_concurrency() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), SynthSpec::single_hop("sh", 15, 3), grid());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    cfg.reader.concurrency = 1;
    Experiment::load(cfg.clone())
        .unwrap()
        .run(&a, &mock_reader(), None)
        .unwrap();
    cfg.reader.concurrency = 8;
    Experiment::load(cfg).unwrap().run(&b, &mock_reader(), None).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.join(RECORDS_DIR))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        assert_eq!(payload_lines(&a, &name), payload_lines(&b, &name), "{name:?}");
    }
}

/// File lines with wall-clock fields zeroed.
fn payload_lines(run: &Path, name: &std::ffi::OsStr) -> Vec<String> {
    fs::read_to_string(run.join(RECORDS_DIR).join(name))
        .unwrap()
        .lines()
        .map(|l| {
            let r: RunRecord = serde_json::from_str(l).unwrap();
            serde_json::to_string(&r.payload()).unwrap()
        })
        .collect()
}

#[test]
fn reports_are_written_and_reject_mixed_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SynthSpec::single_hop("sh", 10, 4), grid());
    let out = dir.path().join("run");
    Experiment::load(cfg).unwrap().run(&out, &mock_reader(), None).unwrap();
    let run = load_run(&out).unwrap();

    for mode in [
        ReportMode::Curves,
        ReportMode::Delta,
        ReportMode::Sweep,
        ReportMode::ModelCompare,
    ] {
        let r = build_report(std::slice::from_ref(&run), mode, &[]).unwrap();
        assert!(r.csv.lines().count() > 1, "{mode} is empty");
        let (csv, json) = write_report(&r, &dir.path().join("reports")).unwrap();
        assert!(csv.exists() && json.exists());
    }
    let delta = build_report(std::slice::from_ref(&run), ReportMode::Delta, &[]).unwrap();
    assert_eq!(
        delta.csv.lines().next().unwrap(),
        "pair,k,mean_delta,std,min,max,n_subsets"
    );
    // containment reads every passage, so order cannot matter
    for row in delta.json["rows"].as_array().unwrap() {
        assert_eq!(row["mean_delta"].as_f64().unwrap(), 0.0);
    }

    let other = config(dir.path(), SynthSpec::single_hop("other", 10, 4), grid());
    let out2 = dir.path().join("run2");
    Experiment::load(other)
        .unwrap()
        .run(&out2, &mock_reader(), None)
        .unwrap();
    let err = build_report(&[run, load_run(&out2).unwrap()], ReportMode::Curves, &[]).unwrap_err();
    assert!(matches!(err, RunError::MixedDatasets(..)));
}
