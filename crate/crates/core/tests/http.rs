mod common;

use std::time::Duration;

use common::{chat_reply, dead_url, StubServer};
use ragorder_core::composer::{ContextMode, OrderingKind};
use ragorder_core::corpus::Query;
use ragorder_core::hash::StableHasher;
use ragorder_core::http::{HttpError, JsonClient};
use ragorder_core::reader::{AnswerCache, Backend, ChatClient, GenerationRequest, Generator, Reader, ReaderConfig};
use ragorder_core::runner::{
    configured_embedder, load_records, read_failures, ConditionTemplate, Experiment, ExperimentConfig, RetrieverKind,
};
use ragorder_core::synth::{generate, SynthSpec};
use serde_json::{json, Value};

fn fast(retries: u32) -> JsonClient {
    JsonClient::new(Duration::from_secs(5), retries, None).with_backoff(Duration::from_millis(1))
}

fn http_config(endpoint: &str) -> ReaderConfig {
    ReaderConfig {
        backend: Backend::HttpChat,
        endpoint: Some(endpoint.to_string()),
        model_name: "stub-model".into(),
        ..Default::default()
    }
}

#[test]
fn retries_server_errors_then_succeeds() {
    let server = StubServer::start(|_, _, n| {
        if n < 2 {
            (503, json!({}))
        } else {
            (200, json!({"ok": true}))
        }
    });
    let v = fast(3).post(&server.url("/x"), &json!({})).unwrap();
    assert_eq!(v["ok"], true);
    assert_eq!(server.hits(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = StubServer::start(|_, _, _| (400, json!({"error": "bad"})));
    let err = fast(3).post(&server.url("/x"), &json!({})).unwrap_err();
    assert!(matches!(err, HttpError::Status { status: 400, .. }));
    assert_eq!(server.hits(), 1);
}

#[test]
fn rate_limit_exhausts_retries() {
    let server = StubServer::start(|_, _, _| (429, json!({})));
    let err = fast(2).post(&server.url("/x"), &json!({})).unwrap_err();
    assert!(matches!(err, HttpError::Status { status: 429, .. }));
    assert_eq!(server.hits(), 3);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let err = fast(1).post(&dead_url(), &json!({})).unwrap_err();
    assert_eq!(err.attempts(), Some(2));
}

#[test]
fn chat_answers_are_cached_across_reopen() {
    let server = StubServer::start(|path, body, _| {
        assert_eq!(path, "/v1/chat/completions");
        assert_eq!(body["model"], "stub-model");
        assert_eq!(body["temperature"], 0.0);
        (200, chat_reply("Paris"))
    });
    let endpoint = server.url("/v1/chat/completions");
    let dir = tempfile::tempdir().unwrap();
    let query = Query {
        id: "q1".into(),
        question: "What is the capital of France?".into(),
        gold_answers: vec!["Paris".into()],
        gold_passage_ids: vec![],
        gold_sentence_refs: vec![],
    };
    let corpus = ragorder_core::corpus::Corpus::from_passages("c", vec![]).unwrap();
    let composer = ragorder_core::composer::Composer::new(&corpus, Default::default(), 0, Default::default());
    let context = composer
        .compose(&query, ragorder_core::composer::ContextSpec::ClosedBook, None)
        .unwrap();

    for round in 0..2 {
        let reader = Reader::new(http_config(&endpoint), Some(AnswerCache::open(dir.path()).unwrap()))
            .unwrap()
            .with_chat_client(ChatClient::with_client(&endpoint, fast(0)));
        for _ in 0..3 {
            let a = reader
                .generate(GenerationRequest {
                    query: &query,
                    context: &context,
                })
                .unwrap();
            assert_eq!(a.text, "Paris");
        }
        assert_eq!(server.hits(), 1, "round {round}");
    }
}

/// Deterministic pseudo-embedding: bag of hashed tokens.
fn embed(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; 16];
    for t in text.split_whitespace() {
        let h = StableHasher::new().str(&t.to_lowercase()).finish_u64();
        v[(h % 16) as usize] += 1.0;
    }
    v[0] += 0.5;
    v
}

#[test]
fn rerank_run_uses_embedding_endpoint_and_journal() {
    let server = StubServer::start(|path, body, _| {
        assert_eq!(path, "/v1/embeddings");
        let data: Vec<Value> = body["input"]
            .as_array()
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, t)| json!({"index": i, "embedding": embed(t.as_str().unwrap())}))
            .collect();
        (200, json!({ "data": data }))
    });
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::single_hop("rr", 6, 9);
    let (corpus, dataset) = generate(&spec).write(dir.path(), "rr").unwrap();
    let mut cfg = ExperimentConfig::new(
        corpus,
        dataset,
        vec![ConditionTemplate::Retrieved {
            k_grid: vec![5, 10],
            orderings: vec![OrderingKind::Standard, OrderingKind::Reverse],
        }],
    );
    cfg.retriever.kind = RetrieverKind::Bm25Rerank;
    cfg.retriever.pool = 20;
    cfg.retriever.embed_endpoint = Some(server.url("/v1/embeddings"));
    cfg.retriever.embed_model = Some("stub-embed".into());
    cfg.reader.cache_dir = None;

    let out = dir.path().join("run");
    let cache = dir.path().join("cache");
    let exp = Experiment::load(cfg.clone()).unwrap();
    let embedder = configured_embedder(&cfg, &cache).unwrap().unwrap();
    let reader = Reader::new(cfg.reader.clone(), None).unwrap();
    let summary = exp.run(&out, &reader, Some(embedder.as_ref())).unwrap();
    assert_eq!(summary.failed, 0);
    assert_eq!(summary.completed, 6 * 4);
    let records = load_records(&out).unwrap();
    assert!(records.iter().all(|r| r.provenance.context_source == "rerank"));
    assert!(records.iter().all(|r| r.provenance.retriever == "bm25_rerank"));
    let hits = server.hits();
    assert!(hits > 0);

    // a second experiment over the same texts is served from the journal
    let again = configured_embedder(&cfg, &cache).unwrap().unwrap();
    let out2 = dir.path().join("run2");
    exp.run(&out2, &reader, Some(again.as_ref())).unwrap();
    assert_eq!(server.hits(), hits);
    let a: Vec<_> = records.iter().map(|r| r.payload()).collect();
    let b: Vec<_> = load_records(&out2).unwrap().iter().map(|r| r.payload()).collect();
    assert_eq!(a, b);
}

#[test]
fn unreachable_reader_records_transport_failures() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::single_hop("tf", 4, 1);
    let (corpus, dataset) = generate(&spec).write(dir.path(), "tf").unwrap();
    let mut cfg = ExperimentConfig::new(
        corpus,
        dataset,
        vec![ConditionTemplate::Oracle {
            modes: vec![ContextMode::ClosedBook, ContextMode::OraclePassages],
            k_grid: vec![],
        }],
    );
    cfg.reader = http_config(&dead_url());
    cfg.reader.cache_dir = None;
    let endpoint = cfg.reader.endpoint.clone().unwrap();
    let reader = Reader::new(cfg.reader.clone(), None)
        .unwrap()
        .with_chat_client(ChatClient::with_client(&endpoint, fast(0)));
    let out = dir.path().join("run");
    let summary = Experiment::load(cfg).unwrap().run(&out, &reader, None).unwrap();
    assert!(summary.transport_failures >= 1);
    assert_eq!(summary.completed, 0);
    assert_eq!(summary.failed, summary.cells);
    assert_eq!(read_failures(&out).unwrap().len(), summary.cells);
}
