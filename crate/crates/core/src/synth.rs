//! Synthetic QA corpora for exercising the pipeline without real data.
//!
//! Every query asks for an attribute of a made-up entity; the answer is a
//! made-up two-word name that appears in exactly one passage. Background
//! passages share the question's function words, so BM25 returns long
//! lists for every query.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Passage, Query, SentenceRef};
use crate::hash::StableHasher;

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "ru", "ta", "vi", "zo", "pe", "su", "dra", "gen", "hol", "bri", "fen", "tor",
];

const RELATIONS: [&str; 8] = [
    "founder",
    "capital",
    "river",
    "author",
    "summit",
    "language",
    "festival",
    "instrument",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub name: String,
    pub queries: usize,
    /// Two gold passages per query (bridge entity, then answer).
    pub multi_hop: bool,
    /// Passages unrelated to any query.
    pub background: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn single_hop(name: &str, queries: usize, seed: u64) -> Self {
        Self {
            name: name.into(),
            queries,
            multi_hop: false,
            background: 150,
            seed,
        }
    }

    pub fn multi_hop(name: &str, queries: usize, seed: u64) -> Self {
        Self {
            multi_hop: true,
            ..Self::single_hop(name, queries, seed)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthFixture {
    pub passages: Vec<Passage>,
    pub queries: Vec<Query>,
}

/// A pseudo-word, unique per `n`.
fn word(n: usize) -> String {
    let mut n = n;
    let mut w = String::new();
    for _ in 0..4 {
        w.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
    }
    w
}

fn capitalized(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn passage(id: String, title: &str, sentences: Vec<String>) -> Passage {
    Passage {
        id,
        text: sentences.join(" "),
        title: Some(title.to_string()),
        sentences: Some(sentences),
    }
}

pub fn generate(spec: &SynthSpec) -> SynthFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(StableHasher::new().str("synth-qa").u64(spec.seed).finish_u64());
    // disjoint word ranges keep entities, bridges and answers distinct
    let entity = |i: usize| capitalized(&word(i));
    let bridge = |i: usize| capitalized(&word(20_000 + i));
    let answer = |i: usize| format!("{} {}", capitalized(&word(40_000 + i)), capitalized(&word(50_000 + i)));

    let mut passages = Vec::new();
    let mut queries = Vec::new();
    for i in 0..spec.queries {
        let rel = *RELATIONS.choose(&mut rng).unwrap();
        let e = entity(i);
        let ans = answer(i);
        let filler = word(60_000 + rng.random_range(0..5_000));
        let qid = format!("{}-q{:05}", spec.name, i);
        if spec.multi_hop {
            let b = bridge(i);
            let pa = format!("{}-g{:05}a", spec.name, i);
            let pb = format!("{}-g{:05}b", spec.name, i);
            passages.push(passage(
                pa.clone(),
                &e,
                vec![
                    format!("{e} is a settlement known for its {filler} market."),
                    format!("The founder of {e} is {b}."),
                ],
            ));
            passages.push(passage(
                pb.clone(),
                &b,
                vec![
                    format!("{b} travelled widely as a young trader."),
                    format!("The {rel} of {b} is {ans}."),
                ],
            ));
            queries.push(Query {
                id: qid,
                question: format!("What is the {rel} of the founder of {e}?"),
                gold_answers: vec![ans],
                gold_passage_ids: vec![pa.clone(), pb.clone()],
                gold_sentence_refs: vec![SentenceRef(pa, 1), SentenceRef(pb, 1)],
            });
        } else {
            let pg = format!("{}-g{:05}", spec.name, i);
            passages.push(passage(
                pg.clone(),
                &e,
                vec![
                    format!("{e} is a settlement known for its {filler} market."),
                    format!("The {rel} of {e} is {ans}."),
                    format!("Visitors to {e} often stay for the {filler} season."),
                ],
            ));
            queries.push(Query {
                id: qid,
                question: format!("What is the {rel} of {e}?"),
                gold_answers: vec![ans],
                gold_passage_ids: vec![pg.clone()],
                gold_sentence_refs: vec![SentenceRef(pg, 1)],
            });
        }
    }
    for j in 0..spec.background {
        let rel = *RELATIONS.choose(&mut rng).unwrap();
        let topic = capitalized(&word(70_000 + j));
        let other = capitalized(&word(80_000 + rng.random_range(0..5_000)));
        passages.push(passage(
            format!("{}-b{:05}", spec.name, j),
            &topic,
            vec![
                format!("What is the {rel} of {topic} is a question the archive cannot settle."),
                format!("Some say it is {other}, of the old records."),
            ],
        ));
    }
    SynthFixture { passages, queries }
}

impl SynthFixture {
    /// Writes `<name>.corpus.jsonl` and `<name>.jsonl` into `dir`.
    pub fn write(&self, dir: &Path, name: &str) -> std::io::Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let corpus = dir.join(format!("{name}.corpus.jsonl"));
        let dataset = dir.join(format!("{name}.jsonl"));
        let lines = |items: Vec<String>| items.join("\n") + "\n";
        fs::write(
            &corpus,
            lines(
                self.passages
                    .iter()
                    .map(|p| serde_json::to_string(p).unwrap())
                    .collect(),
            ),
        )?;
        fs::write(
            &dataset,
            lines(self.queries.iter().map(|q| serde_json::to_string(q).unwrap()).collect()),
        )?;
        Ok((corpus, dataset))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_corpus, load_dataset, HopType};
    use crate::retrieval::{Bm25Params, Index};

    #[test]
    fn words_are_unique() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..65_536 {
            assert!(seen.insert(word(i)));
        }
    }

    #[test]
    fn fixtures_load_validate_and_retrieve_deep() {
        let dir = tempfile::tempdir().unwrap();
        for spec in [SynthSpec::single_hop("s", 20, 1), SynthSpec::multi_hop("m", 20, 1)] {
            let fx = generate(&spec);
            let (c, d) = fx.write(dir.path(), &spec.name).unwrap();
            let corpus = load_corpus(&c).unwrap();
            let ds = load_dataset(&d, &corpus).unwrap();
            assert_eq!(ds.queries.len(), 20);
            assert_eq!(ds.hop_type == HopType::MultiHop, spec.multi_hop);
            let index = Index::build(&corpus, Bm25Params::default()).unwrap();
            for q in &ds.queries {
                let list = index.search(&q.id, &q.question, 100).unwrap();
                assert_eq!(list.len(), 100);
                assert!(list.ids().any(|id| id == q.gold_passage_ids[0]));
            }
        }
    }

    #[test]
    fn same_seed_same_fixture() {
        let a = generate(&SynthSpec::single_hop("s", 10, 5));
        let b = generate(&SynthSpec::single_hop("s", 10, 5));
        assert_eq!(a.passages, b.passages);
        assert_eq!(a.queries, b.queries);
    }
}
