//! Builds the exact passage sequence and prompt shown to the reader for
//! every experimental condition.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Query};
use crate::hash::{derive_seed, StableHasher};
use crate::retrieval::{Producer, RankedEntry, RankedList};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ComposeError {
    #[error("{mode} requires gold annotations, query '{query_id}' has none")]
    NoGolds { query_id: String, mode: String },
    #[error("gold block of {golds} starting at position {position} does not fit in k={k}")]
    Placement { position: usize, golds: usize, k: usize },
    #[error("position must be in 1..=k (got {position}, k={k})")]
    InvalidPosition { position: usize, k: usize },
    #[error("distractor pool short by {shortfall}: need {needed}, have {available}")]
    InsufficientDistractors {
        needed: usize,
        available: usize,
        shortfall: usize,
    },
    #[error("{0} requires a retrieval list")]
    MissingFiller(String),
    #[error("passage '{0}' is not in the corpus")]
    UnknownPassage(String),
    #[error("passage '{0}' has no sentence segmentation")]
    MissingSentences(String),
    #[error("malformed condition label '{0}'")]
    BadLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingKind {
    Standard,
    Reverse,
    Random,
}

impl OrderingKind {
    pub const ALL: [OrderingKind; 3] = [OrderingKind::Standard, OrderingKind::Reverse, OrderingKind::Random];

    pub fn name(self) -> &'static str {
        match self {
            OrderingKind::Standard => "standard",
            OrderingKind::Reverse => "reverse",
            OrderingKind::Random => "random",
        }
    }
}

impl FromStr for OrderingKind {
    type Err = ComposeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Self::Standard),
            "reverse" => Ok(Self::Reverse),
            "random" => Ok(Self::Random),
            _ => Err(ComposeError::BadLabel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrderingScheme {
    Standard,
    Reverse,
    Random { seed: u64 },
}

impl OrderingScheme {
    pub fn kind(self) -> OrderingKind {
        match self {
            OrderingScheme::Standard => OrderingKind::Standard,
            OrderingScheme::Reverse => OrderingKind::Reverse,
            OrderingScheme::Random { .. } => OrderingKind::Random,
        }
    }
}

/// Arranges a ranked prefix. Standard keeps retrieval order, reverse is its
/// exact reversal, random is a seeded uniform permutation.
pub fn order(entries: &[RankedEntry], scheme: OrderingScheme) -> Vec<String> {
    let mut ids: Vec<String> = entries.iter().map(|e| e.passage_id.clone()).collect();
    match scheme {
        OrderingScheme::Standard => {}
        OrderingScheme::Reverse => ids.reverse(),
        OrderingScheme::Random { seed } => ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    ids
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    Retrieved,
    PositionalSweep,
    ClosedBook,
    OraclePassages,
    OracleSents,
    OracleBm25Standard,
    OracleBm25Reverse,
}

impl ContextMode {
    pub fn name(self) -> &'static str {
        match self {
            ContextMode::Retrieved => "retrieved",
            ContextMode::PositionalSweep => "sweep",
            ContextMode::ClosedBook => "closed_book",
            ContextMode::OraclePassages => "oracle_passages",
            ContextMode::OracleSents => "oracle_sents",
            ContextMode::OracleBm25Standard => "oracle_bm25_standard",
            ContextMode::OracleBm25Reverse => "oracle_bm25_reverse",
        }
    }

    pub fn needs_golds(self) -> bool {
        !matches!(self, ContextMode::Retrieved | ContextMode::ClosedBook)
    }
}

/// One experimental condition. Its `Display` form is the stable condition
/// label, e.g. `retrieved:k=25:reverse`, `sweep:k=10:i=4`,
/// `oracle_bm25_reverse:k=50`, `closed_book`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ContextSpec {
    Retrieved { k: usize, ordering: OrderingKind },
    PositionalSweep { k: usize, position: usize },
    ClosedBook,
    OraclePassages,
    OracleSents,
    OracleBm25Standard { k: usize },
    OracleBm25Reverse { k: usize },
}

pub type ConditionLabel = ContextSpec;

impl ContextSpec {
    pub fn mode(&self) -> ContextMode {
        match self {
            ContextSpec::Retrieved { .. } => ContextMode::Retrieved,
            ContextSpec::PositionalSweep { .. } => ContextMode::PositionalSweep,
            ContextSpec::ClosedBook => ContextMode::ClosedBook,
            ContextSpec::OraclePassages => ContextMode::OraclePassages,
            ContextSpec::OracleSents => ContextMode::OracleSents,
            ContextSpec::OracleBm25Standard { .. } => ContextMode::OracleBm25Standard,
            ContextSpec::OracleBm25Reverse { .. } => ContextMode::OracleBm25Reverse,
        }
    }

    pub fn k(&self) -> Option<u32> {
        match *self {
            ContextSpec::Retrieved { k, .. }
            | ContextSpec::PositionalSweep { k, .. }
            | ContextSpec::OracleBm25Standard { k }
            | ContextSpec::OracleBm25Reverse { k } => Some(k as u32),
            _ => None,
        }
    }

    pub fn position(&self) -> Option<usize> {
        match *self {
            ContextSpec::PositionalSweep { position, .. } => Some(position),
            _ => None,
        }
    }

    /// Grouping key for score tables: the ordering name for retrieved
    /// conditions, `sweep:i=N` for sweeps, the mode name otherwise.
    pub fn strategy(&self) -> String {
        match self {
            ContextSpec::Retrieved { ordering, .. } => ordering.name().to_string(),
            ContextSpec::PositionalSweep { position, .. } => format!("sweep:i={position}"),
            other => other.mode().name().to_string(),
        }
    }

    pub fn parse(label: &str) -> Result<Self, ComposeError> {
        label.parse()
    }

    /// Label shared by every position of one sweep, used to seed its distractors.
    fn pool_label(&self) -> String {
        match self {
            ContextSpec::PositionalSweep { k, .. } => format!("sweep:k={k}"),
            other => other.to_string(),
        }
    }
}

impl fmt::Display for ContextSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContextSpec::Retrieved { k, ordering } => write!(f, "retrieved:k={k}:{}", ordering.name()),
            ContextSpec::PositionalSweep { k, position } => write!(f, "sweep:k={k}:i={position}"),
            ContextSpec::OracleBm25Standard { k } | ContextSpec::OracleBm25Reverse { k } => {
                write!(f, "{}:k={k}", self.mode().name())
            }
            other => f.write_str(other.mode().name()),
        }
    }
}

impl FromStr for ContextSpec {
    type Err = ComposeError;

    fn from_str(label: &str) -> Result<Self, Self::Err> {
        let bad = || ComposeError::BadLabel(label.to_string());
        let parts: Vec<&str> = label.split(':').collect();
        let field = |part: &str, key: &str| -> Result<usize, ComposeError> {
            part.strip_prefix(key)
                .and_then(|v| v.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .filter(|&v: &usize| v >= 1)
                .ok_or_else(bad)
        };
        match parts.as_slice() {
            ["closed_book"] => Ok(ContextSpec::ClosedBook),
            ["oracle_passages"] => Ok(ContextSpec::OraclePassages),
            ["oracle_sents"] => Ok(ContextSpec::OracleSents),
            ["retrieved", k, o] => Ok(ContextSpec::Retrieved {
                k: field(k, "k")?,
                ordering: o.parse().map_err(|_| bad())?,
            }),
            ["sweep", k, i] => {
                let (k, position) = (field(k, "k")?, field(i, "i")?);
                if position > k {
                    return Err(bad());
                }
                Ok(ContextSpec::PositionalSweep { k, position })
            }
            ["oracle_bm25_standard", k] => Ok(ContextSpec::OracleBm25Standard { k: field(k, "k")? }),
            ["oracle_bm25_reverse", k] => Ok(ContextSpec::OracleBm25Reverse { k: field(k, "k")? }),
            _ => Err(bad()),
        }
    }
}

/// Places the gold block at 1-indexed position `i` in a context of exactly
/// `k` passages; distractors fill the other slots in their given order.
pub fn positional_sweep_context(
    golds: &[String],
    distractors: &[String],
    i: usize,
    k: usize,
) -> Result<Vec<String>, ComposeError> {
    if i < 1 || i > k {
        return Err(ComposeError::InvalidPosition { position: i, k });
    }
    if golds.is_empty() {
        return Err(ComposeError::NoGolds {
            query_id: String::new(),
            mode: ContextMode::PositionalSweep.name().into(),
        });
    }
    if i + golds.len() - 1 > k {
        return Err(ComposeError::Placement {
            position: i,
            golds: golds.len(),
            k,
        });
    }
    let needed = k - golds.len();
    if distractors.len() < needed {
        return Err(ComposeError::InsufficientDistractors {
            needed,
            available: distractors.len(),
            shortfall: needed - distractors.len(),
        });
    }
    let mut out = Vec::with_capacity(k);
    out.extend(distractors[..i - 1].iter().cloned());
    out.extend(golds.iter().cloned());
    out.extend(distractors[i - 1..needed].iter().cloned());
    Ok(out)
}

/// One slot of an oracle context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleItem {
    Passage(String),
    /// A pseudo-passage holding only the listed sentences of a gold passage.
    Sentences {
        passage_id: String,
        indices: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleLayout {
    pub items: Vec<OracleItem>,
    /// The filler ran out before the context reached `k`.
    pub short: bool,
}

fn gold_ids(query: &Query) -> Vec<String> {
    let mut seen = HashSet::new();
    query
        .gold_passage_ids
        .iter()
        .filter(|p| seen.insert(p.as_str()))
        .cloned()
        .collect()
}

/// Top non-gold filler entries, in descending score order.
fn non_gold_filler<'a>(filler: &'a RankedList, golds: &HashSet<&str>, count: usize) -> Vec<&'a RankedEntry> {
    filler
        .entries
        .iter()
        .filter(|e| !golds.contains(e.passage_id.as_str()))
        .take(count)
        .collect()
}

pub fn oracle_context(
    query: &Query,
    mode: ContextMode,
    filler: Option<&RankedList>,
    k: usize,
) -> Result<OracleLayout, ComposeError> {
    let no_golds = || ComposeError::NoGolds {
        query_id: query.id.clone(),
        mode: mode.name().into(),
    };
    let golds = gold_ids(query);
    match mode {
        ContextMode::ClosedBook => Ok(OracleLayout {
            items: vec![],
            short: false,
        }),
        ContextMode::OraclePassages => {
            if golds.is_empty() {
                return Err(no_golds());
            }
            Ok(OracleLayout {
                items: golds.into_iter().map(OracleItem::Passage).collect(),
                short: false,
            })
        }
        ContextMode::OracleSents => {
            if query.gold_sentence_refs.is_empty() {
                return Err(no_golds());
            }
            let mut items: Vec<OracleItem> = Vec::new();
            for r in &query.gold_sentence_refs {
                match items
                    .iter_mut()
                    .find(|it| matches!(it, OracleItem::Sentences { passage_id, .. } if passage_id == r.passage_id()))
                {
                    Some(OracleItem::Sentences { indices, .. }) => {
                        if !indices.contains(&r.index()) {
                            indices.push(r.index());
                        }
                    }
                    _ => items.push(OracleItem::Sentences {
                        passage_id: r.passage_id().to_string(),
                        indices: vec![r.index()],
                    }),
                }
            }
            Ok(OracleLayout { items, short: false })
        }
        ContextMode::OracleBm25Standard | ContextMode::OracleBm25Reverse => {
            if golds.is_empty() {
                return Err(no_golds());
            }
            let filler = filler.ok_or_else(|| ComposeError::MissingFiller(mode.name().into()))?;
            let gold_set: HashSet<&str> = golds.iter().map(String::as_str).collect();
            let want = k.saturating_sub(golds.len());
            let mut fill: Vec<String> = non_gold_filler(filler, &gold_set, want)
                .into_iter()
                .map(|e| e.passage_id.clone())
                .collect();
            let short = fill.len() < want;
            let gold_items = golds.into_iter().map(OracleItem::Passage);
            let items = if mode == ContextMode::OracleBm25Standard {
                gold_items.chain(fill.into_iter().map(OracleItem::Passage)).collect()
            } else {
                fill.reverse();
                fill.into_iter().map(OracleItem::Passage).chain(gold_items).collect()
            };
            Ok(OracleLayout { items, short })
        }
        ContextMode::Retrieved | ContextMode::PositionalSweep => Err(ComposeError::BadLabel(mode.name().into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistractorPolicy {
    /// Uniform draw without replacement from the whole corpus.
    #[default]
    Random,
    /// Top non-gold retrieval results.
    Retrieved,
}

pub enum DistractorSource<'a> {
    Corpus(&'a [String]),
    Retrieved(&'a RankedList),
}

/// Ordered non-gold distractors for `query`, deterministic in
/// `(query.id, seed)`. Corpus ids must be supplied sorted.
pub fn distractor_pool(
    query: &Query,
    source: DistractorSource<'_>,
    count: usize,
    seed: u64,
) -> Result<Vec<String>, ComposeError> {
    let golds: HashSet<&str> = query.gold_passage_ids.iter().map(String::as_str).collect();
    let pool: Vec<String> = match source {
        DistractorSource::Retrieved(list) => list
            .ids()
            .filter(|id| !golds.contains(id))
            .take(count)
            .map(str::to_string)
            .collect(),
        DistractorSource::Corpus(sorted_ids) => {
            let gold_in_corpus = sorted_ids.iter().filter(|id| golds.contains(id.as_str())).count();
            let available = sorted_ids.len() - gold_in_corpus;
            let draw = (count + gold_in_corpus).min(sorted_ids.len());
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &query.id, "distractors"));
            index::sample(&mut rng, sorted_ids.len(), draw)
                .into_iter()
                .map(|i| &sorted_ids[i])
                .filter(|id| !golds.contains(id.as_str()))
                .take(count.min(available))
                .cloned()
                .collect()
        }
    };
    if pool.len() < count {
        return Err(ComposeError::InsufficientDistractors {
            needed: count,
            available: pool.len(),
            shortfall: count - pool.len(),
        });
    }
    Ok(pool)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub instruction: String,
    pub closed_book_instruction: String,
    /// `{n}`, `{title}` and `{text}` are substituted.
    pub document: String,
    /// Used instead of `document` when a passage has no title.
    pub document_untitled: String,
    pub question: String,
    pub answer_cue: String,
    /// Whitespace-token budget for the whole prompt.
    pub max_prompt_tokens: Option<usize>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            instruction: "Answer the question using the provided documents; answer concisely.".into(),
            closed_book_instruction: "Answer the question; answer concisely.".into(),
            document: "Document [{n}] ({title}): {text}".into(),
            document_untitled: "Document [{n}]: {text}".into(),
            question: "Question: {question}".into(),
            answer_cue: "Answer:".into(),
            max_prompt_tokens: None,
        }
    }
}

impl PromptTemplate {
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("template serializes");
        StableHasher::new().str(&json).finish_hex()[..16].to_string()
    }

    fn render_unbounded(&self, question: &str, passages: &[ContextPassage], closed_book: bool) -> String {
        let mut out = String::new();
        if closed_book {
            out.push_str(&self.closed_book_instruction);
        } else {
            out.push_str(&self.instruction);
            out.push_str("\n\n");
            for (n, p) in passages.iter().enumerate() {
                let doc = match &p.title {
                    Some(t) => self.document.replace("{title}", t),
                    None => self.document_untitled.clone(),
                };
                // text last so literal braces inside passages survive
                out.push_str(&doc.replace("{n}", &(n + 1).to_string()).replace("{text}", &p.text));
                out.push('\n');
            }
        }
        out.push_str("\n\n");
        out.push_str(&self.question.replace("{question}", question));
        out.push('\n');
        out.push_str(&self.answer_cue);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    /// Passages dropped from the end to satisfy the token budget.
    pub dropped: usize,
}

pub fn count_prompt_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Renders the prompt; closed-book (no passages requested) omits the
/// document block. Over-budget prompts lose whole passages from the last
/// position inward.
pub fn render_prompt(question: &str, passages: &[ContextPassage], template: &PromptTemplate) -> RenderedPrompt {
    let closed_book = passages.is_empty();
    let mut keep = passages.len();
    loop {
        let text = template.render_unbounded(question, &passages[..keep], closed_book);
        let fits = template
            .max_prompt_tokens
            .is_none_or(|budget| count_prompt_tokens(&text) <= budget);
        if fits || keep == 0 {
            return RenderedPrompt {
                text,
                dropped: passages.len() - keep,
            };
        }
        keep -= 1;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextPassage {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextProvenance {
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub template: String,
    pub dropped_for_budget: usize,
    /// Fewer passages than requested were available.
    pub short: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedContext {
    pub query_id: String,
    pub condition_label: String,
    pub spec: ContextSpec,
    pub passage_ids: Vec<String>,
    #[serde(skip)]
    pub passages: Vec<ContextPassage>,
    pub prompt: String,
    pub provenance: ContextProvenance,
}

/// Turns condition specs into concrete contexts for one corpus.
pub struct Composer<'a> {
    corpus: &'a Corpus,
    sorted_ids: Vec<String>,
    template: PromptTemplate,
    seed: u64,
    distractors: DistractorPolicy,
}

impl<'a> Composer<'a> {
    pub fn new(corpus: &'a Corpus, template: PromptTemplate, seed: u64, distractors: DistractorPolicy) -> Self {
        let mut sorted_ids: Vec<String> = corpus.passages().iter().map(|p| p.id.clone()).collect();
        sorted_ids.sort();
        Self {
            corpus,
            sorted_ids,
            template,
            seed,
            distractors,
        }
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    fn passage(&self, id: &str) -> Result<ContextPassage, ComposeError> {
        let p = self
            .corpus
            .get(id)
            .ok_or_else(|| ComposeError::UnknownPassage(id.to_string()))?;
        Ok(ContextPassage {
            id: p.id.clone(),
            title: p.title.clone(),
            text: p.text.clone(),
        })
    }

    fn sentences(&self, id: &str, indices: &[usize]) -> Result<ContextPassage, ComposeError> {
        let p = self
            .corpus
            .get(id)
            .ok_or_else(|| ComposeError::UnknownPassage(id.to_string()))?;
        let sents = p
            .sentences
            .as_ref()
            .ok_or_else(|| ComposeError::MissingSentences(id.to_string()))?;
        let mut picked = Vec::with_capacity(indices.len());
        for &i in indices {
            picked.push(
                sents
                    .get(i)
                    .ok_or_else(|| ComposeError::MissingSentences(format!("{id}#{i}")))?
                    .as_str(),
            );
        }
        Ok(ContextPassage {
            id: format!("{id}#sents"),
            title: p.title.clone(),
            text: picked.join(" "),
        })
    }

    /// Composes `spec` for `query`. `ranked` is the query's retrieval list
    /// (needed by retrieved, hybrid oracle and retrieved-distractor modes).
    pub fn compose(
        &self,
        query: &Query,
        spec: ContextSpec,
        ranked: Option<&RankedList>,
    ) -> Result<ComposedContext, ComposeError> {
        let label = spec.to_string();
        let mut seed = None;
        let mut short = false;
        let source;
        let passages: Vec<ContextPassage> = match spec {
            ContextSpec::Retrieved { k, ordering } => {
                let ranked = ranked.ok_or_else(|| ComposeError::MissingFiller(label.clone()))?;
                let scheme = match ordering {
                    OrderingKind::Standard => OrderingScheme::Standard,
                    OrderingKind::Reverse => OrderingScheme::Reverse,
                    OrderingKind::Random => {
                        let s = derive_seed(self.seed, &query.id, &label);
                        seed = Some(s);
                        OrderingScheme::Random { seed: s }
                    }
                };
                let prefix = ranked.prefix(k);
                short = prefix.len() < k;
                source = producer_name(ranked.producer);
                order(prefix, scheme)
                    .iter()
                    .map(|id| self.passage(id))
                    .collect::<Result<_, _>>()?
            }
            ContextSpec::PositionalSweep { k, position } => {
                let golds = gold_ids(query);
                if golds.is_empty() {
                    return Err(ComposeError::NoGolds {
                        query_id: query.id.clone(),
                        mode: "sweep".into(),
                    });
                }
                if position + golds.len() - 1 > k {
                    return Err(ComposeError::Placement {
                        position,
                        golds: golds.len(),
                        k,
                    });
                }
                let needed = k - golds.len();
                let distractors = match self.distractors {
                    DistractorPolicy::Random => {
                        let s = derive_seed(self.seed, &query.id, &spec.pool_label());
                        seed = Some(s);
                        source = "corpus";
                        distractor_pool(query, DistractorSource::Corpus(&self.sorted_ids), needed, s)?
                    }
                    DistractorPolicy::Retrieved => {
                        let ranked = ranked.ok_or_else(|| ComposeError::MissingFiller(label.clone()))?;
                        source = producer_name(ranked.producer);
                        distractor_pool(query, DistractorSource::Retrieved(ranked), needed, 0)?
                    }
                };
                positional_sweep_context(&golds, &distractors, position, k)?
                    .iter()
                    .map(|id| self.passage(id))
                    .collect::<Result<_, _>>()?
            }
            _ => {
                let k = spec.k().unwrap_or(0) as usize;
                let layout = oracle_context(query, spec.mode(), ranked, k)?;
                short = layout.short;
                source = match spec.mode() {
                    ContextMode::ClosedBook => "none",
                    ContextMode::OracleBm25Standard | ContextMode::OracleBm25Reverse => {
                        ranked.map(|r| producer_name(r.producer)).unwrap_or("oracle")
                    }
                    _ => "oracle",
                };
                layout
                    .items
                    .iter()
                    .map(|it| match it {
                        OracleItem::Passage(id) => self.passage(id),
                        OracleItem::Sentences { passage_id, indices } => self.sentences(passage_id, indices),
                    })
                    .collect::<Result<_, _>>()?
            }
        };
        let rendered = render_prompt(&query.question, &passages, &self.template);
        let kept = passages.len() - rendered.dropped;
        let mut passages = passages;
        passages.truncate(kept);
        Ok(ComposedContext {
            query_id: query.id.clone(),
            condition_label: label,
            spec,
            passage_ids: passages.iter().map(|p| p.id.clone()).collect(),
            passages,
            prompt: rendered.text,
            provenance: ContextProvenance {
                source: source.to_string(),
                seed,
                template: self.template.fingerprint(),
                dropped_for_budget: rendered.dropped,
                short,
            },
        })
    }
}

fn producer_name(p: Producer) -> &'static str {
    match p {
        Producer::Bm25 => "bm25",
        Producer::Rerank => "rerank",
        Producer::Oracle => "oracle",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Passage, SentenceRef};

    fn ids(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    fn ranked(rows: &[(&str, f64)]) -> RankedList {
        RankedList {
            query_id: "q".into(),
            entries: rows
                .iter()
                .map(|(id, s)| RankedEntry {
                    passage_id: id.to_string(),
                    score: *s,
                })
                .collect(),
            producer: Producer::Bm25,
        }
    }

    fn query(golds: &[&str]) -> Query {
        Query {
            id: "q1".into(),
            question: "Where?".into(),
            gold_answers: ids(&["Paris"]),
            gold_passage_ids: ids(golds),
            gold_sentence_refs: vec![],
        }
    }

    #[test]
    fn ordering_examples() {
        let r = ranked(&[("a", 3.2), ("b", 1.5), ("c", 0.7)]);
        assert_eq!(order(&r.entries, OrderingScheme::Standard), ids(&["a", "b", "c"]));
        assert_eq!(order(&r.entries, OrderingScheme::Reverse), ids(&["c", "b", "a"]));
        let s = OrderingScheme::Random { seed: 11 };
        assert_eq!(order(&r.entries, s), order(&r.entries, s));
    }

    #[test]
    fn sweep_examples() {
        let g2 = ids(&["G1", "G2"]);
        let d3 = ids(&["D1", "D2", "D3"]);
        assert_eq!(
            positional_sweep_context(&g2, &d3, 2, 5).unwrap(),
            ids(&["D1", "G1", "G2", "D2", "D3"])
        );
        let g1 = ids(&["G1"]);
        let d2 = ids(&["D1", "D2"]);
        assert_eq!(
            positional_sweep_context(&g1, &d2, 1, 3).unwrap(),
            ids(&["G1", "D1", "D2"])
        );
        assert_eq!(
            positional_sweep_context(&g1, &d2, 3, 3).unwrap(),
            ids(&["D1", "D2", "G1"])
        );
    }

    #[test]
    fn sweep_errors() {
        let g2 = ids(&["G1", "G2"]);
        assert!(matches!(
            positional_sweep_context(&g2, &ids(&["D1", "D2"]), 4, 4),
            Err(ComposeError::Placement { .. })
        ));
        assert!(matches!(
            positional_sweep_context(&g2, &ids(&["D1"]), 1, 4),
            Err(ComposeError::InsufficientDistractors { shortfall: 1, .. })
        ));
        assert!(matches!(
            positional_sweep_context(&g2, &ids(&["D1"]), 0, 4),
            Err(ComposeError::InvalidPosition { .. })
        ));
    }

    fn layout_ids(l: &OracleLayout) -> Vec<String> {
        l.items
            .iter()
            .map(|it| match it {
                OracleItem::Passage(id) => id.clone(),
                OracleItem::Sentences { passage_id, .. } => format!("{passage_id}#sents"),
            })
            .collect()
    }

    #[test]
    fn oracle_examples() {
        let q = query(&["G"]);
        let filler = ranked(&[("N1", 2.0), ("N2", 1.0)]);
        let cb = oracle_context(&q, ContextMode::ClosedBook, None, 0).unwrap();
        assert!(cb.items.is_empty());
        let rev = oracle_context(&q, ContextMode::OracleBm25Reverse, Some(&filler), 3).unwrap();
        assert_eq!(layout_ids(&rev), ids(&["N2", "N1", "G"]));
        let std = oracle_context(&q, ContextMode::OracleBm25Standard, Some(&filler), 3).unwrap();
        assert_eq!(layout_ids(&std), ids(&["G", "N1", "N2"]));
        assert!(!std.short);
    }

    #[test]
    fn oracle_skips_gold_filler_and_flags_short() {
        let q = query(&["G", "H"]);
        let filler = ranked(&[("G", 9.0), ("N1", 2.0), ("H", 1.5), ("N2", 1.0)]);
        let std = oracle_context(&q, ContextMode::OracleBm25Standard, Some(&filler), 5).unwrap();
        assert_eq!(layout_ids(&std), ids(&["G", "H", "N1", "N2"]));
        assert!(std.short);
        let none = query(&[]);
        assert!(matches!(
            oracle_context(&none, ContextMode::OraclePassages, None, 0),
            Err(ComposeError::NoGolds { .. })
        ));
        assert!(matches!(
            oracle_context(&q, ContextMode::OracleBm25Reverse, None, 5),
            Err(ComposeError::MissingFiller(_))
        ));
    }

    #[test]
    fn oracle_sents_groups_by_passage() {
        let mut q = query(&["A", "B"]);
        q.gold_sentence_refs = vec![
            SentenceRef("A".into(), 2),
            SentenceRef("B".into(), 0),
            SentenceRef("A".into(), 0),
        ];
        let l = oracle_context(&q, ContextMode::OracleSents, None, 0).unwrap();
        assert_eq!(
            l.items,
            vec![
                OracleItem::Sentences {
                    passage_id: "A".into(),
                    indices: vec![2, 0]
                },
                OracleItem::Sentences {
                    passage_id: "B".into(),
                    indices: vec![0]
                },
            ]
        );
    }

    #[test]
    fn distractor_pools() {
        let q = query(&["G"]);
        let corpus_ids = ids(&["D1", "D2", "D3", "D4", "G"]);
        let a = distractor_pool(&q, DistractorSource::Corpus(&corpus_ids), 4, 5).unwrap();
        let b = distractor_pool(&q, DistractorSource::Corpus(&corpus_ids), 4, 5).unwrap();
        assert_eq!(a, b);
        assert!(!a.contains(&"G".to_string()));
        assert!(matches!(
            distractor_pool(&q, DistractorSource::Corpus(&corpus_ids), 5, 5),
            Err(ComposeError::InsufficientDistractors { shortfall: 1, .. })
        ));
        let filler = ranked(&[("G", 3.0), ("N1", 2.0), ("N2", 1.0)]);
        assert_eq!(
            distractor_pool(&q, DistractorSource::Retrieved(&filler), 2, 0).unwrap(),
            ids(&["N1", "N2"])
        );
    }

    fn cp(id: &str, text: &str) -> ContextPassage {
        ContextPassage {
            id: id.into(),
            title: None,
            text: text.into(),
        }
    }

    #[test]
    fn prompt_rendering() {
        let t = PromptTemplate::default();
        let empty = render_prompt("Who?", &[], &t);
        assert!(!empty.text.contains("Document"));
        assert!(empty.text.contains("Question: Who?"));
        assert!(empty.text.contains(&t.closed_book_instruction));

        let two = render_prompt("Who?", &[cp("a", "alpha text"), cp("b", "beta text")], &t);
        let ia = two.text.find("alpha text").unwrap();
        let ib = two.text.find("beta text").unwrap();
        assert!(ia < ib);
        assert!(two.text.contains("Document [1]: alpha text"));
        assert!(two.text.contains("Document [2]: beta text"));
        assert_eq!(
            two,
            render_prompt("Who?", &[cp("a", "alpha text"), cp("b", "beta text")], &t)
        );
    }

    #[test]
    fn budget_drops_from_the_end() {
        let mut t = PromptTemplate::default();
        let passages = [cp("a", "one two three"), cp("b", "four five six")];
        let full = render_prompt("Who?", &passages, &t);
        let full_tokens = count_prompt_tokens(&full.text);
        t.max_prompt_tokens = Some(full_tokens - 1);
        let cut = render_prompt("Who?", &passages, &t);
        assert_eq!(cut.dropped, 1);
        assert!(cut.text.contains("one two three"));
        assert!(!cut.text.contains("four five six"));
    }

    #[test]
    fn labels_round_trip() {
        for label in [
            "retrieved:k=25:reverse",
            "sweep:k=10:i=4",
            "oracle_bm25_reverse:k=50",
            "oracle_bm25_standard:k=5",
            "closed_book",
            "oracle_passages",
            "oracle_sents",
        ] {
            assert_eq!(ContextSpec::parse(label).unwrap().to_string(), label);
        }
        for bad in [
            "retrieved:k=0:reverse",
            "sweep:k=3:i=4",
            "retrieved:k=5:sideways",
            "oops",
        ] {
            assert!(ContextSpec::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn composer_builds_oracle_sents_pseudo_passages() {
        let corpus = Corpus::from_passages(
            "c",
            vec![Passage {
                id: "A".into(),
                text: "S0. S1. S2.".into(),
                title: Some("Alpha".into()),
                sentences: Some(ids(&["S0.", "S1.", "S2."])),
            }],
        )
        .unwrap();
        let mut q = query(&["A"]);
        q.gold_sentence_refs = vec![SentenceRef("A".into(), 2), SentenceRef("A".into(), 0)];
        let c = Composer::new(&corpus, PromptTemplate::default(), 1, DistractorPolicy::Random);
        let ctx = c.compose(&q, ContextSpec::OracleSents, None).unwrap();
        assert_eq!(ctx.passage_ids, ids(&["A#sents"]));
        assert!(ctx.prompt.contains("Document [1] (Alpha): S2. S0."));
        let cb = c.compose(&q, ContextSpec::ClosedBook, None).unwrap();
        assert!(cb.passage_ids.is_empty());
        assert_eq!(cb.provenance.source, "none");
    }
}
