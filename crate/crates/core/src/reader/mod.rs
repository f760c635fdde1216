//! Answer generation: an OpenAI-compatible chat backend and two
//! deterministic mock readers, behind a persistent answer cache.

mod cache;
mod chat;
mod mock;

pub use cache::{AnswerCache, CacheEntry, CACHE_JOURNAL};
pub use chat::ChatClient;
pub use mock::{mock_containment_answer, mock_positional_answer, MockProfile, WRONG_ANSWER};

use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::composer::ComposedContext;
use crate::corpus::Query;
use crate::hash::StableHasher;
use crate::http::HttpError;

pub const DEFAULT_API_KEY_ENV: &str = "RAGORDER_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum ReaderError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("chat protocol error: {0}")]
    Protocol(String),
    #[error("{backend} cannot answer condition '{label}'")]
    Unsupported { backend: String, label: String },
    #[error("answer cache: {0}")]
    Cache(String),
    #[error("invalid reader configuration: {0}")]
    Config(String),
}

impl ReaderError {
    /// Errors that mean the endpoint could not be reached at all.
    pub fn is_transport(&self) -> bool {
        matches!(self, ReaderError::Transport { .. })
    }
}

impl From<HttpError> for ReaderError {
    fn from(e: HttpError) -> Self {
        match e {
            HttpError::Transport { attempts, message } => ReaderError::Transport { attempts, message },
            HttpError::Status { status, body } => ReaderError::Status { status, body },
            HttpError::Decode(m) => ReaderError::Protocol(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    HttpChat,
    MockContainment,
    MockPositional,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::HttpChat => "http_chat",
            Backend::MockContainment => "mock_containment",
            Backend::MockPositional => "mock_positional",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = ReaderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http_chat" => Ok(Backend::HttpChat),
            "mock_containment" => Ok(Backend::MockContainment),
            "mock_positional" => Ok(Backend::MockPositional),
            _ => Err(ReaderError::Config(format!("unknown backend '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Decoding {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReaderConfig {
    pub backend: Backend,
    pub endpoint: Option<String>,
    pub model_name: String,
    pub decoding: Decoding,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: String,
    pub concurrency: usize,
    /// Answer cache directory; relative paths resolve against the run directory.
    pub cache_dir: Option<PathBuf>,
    pub mock: MockProfile,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::MockContainment,
            endpoint: None,
            model_name: "mock".into(),
            decoding: Decoding::default(),
            timeout_secs: 120,
            max_retries: 3,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            concurrency: 4,
            cache_dir: Some(PathBuf::from("cache")),
            mock: MockProfile::default(),
        }
    }
}

impl ReaderConfig {
    pub fn validate(&self) -> Result<(), ReaderError> {
        if self.decoding.temperature.is_nan() || self.decoding.temperature < 0.0 {
            return Err(ReaderError::Config("temperature must be >= 0".into()));
        }
        if self.decoding.max_output_tokens < 1 {
            return Err(ReaderError::Config("max_output_tokens must be >= 1".into()));
        }
        if self.backend == Backend::HttpChat && self.endpoint.is_none() {
            return Err(ReaderError::Config("http_chat requires an endpoint".into()));
        }
        if self.concurrency < 1 {
            return Err(ReaderError::Config("concurrency must be >= 1".into()));
        }
        self.mock.validate()
    }

    pub fn cache_key(&self, prompt: &str) -> String {
        cache_key(&self.model_name, &self.decoding, prompt)
    }
}

/// `H(model_name, decoding, prompt bytes)`.
pub fn cache_key(model_name: &str, decoding: &Decoding, prompt: &str) -> String {
    StableHasher::new()
        .str(model_name)
        .f64(decoding.temperature)
        .u64(decoding.max_output_tokens as u64)
        .bytes(prompt.as_bytes())
        .finish_hex()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub query_id: String,
    pub condition_label: String,
    pub text: String,
    pub cached: bool,
    pub latency_ms: u64,
    pub cache_key: String,
}

/// Everything a reader may look at for one cell. Only mocks use more than
/// the prompt.
#[derive(Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub query: &'a Query,
    pub context: &'a ComposedContext,
}

pub trait Generator: Send + Sync {
    fn model_name(&self) -> &str;

    fn generate(&self, request: GenerationRequest<'_>) -> Result<Answer, ReaderError>;
}

/// The configured reader: backend plus optional answer cache.
pub struct Reader {
    config: ReaderConfig,
    chat: Option<ChatClient>,
    cache: Option<AnswerCache>,
}

impl Reader {
    pub fn new(config: ReaderConfig, cache: Option<AnswerCache>) -> Result<Self, ReaderError> {
        config.validate()?;
        let chat = match config.backend {
            Backend::HttpChat => {
                let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
                Some(ChatClient::new(
                    config.endpoint.clone().expect("validated"),
                    Duration::from_secs(config.timeout_secs),
                    config.max_retries,
                    api_key,
                ))
            }
            _ => None,
        };
        Ok(Self { config, chat, cache })
    }

    pub fn with_chat_client(mut self, chat: ChatClient) -> Self {
        self.chat = Some(chat);
        self
    }

    pub fn config(&self) -> &ReaderConfig {
        &self.config
    }

    pub fn cache(&self) -> Option<&AnswerCache> {
        self.cache.as_ref()
    }

    fn answer(
        &self,
        request: GenerationRequest<'_>,
        text: String,
        cached: bool,
        latency_ms: u64,
        key: String,
    ) -> Answer {
        Answer {
            query_id: request.query.id.clone(),
            condition_label: request.context.condition_label.clone(),
            text,
            cached,
            latency_ms,
            cache_key: key,
        }
    }
}

impl Generator for Reader {
    fn model_name(&self) -> &str {
        &self.config.model_name
    }

    fn generate(&self, request: GenerationRequest<'_>) -> Result<Answer, ReaderError> {
        let prompt = &request.context.prompt;
        let key = self.config.cache_key(prompt);

        // Positional mock answers depend on the cell identity, not only the
        // prompt, so they bypass the prompt-keyed cache.
        if self.config.backend == Backend::MockPositional {
            let text = mock_positional_answer(request.context, request.query, &self.config.mock)?;
            return Ok(self.answer(request, text, false, 0, key));
        }

        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(self.answer(request, hit.text, true, 0, key));
        }

        let (text, latency_ms) = match self.config.backend {
            Backend::MockContainment => (mock_containment_answer(request.context, request.query), 0),
            Backend::HttpChat => {
                let started = Instant::now();
                let chat = self.chat.as_ref().expect("http backend has a client");
                let text = chat.complete(prompt, &self.config.model_name, &self.config.decoding)?;
                (text, started.elapsed().as_millis() as u64)
            }
            Backend::MockPositional => unreachable!(),
        };
        if let Some(cache) = &self.cache {
            cache.put(CacheEntry {
                key: key.clone(),
                model: self.config.model_name.clone(),
                prompt: prompt.clone(),
                text: text.clone(),
                latency_ms,
            })?;
        }
        Ok(self.answer(request, text, false, latency_ms, key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::{ContextPassage, ContextProvenance, ContextSpec};

    fn ctx(text: &str) -> ComposedContext {
        ComposedContext {
            query_id: "q1".into(),
            condition_label: "closed_book".into(),
            spec: ContextSpec::ClosedBook,
            passage_ids: vec!["p".into()],
            passages: vec![ContextPassage {
                id: "p".into(),
                title: None,
                text: text.into(),
            }],
            prompt: format!("prompt with {text}"),
            provenance: ContextProvenance {
                source: "none".into(),
                seed: None,
                template: "t".into(),
                dropped_for_budget: 0,
                short: false,
            },
        }
    }

    fn query() -> Query {
        Query {
            id: "q1".into(),
            question: "capital?".into(),
            gold_answers: vec!["Paris".into()],
            gold_passage_ids: vec![],
            gold_sentence_refs: vec![],
        }
    }

    #[test]
    fn containment_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = AnswerCache::open(dir.path()).unwrap();
        let reader = Reader::new(ReaderConfig::default(), Some(cache)).unwrap();
        let q = query();
        let c = ctx("The capital is Paris.");
        let first = reader.generate(GenerationRequest { query: &q, context: &c }).unwrap();
        assert_eq!(first.text, "Paris");
        assert!(!first.cached);
        let second = reader.generate(GenerationRequest { query: &q, context: &c }).unwrap();
        assert!(second.cached);
        assert_eq!(second.text, first.text);
        assert_eq!(second.cache_key, first.cache_key);
    }

    #[test]
    fn containment_without_gold_is_unknown() {
        let reader = Reader::new(ReaderConfig::default(), None).unwrap();
        let q = query();
        let c = ctx("Nothing relevant here.");
        let a = reader.generate(GenerationRequest { query: &q, context: &c }).unwrap();
        assert_eq!(a.text, "unknown");
    }

    #[test]
    fn cache_key_covers_model_decoding_prompt() {
        let d = Decoding::default();
        let base = cache_key("m", &d, "p");
        assert_ne!(base, cache_key("m2", &d, "p"));
        assert_ne!(base, cache_key("m", &d, "p2"));
        let hot = Decoding { temperature: 0.7, ..d };
        assert_ne!(base, cache_key("m", &hot, "p"));
    }

    #[test]
    fn config_validation() {
        let mut c = ReaderConfig::default();
        c.decoding.temperature = -1.0;
        assert!(c.validate().is_err());
        let mut c = ReaderConfig::default();
        c.decoding.max_output_tokens = 0;
        assert!(c.validate().is_err());
        let c = ReaderConfig {
            backend: Backend::HttpChat,
            endpoint: None,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
