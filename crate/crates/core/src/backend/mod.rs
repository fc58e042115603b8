//! Chat-completion and embedding services behind one trait: a live client
//! for OpenAI-compatible HTTP APIs, a deterministic mock over the cell DSL,
//! and a persistent record/replay cache that can wrap either.

mod http;
mod mock;
mod replay;

use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::Embedder;

pub use http::{HttpBackend, RetryPolicy, API_KEY_ENV, BASE_URL_ENV, DEFAULT_BASE_URL};
pub use mock::{
    corruption_probability, mock_recover, mock_summarize, summary_clause, template_quality, MockBackend, MockConfig,
    SUMMARY_FALLBACK,
};
pub use replay::{CacheEntry, ReplayBackend};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no API key: set {API_KEY_ENV}")]
    AuthMissing,
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no cached response for request {key} and no fallback backend")]
    CacheMiss { key: String },
    #[error("cache file {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    Assistant,
    User,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::Assistant => "assistant",
            Role::User => "user",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl GenerationParams {
    pub fn new(model: impl Into<String>, temperature: f64, max_tokens: u32) -> Self {
        Self {
            model: model.into(),
            temperature,
            max_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Checks the request shape every backend relies on.
pub fn validate_request(messages: &[ChatMessage], params: &GenerationParams) -> Result<(), BackendError> {
    params.validate()?;
    match messages.first() {
        None => return Err(BackendError::InvalidRequest("no messages".into())),
        Some(m) if m.role != Role::System => {
            return Err(BackendError::InvalidRequest(
                "first message must have role system".into(),
            ))
        }
        _ => {}
    }
    if let Some(i) = messages.iter().position(|m| m.content.is_empty()) {
        return Err(BackendError::InvalidRequest(format!("message {i} has empty content")));
    }
    Ok(())
}

/// JSON body of a chat-completion request. Also the canonical form hashed
/// into cache keys.
#[derive(Debug, Clone, Serialize)]
pub struct ChatRequest<'a> {
    pub model: &'a str,
    pub messages: &'a [ChatMessage],
    pub temperature: f64,
    pub max_tokens: u32,
}

impl<'a> ChatRequest<'a> {
    pub fn new(messages: &'a [ChatMessage], params: &'a GenerationParams) -> Self {
        Self {
            model: &params.model,
            messages,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EmbeddingRequest<'a> {
    pub model: &'a str,
    pub input: &'a [String],
}

/// SHA-256 digest identifying a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(pub [u8; 32]);

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

fn digest(tag: &str, body: &impl Serialize) -> CacheKey {
    let mut hasher = Sha256::new();
    hasher.update(tag.as_bytes());
    hasher.update([0u8]);
    hasher.update(serde_json::to_vec(body).expect("request bodies serialize"));
    CacheKey(hasher.finalize().into())
}

/// Digest over model, temperature, max tokens and every role and content,
/// in message order.
pub fn cache_key(messages: &[ChatMessage], params: &GenerationParams) -> CacheKey {
    digest("chat", &ChatRequest::new(messages, params))
}

pub fn embedding_cache_key(model: &str, texts: &[String]) -> CacheKey {
    digest("embeddings", &EmbeddingRequest { model, input: texts })
}

pub trait Backend: Send + Sync {
    fn chat(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String, BackendError>;

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn chat(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String, BackendError> {
        (**self).chat(messages, params)
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        (**self).embed(model, texts)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn chat(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String, BackendError> {
        (**self).chat(messages, params)
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        (**self).embed(model, texts)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn chat(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String, BackendError> {
        (**self).chat(messages, params)
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        (**self).embed(model, texts)
    }
}

impl<B: Backend + ?Sized> Embedder for B {
    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Backend::embed(self, model, texts)
    }
}

/// Wraps a backend and counts the calls made through it.
#[derive(Debug, Default)]
pub struct CountingBackend<B> {
    inner: B,
    chat_calls: AtomicU64,
    embed_calls: AtomicU64,
}

impl<B> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            chat_calls: AtomicU64::new(0),
            embed_calls: AtomicU64::new(0),
        }
    }

    pub fn chat_calls(&self) -> u64 {
        self.chat_calls.load(Ordering::SeqCst)
    }

    pub fn embed_calls(&self) -> u64 {
        self.embed_calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn chat(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String, BackendError> {
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        self.inner.chat(messages, params)
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        self.inner.embed(model, texts)
    }
}

/// Declarative backend description, turned into a live backend by [`BackendKind::build`].
#[derive(Debug, Clone, PartialEq)]
pub enum BackendKind {
    Http {
        base_url: Option<String>,
        /// `None` reads the key from the environment.
        api_key: Option<String>,
    },
    Mock(MockConfig),
    Replay {
        cache_path: PathBuf,
        fallback: Option<Box<BackendKind>>,
    },
}

impl BackendKind {
    pub fn build(&self) -> Result<Box<dyn Backend>, BackendError> {
        Ok(match self {
            BackendKind::Http { base_url, api_key } => {
                let key = api_key.clone().or_else(|| std::env::var(API_KEY_ENV).ok());
                let url = base_url
                    .clone()
                    .or_else(|| std::env::var(BASE_URL_ENV).ok())
                    .unwrap_or_else(|| DEFAULT_BASE_URL.to_string());
                Box::new(HttpBackend::new(url, key, RetryPolicy::default())?)
            }
            BackendKind::Mock(cfg) => Box::new(MockBackend::new(cfg.clone())?),
            BackendKind::Replay { cache_path, fallback } => {
                let fallback = fallback.as_ref().map(|k| k.build()).transpose()?;
                Box::new(ReplayBackend::open(cache_path, fallback)?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> GenerationParams {
        GenerationParams::new("m", 0.0, 10)
    }

    #[test]
    fn cache_key_sensitivity() {
        let msgs = vec![ChatMessage::system("sys"), ChatMessage::user("hello")];
        let k = cache_key(&msgs, &params());
        assert_eq!(k, cache_key(&msgs, &params()));
        let reordered = vec![msgs[1].clone(), msgs[0].clone()];
        assert_ne!(k, cache_key(&reordered, &params()));
        let mut role = msgs.clone();
        role[1].role = Role::Assistant;
        assert_ne!(k, cache_key(&role, &params()));
        assert_ne!(k, cache_key(&msgs, &GenerationParams::new("m", 0.5, 10)));
        assert_ne!(k, cache_key(&msgs, &GenerationParams::new("m", 0.0, 11)));
        assert_ne!(k, cache_key(&msgs, &GenerationParams::new("n", 0.0, 10)));
        assert_eq!(k.to_string().len(), 64);
    }

    #[test]
    fn cache_key_single_char_perturbations() {
        use rand::{Rng, SeedableRng};
        use std::collections::HashMap;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let base = vec![
            ChatMessage::system("encode the cell"),
            ChatMessage::assistant("n2{(op_a,0),(op_b,1)}"),
            ChatMessage::user("n2{(op_c,0),(op_c,1)}"),
        ];
        let mut seen: HashMap<CacheKey, Vec<ChatMessage>> = HashMap::new();
        seen.insert(cache_key(&base, &params()), base.clone());
        for _ in 0..1000 {
            let mut msgs = base.clone();
            let m = rng.gen_range(0..msgs.len());
            let mut chars: Vec<char> = msgs[m].content.chars().collect();
            let i = rng.gen_range(0..chars.len());
            let replacement = loop {
                let c = rng.gen_range(b' '..=b'~') as char;
                if c != chars[i] {
                    break c;
                }
            };
            chars[i] = replacement;
            msgs[m].content = chars.into_iter().collect();
            let key = cache_key(&msgs, &params());
            let previous = seen.entry(key).or_insert_with(|| msgs.clone());
            assert_eq!(previous, &msgs, "collision");
        }
    }

    #[test]
    fn request_validation() {
        let p = params();
        assert!(validate_request(&[], &p).is_err());
        assert!(validate_request(&[ChatMessage::user("x")], &p).is_err());
        assert!(validate_request(&[ChatMessage::system("x"), ChatMessage::user("")], &p).is_err());
        assert!(validate_request(&[ChatMessage::system("x")], &GenerationParams::new("m", 2.5, 1)).is_err());
        assert!(validate_request(&[ChatMessage::system("x")], &GenerationParams::new("m", 1.0, 0)).is_err());
        assert!(validate_request(&[ChatMessage::system("x")], &p).is_ok());
    }

    #[test]
    fn http_without_key_is_auth_missing() {
        let backend = HttpBackend::new("http://127.0.0.1:9".into(), None, RetryPolicy::default()).unwrap();
        let err = backend
            .chat(&[ChatMessage::system("s"), ChatMessage::user("u")], &params())
            .unwrap_err();
        assert!(matches!(err, BackendError::AuthMissing));
    }
}
