//! Blocking client for OpenAI-compatible `/chat/completions` and `/embeddings`.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::Value;

use super::{validate_request, Backend, BackendError, ChatMessage, ChatRequest, EmbeddingRequest, GenerationParams};

pub const API_KEY_ENV: &str = "ANNOLOOP_API_KEY";
pub const BASE_URL_ENV: &str = "ANNOLOOP_BASE_URL";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

/// Retries on 429 and 5xx only, doubling the delay after each attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, for `attempt` starting at 1.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt.saturating_sub(1))
    }

    pub fn is_retryable(status: StatusCode) -> bool {
        status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error()
    }
}

pub struct HttpBackend {
    client: Client,
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

impl HttpBackend {
    pub fn new(base_url: String, api_key: Option<String>, retry: RetryPolicy) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            retry,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn post(&self, path: &str, body: &impl serde::Serialize) -> Result<Value, BackendError> {
        let key = self.api_key.as_deref().ok_or(BackendError::AuthMissing)?;
        let url = format!("{}/{}", self.base_url, path);
        let mut attempt = 1;
        loop {
            let response = self
                .client
                .post(&url)
                .bearer_auth(key)
                .json(body)
                .send()
                .map_err(|e| BackendError::Transport(e.to_string()))?;
            let status = response.status();
            let text = response.text().map_err(|e| BackendError::Transport(e.to_string()))?;
            if status.is_success() {
                return serde_json::from_str(&text).map_err(|e| BackendError::MalformedResponse(e.to_string()));
            }
            if RetryPolicy::is_retryable(status) && attempt < self.retry.max_attempts {
                let delay = self.retry.delay_after(attempt);
                log::warn!("{url} returned {status}; retrying in {delay:?} (attempt {attempt})");
                std::thread::sleep(delay);
                attempt += 1;
                continue;
            }
            return Err(BackendError::Http {
                status: status.as_u16(),
                body: text,
            });
        }
    }
}

impl Backend for HttpBackend {
    fn chat(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String, BackendError> {
        validate_request(messages, params)?;
        let value = self.post("chat/completions", &ChatRequest::new(messages, params))?;
        let parsed: ChatResponse =
            serde_json::from_value(value).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::MalformedResponse("no choices[0].message.content".into()))
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::InvalidRequest("no texts to embed".into()));
        }
        let value = self.post("embeddings", &EmbeddingRequest { model, input: texts })?;
        let mut parsed: EmbeddingResponse =
            serde_json::from_value(value).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(BackendError::MalformedResponse(format!(
                "{} embeddings for {} inputs",
                parsed.data.len(),
                texts.len()
            )));
        }
        if parsed.data.iter().all(|d| d.index.is_some()) {
            parsed.data.sort_by_key(|d| d.index);
        }
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}
