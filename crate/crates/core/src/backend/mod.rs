//! Model services: chat completion and text embedding.
//!
//! [`ChatBackend`] and [`Embedder`] are the only way the rest of the crate
//! talks to a model. [`OllamaBackend`] speaks the Ollama REST API;
//! [`ScriptedBackend`] replays canned or recorded replies so that the loop is
//! testable without inference; [`HashingEmbedder`] is a model-free embedder.

mod hashing;
mod ollama;
mod scripted;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::domain::AgentRole;

pub use hashing::HashingEmbedder;
pub use ollama::{OllamaBackend, OllamaConfig, OllamaEmbedder};
pub use scripted::{scripted_from_trace, ScriptFile, ScriptedBackend};

/// Format hint requesting a machine-parseable reply.
pub const STRUCTURED: &str = "structured";

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

/// Routing metadata attached to a request. Never sent over the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallTag {
    pub role: AgentRole,
    /// Iteration the call belongs to.
    pub t: u32,
    /// 0 for the first ask, incremented on every format re-ask.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_name: String,
    pub system_prompt: String,
    pub user_prompt: String,
    pub image_refs: Vec<PathBuf>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub format_hint: Option<String>,
    pub tag: CallTag,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.system_prompt.trim().is_empty() || self.user_prompt.trim().is_empty() {
            return Err(BackendError::Precondition("prompts must be non-empty".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(BackendError::Precondition(format!(
                "temperature {} must be a finite number >= 0",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::Precondition("max_tokens must be > 0".into()));
        }
        if let Some(missing) = self.image_refs.iter().find(|p| !p.is_file()) {
            return Err(BackendError::Precondition(format!(
                "image {} does not exist",
                missing.display()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub model_name: String,
    pub latency_ms: u64,
}

/// A finite, non-empty embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, BackendError> {
        if values.is_empty() {
            return Err(BackendError::Decode("embedding has zero dimensions".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::Decode("embedding has non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    /// Scales to unit L2 norm. Fails on the zero vector.
    pub fn normalized(self) -> Result<Self, BackendError> {
        let norm = self
            .values
            .iter()
            .map(|v| f64::from(*v) * f64::from(*v))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(BackendError::Precondition("cannot normalize a zero vector".into()));
        }
        Ok(Self {
            values: self.values.iter().map(|v| (f64::from(*v) / norm) as f32).collect(),
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("server returned status {status} after {attempts} attempt(s): {body}")]
    Status {
        attempts: u32,
        status: u16,
        body: String,
    },
    #[error("malformed reply: {0}")]
    Decode(String),
    #[error("script exhausted: {0}")]
    ScriptExhausted(String),
    #[error("invalid request: {0}")]
    Precondition(String),
    #[error("backend configuration error: {0}")]
    Config(String),
}

impl BackendError {
    /// Errors a caller may retry against a live service.
    pub fn is_retriable(&self) -> bool {
        match self {
            BackendError::Transport { .. } | BackendError::Timeout { .. } => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Short description for logs and run manifests.
    fn describe(&self) -> String;
}

pub trait Embedder: Send + Sync {
    /// Identifies the embedding space; indexes refuse queries from another id.
    fn id(&self) -> &str;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).chat(request)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).chat(request)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<T: Embedder + ?Sized> Embedder for Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        (**self).embed(text)
    }
}

/// Builds the embedder that produced an index, from its id.
pub fn embedder_for_id(id: &str, ollama: &OllamaConfig) -> Result<Box<dyn Embedder>, BackendError> {
    if let Some(embedder) = HashingEmbedder::from_id(id) {
        return Ok(Box::new(embedder));
    }
    if let Some(model) = id.strip_prefix(OllamaEmbedder::ID_PREFIX) {
        return Ok(Box::new(OllamaEmbedder::new(ollama.clone(), model)?));
    }
    Err(BackendError::Config(format!("unknown embedder id `{id}`")))
}

/// Builds an embedder from a user-facing model name; `hashing` selects the
/// built-in hashing embedder.
pub fn embedder_for_model(name: &str, ollama: &OllamaConfig) -> Result<Box<dyn Embedder>, BackendError> {
    if name == "hashing" {
        return Ok(Box::new(HashingEmbedder::default()));
    }
    if let Some(embedder) = HashingEmbedder::from_id(name) {
        return Ok(Box::new(embedder));
    }
    Ok(Box::new(OllamaEmbedder::new(ollama.clone(), name)?))
}
