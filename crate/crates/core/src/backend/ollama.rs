use std::fs;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, EmbeddingVector, Embedder, STRUCTURED};

pub const DEFAULT_BASE_URL: &str = "http://localhost:11434";

/// Connection settings for an Ollama-compatible server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OllamaConfig {
    pub base_url: String,
    pub timeout_secs: u64,
    /// Retries after the first attempt on transport, timeout and status errors.
    pub retries: u32,
    pub backoff_base_ms: u64,
    pub max_connections: usize,
}

impl Default for OllamaConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.to_string(),
            timeout_secs: 300,
            retries: 2,
            backoff_base_ms: 250,
            max_connections: 4,
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut free = self.0.free.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.0.cv.notify_one();
    }
}

/// Shared HTTP plumbing for chat and embeddings.
#[derive(Debug)]
struct Http {
    config: OllamaConfig,
    client: reqwest::blocking::Client,
    permits: Permits,
}

impl Http {
    fn new(config: OllamaConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            permits: Permits::new(config.max_connections),
            client,
            config,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    /// POSTs `body`, retrying with exponential backoff.
    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let _permit = self.permits.acquire();
        let url = self.url(path);
        let max_attempts = self.config.retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.post_once(&url, body, attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retriable() && attempt < max_attempts => {
                    let delay = self.config.backoff_base_ms << (attempt - 1);
                    log::warn!("{url}: {e}; retrying in {delay} ms");
                    thread::sleep(Duration::from_millis(delay));
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn post_once(&self, url: &str, body: &Value, attempts: u32) -> Result<Value, BackendError> {
        let resp = self.client.post(url).json(body).send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout { attempts }
            } else {
                BackendError::Transport {
                    attempts,
                    message: e.to_string(),
                }
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport {
            attempts,
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(BackendError::Status {
                attempts,
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Decode(e.to_string()))
    }
}

/// Chat client for the Ollama `/api/chat` endpoint.
#[derive(Debug)]
pub struct OllamaBackend {
    http: Http,
}

impl OllamaBackend {
    pub fn new(config: OllamaConfig) -> Result<Self, BackendError> {
        Ok(Self {
            http: Http::new(config)?,
        })
    }

    /// The JSON body sent for `request`. Images are inlined as base64.
    pub fn request_body(request: &ChatRequest) -> Result<Value, BackendError> {
        let images = request
            .image_refs
            .iter()
            .map(|p| {
                fs::read(p)
                    .map(|bytes| base64::engine::general_purpose::STANDARD.encode(bytes))
                    .map_err(|e| BackendError::Precondition(format!("{}: {e}", p.display())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut user = json!({ "role": "user", "content": request.user_prompt });
        if !images.is_empty() {
            user["images"] = json!(images);
        }
        let mut body = json!({
            "model": request.model_name,
            "messages": [
                { "role": "system", "content": request.system_prompt },
                user,
            ],
            "stream": false,
            "options": {
                "temperature": request.temperature,
                "num_predict": request.max_tokens,
            },
        });
        if request.format_hint.as_deref() == Some(STRUCTURED) {
            body["format"] = json!("json");
        }
        Ok(body)
    }
}

impl ChatBackend for OllamaBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let body = Self::request_body(request)?;
        let started = Instant::now();
        let reply = self.http.post("/api/chat", &body)?;
        let text = reply
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Decode("reply has no message.content".into()))?;
        Ok(ChatResponse {
            text: text.to_string(),
            model_name: reply
                .get("model")
                .and_then(Value::as_str)
                .unwrap_or(&request.model_name)
                .to_string(),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }

    fn describe(&self) -> String {
        format!("ollama:{}", self.http.config.base_url)
    }
}

/// Embeddings through the Ollama `/api/embed` endpoint.
#[derive(Debug)]
pub struct OllamaEmbedder {
    http: Http,
    model: String,
    id: String,
}

impl OllamaEmbedder {
    pub const ID_PREFIX: &'static str = "ollama:";

    pub fn new(config: OllamaConfig, model: impl Into<String>) -> Result<Self, BackendError> {
        let model = model.into();
        Ok(Self {
            http: Http::new(config)?,
            id: format!("{}{model}", Self::ID_PREFIX),
            model,
        })
    }
}

impl Embedder for OllamaEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::Precondition("cannot embed empty text".into()));
        }
        let reply = self
            .http
            .post("/api/embed", &json!({ "model": self.model, "input": text }))?;
        let values = reply
            .pointer("/embeddings/0")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Decode("reply has no embeddings[0]".into()))?
            .iter()
            .map(|v| {
                v.as_f64()
                    .map(|f| f as f32)
                    .ok_or_else(|| BackendError::Decode("non-numeric embedding value".into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        EmbeddingVector::new(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::CallTag;
    use crate::domain::AgentRole;

    #[test]
    fn body_shape() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("f.png");
        fs::write(&img, b"\x89PNG").unwrap();
        let request = ChatRequest {
            model_name: "qwen".into(),
            system_prompt: "sys".into(),
            user_prompt: "user".into(),
            image_refs: vec![img],
            temperature: 0.2,
            max_tokens: 64,
            format_hint: Some(STRUCTURED.into()),
            tag: CallTag {
                role: AgentRole::Mpa,
                t: 1,
                attempt: 0,
            },
        };
        let body = OllamaBackend::request_body(&request).unwrap();
        assert_eq!(body["model"], "qwen");
        assert_eq!(body["stream"], false);
        assert_eq!(body["format"], "json");
        assert_eq!(body["options"]["num_predict"], 64);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["images"][0], "iVBORw==");
        assert!(body.get("tag").is_none());
    }

    #[test]
    fn permits_bound_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let permits = Permits::new(2);
        let active = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _p = permits.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(5));
                    active.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
