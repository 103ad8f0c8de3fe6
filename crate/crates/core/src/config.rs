//! Run configuration: a TOML file, environment overrides, then CLI flags.
//!
//! ```toml
//! [backend]
//! base_url = "http://localhost:11434"
//! model = "qwen3.5:27b"
//! embed_model = "hashing"
//!
//! [backend.role_models]
//! gra = "qwen3.5:27b"
//!
//! [loop]
//! t_max = 2
//! retrieval_top_k = 1
//! selection_enabled = true
//! disabled_agents = []
//!
//! [run]
//! parallel = 2
//! memory = "memory/iemocap-train"
//! ```
//!
//! Relative paths in the file are resolved against the file's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::AgentSettings;
use crate::backend::OllamaConfig;
use crate::closed_loop::LoopConfig;
use crate::domain::AgentRole;

pub const ENV_BASE_URL: &str = "REFLECT_LOOP_BASE_URL";
pub const ENV_MODEL: &str = "REFLECT_LOOP_MODEL";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub base_url: String,
    pub timeout_secs: u64,
    pub retries: u32,
    pub backoff_base_ms: u64,
    pub max_connections: usize,
    pub model: String,
    pub role_models: BTreeMap<AgentRole, String>,
    /// `hashing` or the name of an embedding model served by the backend.
    pub embed_model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub parse_retries: u32,
}

impl Default for BackendSection {
    fn default() -> Self {
        let ollama = OllamaConfig::default();
        let agents = AgentSettings::default();
        Self {
            base_url: ollama.base_url,
            timeout_secs: ollama.timeout_secs,
            retries: ollama.retries,
            backoff_base_ms: ollama.backoff_base_ms,
            max_connections: ollama.max_connections,
            model: agents.model,
            role_models: agents.role_models,
            embed_model: "hashing".into(),
            temperature: agents.temperature,
            max_tokens: agents.max_tokens,
            parse_retries: agents.parse_retries,
        }
    }
}

impl BackendSection {
    pub fn ollama(&self) -> OllamaConfig {
        OllamaConfig {
            base_url: self.base_url.clone(),
            timeout_secs: self.timeout_secs,
            retries: self.retries,
            backoff_base_ms: self.backoff_base_ms,
            max_connections: self.max_connections,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Dialogues processed concurrently.
    pub parallel: usize,
    /// Directory of a saved memory index.
    pub memory: Option<PathBuf>,
    /// Directory overriding the built-in prompt templates.
    pub templates: Option<PathBuf>,
    /// TOML file with extra label sets.
    pub label_sets: Option<PathBuf>,
    pub capture_prompts: bool,
    pub allow_missing_frames: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            parallel: 2,
            memory: None,
            templates: None,
            label_sets: None,
            capture_prompts: false,
            allow_missing_frames: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendSection,
    #[serde(rename = "loop")]
    pub loop_config: LoopConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut config = Self::from_toml(&text).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut config.run.memory,
            &mut config.run.templates,
            &mut config.run.label_sets,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    /// Applies overrides from an environment lookup.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(url) = get(ENV_BASE_URL).filter(|s| !s.is_empty()) {
            self.backend.base_url = url;
        }
        if let Some(model) = get(ENV_MODEL).filter(|s| !s.is_empty()) {
            self.backend.model = model;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.loop_config
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.run.parallel == 0 {
            return Err(ConfigError::Invalid("run.parallel must be >= 1".into()));
        }
        if self.backend.max_connections == 0 {
            return Err(ConfigError::Invalid("backend.max_connections must be >= 1".into()));
        }
        if !(0.0..=2.0).contains(&self.backend.temperature) {
            return Err(ConfigError::Invalid("backend.temperature must be in [0, 2]".into()));
        }
        if self.backend.max_tokens == 0 {
            return Err(ConfigError::Invalid("backend.max_tokens must be >= 1".into()));
        }
        Ok(())
    }

    pub fn agent_settings(&self) -> AgentSettings {
        AgentSettings {
            model: self.backend.model.clone(),
            role_models: self.backend.role_models.clone(),
            temperature: self.backend.temperature,
            max_tokens: self.backend.max_tokens,
            parse_retries: self.backend.parse_retries,
            capture_prompts: self.run.capture_prompts,
        }
    }
}
