//! Batch execution of the closed loop over a corpus.
//!
//! Every dialogue gets its own trace file. A dialogue that fails is
//! recorded in the run manifest and the batch moves on; only setup problems
//! (configuration, corpus, memory) abort the run.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::Utc;
use sha2::{Digest, Sha256};

use crate::agents::{Agents, TemplateSet};
use crate::backend::{
    embedder_for_id, scripted_from_trace, BackendError, ChatBackend, Embedder, OllamaBackend,
    ScriptedBackend,
};
use crate::closed_loop::{run_closed_loop, Retrieval};
use crate::config::RunConfig;
use crate::domain::{DialogueContext, LabelRegistry};
use crate::ingest::{load_corpus, Corpus, IngestError, LoadOptions};
use crate::memory::{MemoryError, MemoryIndex};
use crate::trace::{
    file_stem, DialogueStatus, DialogueSummary, RunManifest, RunTrace, TraceError, DIALOGUE_DIR,
    MANIFEST_FILE, TRACE_SCHEMA_VERSION,
};

/// Where replies come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    /// The live Ollama-compatible server of the config.
    Ollama,
    /// A script file of canned replies, shared by all dialogues in order.
    Scripted(PathBuf),
    /// The recorded replies of an earlier run, per dialogue.
    Replay(PathBuf),
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "ollama" {
            return Ok(BackendSpec::Ollama);
        }
        if let Some(p) = s.strip_prefix("scripted:").filter(|p| !p.is_empty()) {
            return Ok(BackendSpec::Scripted(PathBuf::from(p)));
        }
        if let Some(p) = s.strip_prefix("replay:").filter(|p| !p.is_empty()) {
            return Ok(BackendSpec::Replay(PathBuf::from(p)));
        }
        Err(format!(
            "unknown backend `{s}` (expected ollama, scripted:PATH or replay:RUN_DIR)"
        ))
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Ollama => f.write_str("ollama"),
            BackendSpec::Scripted(p) => write!(f, "scripted:{}", p.display()),
            BackendSpec::Replay(p) => write!(f, "replay:{}", p.display()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] IngestError),
    #[error("memory: {0}")]
    Memory(#[from] MemoryError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("trace: {0}")]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub config: RunConfig,
    pub backend: BackendSpec,
    pub offset: usize,
    pub limit: Option<usize>,
    /// Defaults to a digest of the configuration and the dialogue ids.
    pub run_id: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
}

impl RunSummary {
    pub fn count(&self, status: DialogueStatus) -> usize {
        self.manifest.dialogues.iter().filter(|d| d.status == status).count()
    }

    pub fn all_ok(&self) -> bool {
        self.count(DialogueStatus::Ok) == self.manifest.dialogues.len()
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "run {}: {} dialogues, {} ok, {} degraded, {} failed -> {}",
            self.manifest.run_id,
            self.manifest.dialogues.len(),
            self.count(DialogueStatus::Ok),
            self.count(DialogueStatus::Degraded),
            self.count(DialogueStatus::Failed),
            self.run_dir.display()
        )
    }
}

/// The built-in label sets plus those of the configured file.
pub fn label_registry(config: &RunConfig) -> Result<LabelRegistry, RunError> {
    let mut registry = LabelRegistry::default();
    if let Some(path) = &config.run.label_sets {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let extra = LabelRegistry::from_toml(&text)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        for id in extra.ids().map(str::to_string).collect::<Vec<_>>() {
            registry.insert(extra.get(&id).expect("listed id").clone());
        }
    }
    Ok(registry)
}

pub fn templates(config: &RunConfig) -> Result<TemplateSet, RunError> {
    match &config.run.templates {
        Some(dir) => TemplateSet::load_dir(dir).map_err(|e| RunError::Config(e.to_string())),
        None => Ok(TemplateSet::default()),
    }
}

/// Loads the corpus of a run with the configured label sets.
pub fn load_run_corpus(path: &Path, config: &RunConfig) -> Result<Corpus, RunError> {
    let options = LoadOptions {
        allow_missing_frames: config.run.allow_missing_frames,
        registry: label_registry(config)?,
    };
    Ok(load_corpus(path, &options)?)
}

fn default_run_id(config: &RunConfig, corpus: &Corpus, dialogues: &[DialogueContext]) -> String {
    let ids: Vec<&str> = dialogues.iter().map(|d| d.dialogue_id.as_str()).collect();
    let key = serde_json::json!({
        "loop": config.loop_config,
        "agents": config.agent_settings(),
        "dataset": corpus.manifest.dataset_id,
        "split": corpus.manifest.split,
        "dialogues": ids,
    });
    let digest = Sha256::digest(key.to_string().as_bytes());
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("run-{hex}")
}

struct Memory {
    index: MemoryIndex,
    embedder: Box<dyn Embedder>,
}

fn load_memory(config: &RunConfig, dialogues: &[DialogueContext]) -> Result<Option<Memory>, RunError> {
    if config.loop_config.retrieval_top_k == 0 {
        return Ok(None);
    }
    let dir = config.run.memory.as_ref().ok_or_else(|| {
        RunError::Config(format!(
            "retrieval_top_k = {} needs a memory index (--memory or run.memory), or set --top-k 0",
            config.loop_config.retrieval_top_k
        ))
    })?;
    let index = MemoryIndex::load(dir)?;
    let leaked: Vec<&str> = dialogues
        .iter()
        .map(|d| d.dialogue_id.as_str())
        .filter(|id| index.exemplars().iter().any(|e| e.source_id == *id))
        .collect();
    if !leaked.is_empty() {
        return Err(RunError::Config(format!(
            "memory index {} contains {} dialogue(s) of the evaluated corpus (e.g. `{}`); build it from a disjoint split",
            dir.display(),
            leaked.len(),
            leaked[0]
        )));
    }
    let embedder = embedder_for_id(index.embedder_id(), &config.backend.ollama())?;
    Ok(Some(Memory { index, embedder }))
}

enum Backends {
    Shared(Box<dyn ChatBackend>),
    Replay(PathBuf),
}

/// Runs the loop over a corpus slice and writes the run directory.
pub fn run_corpus(options: &RunOptions) -> Result<RunSummary, RunError> {
    let config = &options.config;
    config.validate().map_err(|e| RunError::Config(e.to_string()))?;
    let corpus = load_run_corpus(&options.corpus, config)?;
    for w in &corpus.warnings {
        log::warn!("{w}");
    }
    let registry = label_registry(config)?;
    let dialogues: Vec<DialogueContext> = corpus
        .dialogues
        .iter()
        .skip(options.offset)
        .take(options.limit.unwrap_or(usize::MAX))
        .cloned()
        .collect();
    let agents = Agents::new(templates(config)?, config.agent_settings());
    let memory = load_memory(config, &dialogues)?;

    let (backends, parallel) = match &options.backend {
        BackendSpec::Ollama => (
            Backends::Shared(Box::new(OllamaBackend::new(config.backend.ollama())?)),
            config.run.parallel,
        ),
        BackendSpec::Scripted(path) => (Backends::Shared(Box::new(ScriptedBackend::from_file(path)?)), 1),
        BackendSpec::Replay(dir) => {
            if !dir.join(DIALOGUE_DIR).is_dir() {
                return Err(RunError::Config(format!("{} is not a run directory", dir.display())));
            }
            (Backends::Replay(dir.clone()), 1)
        }
    };
    if parallel > 1 {
        log::info!("running up to {parallel} dialogues concurrently");
    }

    let run_id = options
        .run_id
        .clone()
        .unwrap_or_else(|| default_run_id(config, &corpus, &dialogues));
    let mut manifest = RunManifest {
        schema_version: TRACE_SCHEMA_VERSION,
        run_id,
        started_at: Utc::now(),
        finished_at: None,
        corpus: corpus.manifest_path.display().to_string(),
        backend: options.backend.to_string(),
        config: serde_json::to_value(config).expect("config serializes"),
        dialogues: Vec::new(),
    };
    let trace = RunTrace::create(&options.out, &manifest)?;

    let retrieval = memory.as_ref().map(|m| Retrieval {
        index: &m.index,
        embedder: m.embedder.as_ref(),
    });
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<DialogueSummary>>> = Mutex::new(vec![None; dialogues.len()]);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(ctx) = dialogues.get(i) else { break };
        let labels = registry.get(&ctx.label_set_id).expect("corpus labels were validated");
        let summary = run_one(ctx, |writer| {
            let replay;
            let backend: &dyn ChatBackend = match &backends {
                Backends::Shared(b) => b.as_ref(),
                Backends::Replay(dir) => {
                    let path = dir.join(DIALOGUE_DIR).join(format!("{}.jsonl", file_stem(&ctx.dialogue_id)));
                    replay = scripted_from_trace(&path).map_err(|e| e.to_string())?;
                    &replay
                }
            };
            let outcome = run_closed_loop(ctx, labels, &config.loop_config, &agents, backend, retrieval, writer);
            Ok(outcome)
        }, &trace);
        results.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(summary);
    };
    std::thread::scope(|s| {
        for _ in 0..parallel.clamp(1, dialogues.len().max(1)) {
            s.spawn(worker);
        }
    });

    manifest.dialogues = results
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|s| s.expect("every dialogue ran"))
        .collect();
    manifest.finished_at = Some(Utc::now());
    trace.write_manifest(&manifest)?;
    let summary = RunSummary {
        run_dir: options.out.clone(),
        manifest,
    };
    log::info!("{summary}");
    Ok(summary)
}

type Outcome = Result<crate::domain::RunHistory, crate::closed_loop::LoopFailure>;

fn run_one(
    ctx: &DialogueContext,
    run: impl FnOnce(&mut crate::trace::DialogueTraceWriter) -> Result<Outcome, String>,
    trace: &RunTrace,
) -> DialogueSummary {
    let file = format!("{DIALOGUE_DIR}/{}.jsonl", file_stem(&ctx.dialogue_id));
    let failed = |error: String| {
        log::error!("{}: {error}", ctx.dialogue_id);
        DialogueSummary {
            dialogue_id: ctx.dialogue_id.clone(),
            file: file.clone(),
            status: DialogueStatus::Failed,
            records: 0,
            selected_t: None,
            error: Some(error),
        }
    };
    let mut writer = match trace.dialogue(&ctx.dialogue_id) {
        Ok(w) => w,
        Err(e) => return failed(e.to_string()),
    };
    match run(&mut writer) {
        Err(e) => failed(e),
        Ok(Ok(history)) => DialogueSummary {
            dialogue_id: ctx.dialogue_id.clone(),
            file,
            status: DialogueStatus::Ok,
            records: history.records.len(),
            selected_t: Some(history.selected_t),
            error: None,
        },
        Ok(Err(failure)) => match failure.partial {
            Some(history) => {
                log::warn!("{}: {}", ctx.dialogue_id, failure.error);
                DialogueSummary {
                    dialogue_id: ctx.dialogue_id.clone(),
                    file,
                    status: DialogueStatus::Degraded,
                    records: history.records.len(),
                    selected_t: Some(history.selected_t),
                    error: Some(failure.error.to_string()),
                }
            }
            None => failed(failure.error.to_string()),
        },
    }
}

/// Reads the manifest of an earlier run.
pub fn read_manifest(run_dir: &Path) -> Result<RunManifest, RunError> {
    let path = run_dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
}
