//! Append-only JSONL traces of closed-loop runs.
//!
//! A run directory holds `run.json` (the run manifest) and one
//! `dialogues/<dialogue_id>.jsonl` file per dialogue. Every line of a
//! dialogue file is one [`TraceEvent`]. Events are written in pipeline
//! order: for each iteration `t` the four stage outputs, then the audit;
//! a final `selection` event closes the dialogue. Field names are stable
//! and versioned by `schema_version`.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{
    AgentRole, AuditFeedback, CandidateResponse, EmotionForecast, IterationRecord,
    PerceptionEvidence, PragmaticPlan, RunHistory, StageId,
};

pub const TRACE_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "run.json";
pub const DIALOGUE_DIR: &str = "dialogues";

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: corrupt trace line: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: unsupported trace schema_version {found}")]
    Version { path: PathBuf, found: u32 },
    #[error("{0}")]
    Inconsistent(String),
}

impl TraceError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        TraceError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    StageOutput,
    Audit,
    Selection,
    Error,
}

/// How a stage output came to exist in an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Produced by an agent call in this iteration.
    Generated,
    /// Copied unchanged from the previous iteration.
    Retained,
    /// The stage is disabled for the run.
    Ablated,
}

/// A prompt as sent to the backend, kept when prompt capture is on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapturedPrompt {
    pub system: String,
    pub user: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutputPayload {
    pub stage: StageId,
    pub origin: Origin,
    /// The typed stage output; `null` when ablated.
    pub value: Value,
    /// Every raw reply of the stage call, re-asks included.
    #[serde(default)]
    pub replies: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompts: Vec<CapturedPrompt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditPayload {
    pub feedback: AuditFeedback,
    pub regenerated_from: Option<StageId>,
    #[serde(default)]
    pub replies: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompts: Vec<CapturedPrompt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPayload {
    pub selected_t: u32,
    pub final_response: String,
    pub selection_enabled: bool,
    pub predicted_emotion: Option<String>,
    pub gold_emotion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_response: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub role: Option<AgentRole>,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replies: Vec<String>,
}

/// Typed body of a trace event.
#[derive(Debug, Clone, PartialEq)]
pub enum EventBody {
    StageOutput(StageOutputPayload),
    Audit(AuditPayload),
    Selection(SelectionPayload),
    Error(ErrorPayload),
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::StageOutput(_) => EventKind::StageOutput,
            EventBody::Audit(_) => EventKind::Audit,
            EventBody::Selection(_) => EventKind::Selection,
            EventBody::Error(_) => EventKind::Error,
        }
    }

    fn to_value(&self) -> Value {
        let v = match self {
            EventBody::StageOutput(p) => serde_json::to_value(p),
            EventBody::Audit(p) => serde_json::to_value(p),
            EventBody::Selection(p) => serde_json::to_value(p),
            EventBody::Error(p) => serde_json::to_value(p),
        };
        v.expect("trace payloads serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub schema_version: u32,
    pub run_id: String,
    pub dialogue_id: String,
    pub kind: EventKind,
    pub t: u32,
    pub payload: Value,
    pub timestamp: DateTime<Utc>,
}

impl TraceEvent {
    pub fn new(run_id: &str, dialogue_id: &str, t: u32, body: &EventBody) -> Self {
        Self {
            schema_version: TRACE_SCHEMA_VERSION,
            run_id: run_id.to_string(),
            dialogue_id: dialogue_id.to_string(),
            kind: body.kind(),
            t,
            payload: body.to_value(),
            timestamp: Utc::now(),
        }
    }

    /// Decodes the payload according to `kind`.
    pub fn body(&self) -> Result<EventBody, serde_json::Error> {
        fn de<T: DeserializeOwned>(v: &Value) -> Result<T, serde_json::Error> {
            serde_json::from_value(v.clone())
        }
        Ok(match self.kind {
            EventKind::StageOutput => EventBody::StageOutput(de(&self.payload)?),
            EventKind::Audit => EventBody::Audit(de(&self.payload)?),
            EventKind::Selection => EventBody::Selection(de(&self.payload)?),
            EventKind::Error => EventBody::Error(de(&self.payload)?),
        })
    }
}

/// Outcome of one dialogue as recorded in the run manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogueStatus {
    Ok,
    /// A stage failed after at least one complete iteration; selection ran
    /// over the partial history.
    Degraded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueSummary {
    pub dialogue_id: String,
    pub file: String,
    pub status: DialogueStatus,
    pub records: usize,
    pub selected_t: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub started_at: DateTime<Utc>,
    #[serde(default)]
    pub finished_at: Option<DateTime<Utc>>,
    pub corpus: String,
    pub backend: String,
    /// The effective run configuration.
    pub config: Value,
    #[serde(default)]
    pub dialogues: Vec<DialogueSummary>,
}

/// Maps a dialogue id onto a portable file stem.
pub fn file_stem(dialogue_id: &str) -> String {
    dialogue_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writer for a whole run directory.
#[derive(Debug)]
pub struct RunTrace {
    dir: PathBuf,
    run_id: String,
    stems: Mutex<HashSet<String>>,
}

impl RunTrace {
    /// Creates the directory layout and writes the initial manifest.
    pub fn create(dir: impl Into<PathBuf>, manifest: &RunManifest) -> Result<Self, TraceError> {
        let dir = dir.into();
        let dialogues = dir.join(DIALOGUE_DIR);
        fs::create_dir_all(&dialogues).map_err(|e| TraceError::io(&dialogues, e))?;
        let trace = Self {
            run_id: manifest.run_id.clone(),
            dir,
            stems: Mutex::new(HashSet::new()),
        };
        trace.write_manifest(manifest)?;
        Ok(trace)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), TraceError> {
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| TraceError::io(&path, e))
    }

    /// Opens (truncating) the file of one dialogue. Each dialogue has a
    /// single writer.
    pub fn dialogue(&self, dialogue_id: &str) -> Result<DialogueTraceWriter, TraceError> {
        let stem = file_stem(dialogue_id);
        {
            let mut stems = self.stems.lock().unwrap_or_else(|e| e.into_inner());
            if !stems.insert(stem.clone()) {
                return Err(TraceError::Inconsistent(format!(
                    "dialogue id `{dialogue_id}` collides with another trace file `{stem}.jsonl`"
                )));
            }
        }
        let path = self.dir.join(DIALOGUE_DIR).join(format!("{stem}.jsonl"));
        DialogueTraceWriter::create(path, &self.run_id, dialogue_id)
    }
}

/// Appends events of one dialogue, one JSON document per line.
#[derive(Debug)]
pub struct DialogueTraceWriter {
    path: PathBuf,
    file: File,
    run_id: String,
    dialogue_id: String,
}

impl DialogueTraceWriter {
    pub fn create(path: PathBuf, run_id: &str, dialogue_id: &str) -> Result<Self, TraceError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| TraceError::io(&path, e))?;
        Ok(Self {
            path,
            file,
            run_id: run_id.to_string(),
            dialogue_id: dialogue_id.to_string(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, t: u32, body: &EventBody) -> Result<(), TraceError> {
        let event = TraceEvent::new(&self.run_id, &self.dialogue_id, t, body);
        self.append_event(&event)
    }

    pub fn append_event(&mut self, event: &TraceEvent) -> Result<(), TraceError> {
        let mut line = serde_json::to_string(event).expect("trace events serialize");
        line.push('\n');
        // one write call per line keeps lines whole
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| TraceError::io(&self.path, e))
    }
}

/// Reads the events of one dialogue file. In lenient mode corrupt lines are
/// skipped and reported as warnings.
pub fn read_events(path: &Path, lenient: bool) -> Result<(Vec<TraceEvent>, Vec<String>), TraceError> {
    let file = File::open(path).map_err(|e| TraceError::io(path, e))?;
    let mut events = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TraceError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<TraceEvent>(&line)
            .map_err(|e| e.to_string())
            .and_then(|ev| {
                if ev.schema_version > TRACE_SCHEMA_VERSION {
                    Err(format!("unsupported schema_version {}", ev.schema_version))
                } else {
                    ev.body().map(|_| ev).map_err(|e| e.to_string())
                }
            });
        match parsed {
            Ok(ev) => events.push(ev),
            Err(message) if lenient => {
                let w = format!("{}:{}: skipped corrupt line: {message}", path.display(), i + 1);
                log::warn!("{w}");
                warnings.push(w);
            }
            Err(message) => {
                return Err(TraceError::Corrupt {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message,
                })
            }
        }
    }
    Ok((events, warnings))
}

/// Events of one dialogue and the history reconstructed from them.
#[derive(Debug, Clone)]
pub struct DialogueTrace {
    pub dialogue_id: String,
    pub path: PathBuf,
    pub events: Vec<TraceEvent>,
    /// Present when the dialogue reached selection.
    pub history: Option<RunHistory>,
    pub selection: Option<SelectionPayload>,
    pub errors: Vec<ErrorPayload>,
}

#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: Option<RunManifest>,
    pub dialogues: Vec<DialogueTrace>,
    pub warnings: Vec<String>,
}

impl LoadedRun {
    pub fn histories(&self) -> Vec<RunHistory> {
        self.dialogues.iter().filter_map(|d| d.history.clone()).collect()
    }

    pub fn dialogue(&self, dialogue_id: &str) -> Option<&DialogueTrace> {
        self.dialogues.iter().find(|d| d.dialogue_id == dialogue_id)
    }
}

/// Loads every dialogue trace of a run directory, sorted by file name.
pub fn load_run(dir: &Path, lenient: bool) -> Result<LoadedRun, TraceError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| TraceError::io(&manifest_path, e))?;
        let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| TraceError::Corrupt {
            path: manifest_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if manifest.schema_version > TRACE_SCHEMA_VERSION {
            return Err(TraceError::Version {
                path: manifest_path,
                found: manifest.schema_version,
            });
        }
        Some(manifest)
    } else {
        None
    };
    let dialogue_dir = dir.join(DIALOGUE_DIR);
    let mut paths: Vec<PathBuf> = match fs::read_dir(&dialogue_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(TraceError::io(&dialogue_dir, e)),
    };
    paths.sort();
    let mut dialogues = Vec::new();
    let mut warnings = Vec::new();
    for path in paths {
        let (events, mut w) = read_events(&path, lenient)?;
        warnings.append(&mut w);
        match reconstruct(&path, events) {
            Ok(d) => dialogues.push(d),
            Err(e) if lenient => {
                log::warn!("{e}");
                warnings.push(e.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        manifest,
        dialogues,
        warnings,
    })
}

#[derive(Default)]
struct PartialRecord {
    perception: Option<Option<PerceptionEvidence>>,
    emotion: Option<Option<EmotionForecast>>,
    plan: Option<Option<PragmaticPlan>>,
    response: Option<CandidateResponse>,
    audit: Option<AuditPayload>,
}

fn typed<T: DeserializeOwned>(p: &StageOutputPayload) -> Result<Option<T>, serde_json::Error> {
    match p.origin {
        Origin::Ablated => Ok(None),
        _ => serde_json::from_value(p.value.clone()).map(Some),
    }
}

/// Rebuilds the [`RunHistory`] of one dialogue from its events.
pub fn reconstruct(path: &Path, events: Vec<TraceEvent>) -> Result<DialogueTrace, TraceError> {
    let bad = |message: String| TraceError::Inconsistent(format!("{}: {message}", path.display()));
    let dialogue_id = events
        .first()
        .map(|e| e.dialogue_id.clone())
        .ok_or_else(|| bad("no events".into()))?;
    let mut partial: BTreeMap<u32, PartialRecord> = BTreeMap::new();
    let mut selection = None;
    let mut errors = Vec::new();
    for ev in &events {
        if ev.dialogue_id != dialogue_id {
            return Err(bad(format!(
                "event for `{}` in the trace of `{dialogue_id}`",
                ev.dialogue_id
            )));
        }
        let body = ev.body().map_err(|e| bad(e.to_string()))?;
        match body {
            EventBody::StageOutput(p) => {
                let slot = partial.entry(ev.t).or_default();
                let decode = |e: serde_json::Error| bad(format!("t={} {}: {e}", ev.t, p.stage));
                match p.stage {
                    StageId::Perception => slot.perception = Some(typed(&p).map_err(decode)?),
                    StageId::Emotion => slot.emotion = Some(typed(&p).map_err(decode)?),
                    StageId::Strategy => slot.plan = Some(typed(&p).map_err(decode)?),
                    StageId::Response => {
                        slot.response = typed(&p).map_err(decode)?;
                        if slot.response.is_none() {
                            return Err(bad(format!("t={}: response stage has no value", ev.t)));
                        }
                    }
                }
            }
            EventBody::Audit(p) => partial.entry(ev.t).or_default().audit = Some(p),
            EventBody::Selection(p) => selection = Some(p),
            EventBody::Error(p) => errors.push(p),
        }
    }
    let mut records = Vec::new();
    for (t, rec) in partial {
        let (Some(perception), Some(emotion), Some(plan), Some(response), Some(audit)) =
            (rec.perception, rec.emotion, rec.plan, rec.response, rec.audit)
        else {
            // an iteration cut short by a stage error
            continue;
        };
        records.push(IterationRecord {
            t,
            perception,
            emotion,
            plan,
            response,
            feedback: audit.feedback,
            regenerated_from: audit.regenerated_from,
        });
    }
    let history = match &selection {
        Some(sel) => {
            let h = RunHistory {
                dialogue_id: dialogue_id.clone(),
                records,
                selected_t: sel.selected_t,
                final_response: sel.final_response.clone(),
            };
            h.validate().map_err(|e| bad(e.to_string()))?;
            Some(h)
        }
        None => None,
    };
    Ok(DialogueTrace {
        dialogue_id,
        path: path.to_path_buf(),
        events,
        history,
        selection,
        errors,
    })
}

/// Drops timestamps so traces can be compared across runs.
pub fn strip_timestamps(events: &[TraceEvent]) -> Vec<Value> {
    events
        .iter()
        .map(|e| {
            let mut v = serde_json::to_value(e).expect("trace events serialize");
            if let Some(obj) = v.as_object_mut() {
                obj.remove("timestamp");
            }
            v
        })
        .collect()
}
