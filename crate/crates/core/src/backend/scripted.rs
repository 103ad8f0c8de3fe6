use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};
use crate::domain::AgentRole;
use crate::trace::{self, EventBody, Origin, TraceEvent};

#[derive(Debug)]
enum Script {
    /// One queue, consumed by every call in order.
    Sequential(VecDeque<String>),
    /// One queue per agent role.
    ByRole(BTreeMap<AgentRole, VecDeque<String>>),
    /// One queue per (role, iteration), as recorded in a trace.
    Keyed(BTreeMap<(AgentRole, u32), VecDeque<String>>),
}

#[derive(Debug)]
struct State {
    script: Script,
    calls: Vec<ChatRequest>,
}

/// Deterministic backend replaying pre-recorded replies.
///
/// Calls are totally ordered; the reply to a call depends only on the script
/// and the calls made before it. Every request is captured for inspection.
#[derive(Debug)]
pub struct ScriptedBackend {
    state: Mutex<State>,
    label: String,
}

/// On-disk script: either a flat `sequence` or per-role `replies`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptFile {
    #[serde(default = "one")]
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sequence: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub replies: BTreeMap<AgentRole, Vec<String>>,
}

fn one() -> u32 {
    1
}

impl ScriptedBackend {
    fn with(script: Script, label: String) -> Self {
        Self {
            state: Mutex::new(State {
                script,
                calls: Vec::new(),
            }),
            label,
        }
    }

    pub fn sequential<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with(
            Script::Sequential(replies.into_iter().map(Into::into).collect()),
            "scripted:sequence".into(),
        )
    }

    pub fn by_role<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = (AgentRole, Vec<S>)>,
        S: Into<String>,
    {
        let mut map: BTreeMap<AgentRole, VecDeque<String>> = BTreeMap::new();
        for (role, list) in replies {
            map.entry(role).or_default().extend(list.into_iter().map(Into::into));
        }
        Self::with(Script::ByRole(map), "scripted:by-role".into())
    }

    /// Loads a [`ScriptFile`] from JSON.
    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let file: ScriptFile = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let backend = match (file.sequence.is_empty(), file.replies.is_empty()) {
            (false, true) => Self::sequential(file.sequence),
            (true, false) => Self::by_role(file.replies),
            _ => {
                return Err(BackendError::Config(format!(
                    "{}: a script needs exactly one of `sequence` or `replies`",
                    path.display()
                )))
            }
        };
        Ok(Self {
            label: format!("scripted:{}", path.display()),
            ..backend
        })
    }

    /// Builds a replay backend from the events of one dialogue trace.
    pub fn from_trace_events(events: &[TraceEvent]) -> Result<Self, BackendError> {
        let bad = |m: String| BackendError::Config(format!("trace replay: {m}"));
        let mut keyed: BTreeMap<(AgentRole, u32), VecDeque<String>> = BTreeMap::new();
        let mut seen_first: BTreeSet<AgentRole> = BTreeSet::new();
        let mut failed_first = false;
        for ev in events {
            let body = ev.body().map_err(|e| bad(e.to_string()))?;
            let (role, replies, needs_call) = match &body {
                EventBody::StageOutput(p) => {
                    (Some(p.stage.agent()), &p.replies, p.origin == Origin::Generated)
                }
                EventBody::Audit(p) => (
                    Some(AgentRole::Gra),
                    &p.replies,
                    p.feedback.status != crate::domain::AuditStatus::Skipped,
                ),
                EventBody::Error(p) => {
                    if ev.t == 1 {
                        failed_first = true;
                    }
                    (p.role, &p.replies, false)
                }
                EventBody::Selection(_) => continue,
            };
            let Some(role) = role else { continue };
            if ev.t == 1 {
                seen_first.insert(role);
            }
            if needs_call && replies.is_empty() {
                return Err(bad(format!(
                    "t={} {role}: generated output has no recorded replies",
                    ev.t
                )));
            }
            keyed.entry((role, ev.t)).or_default().extend(replies.iter().cloned());
        }
        if !failed_first {
            if let Some(missing) = AgentRole::ALL.into_iter().find(|r| !seen_first.contains(r)) {
                return Err(bad(format!("agent role `{missing}` is absent from the trace")));
            }
        }
        let label = events
            .first()
            .map(|e| format!("replay:{}", e.dialogue_id))
            .unwrap_or_else(|| "replay".into());
        Ok(Self::with(Script::Keyed(keyed), label))
    }

    /// Every request received so far, in call order.
    pub fn calls(&self) -> Vec<ChatRequest> {
        self.lock().calls.clone()
    }

    /// Number of chat calls per role, re-asks included.
    pub fn call_counts(&self) -> BTreeMap<AgentRole, usize> {
        let mut counts = BTreeMap::new();
        for call in &self.lock().calls {
            *counts.entry(call.tag.role).or_insert(0) += 1;
        }
        counts
    }

    /// Number of first asks per role, i.e. logical agent invocations.
    pub fn invocations(&self, role: AgentRole) -> usize {
        self.lock()
            .calls
            .iter()
            .filter(|c| c.tag.role == role && c.tag.attempt == 0)
            .count()
    }

    /// Replies not yet consumed.
    pub fn remaining(&self) -> usize {
        match &self.lock().script {
            Script::Sequential(q) => q.len(),
            Script::ByRole(m) => m.values().map(VecDeque::len).sum(),
            Script::Keyed(m) => m.values().map(VecDeque::len).sum(),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Opens a dialogue trace file and builds its replay backend.
pub fn scripted_from_trace(trace_path: &Path) -> Result<ScriptedBackend, BackendError> {
    let (events, _) = trace::read_events(trace_path, false)
        .map_err(|e| BackendError::Config(e.to_string()))?;
    if events.is_empty() {
        return Err(BackendError::Config(format!(
            "{}: trace has no events",
            trace_path.display()
        )));
    }
    ScriptedBackend::from_trace_events(&events)
}

impl ChatBackend for ScriptedBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let mut state = self.lock();
        let tag = request.tag;
        let reply = match &mut state.script {
            Script::Sequential(q) => q.pop_front(),
            Script::ByRole(m) => m.get_mut(&tag.role).and_then(VecDeque::pop_front),
            Script::Keyed(m) => m.get_mut(&(tag.role, tag.t)).and_then(VecDeque::pop_front),
        };
        let Some(text) = reply else {
            return Err(BackendError::ScriptExhausted(format!(
                "no reply left for {} at t={} (call {})",
                tag.role,
                tag.t,
                state.calls.len() + 1
            )));
        };
        state.calls.push(request.clone());
        Ok(ChatResponse {
            text,
            model_name: request.model_name.clone(),
            latency_ms: 0,
        })
    }

    fn describe(&self) -> String {
        self.label.clone()
    }
}
