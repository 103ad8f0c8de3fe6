//! The five agents: prompt construction, model call, reply parsing.
//!
//! Each agent is a stateless function of its inputs and a [`ChatBackend`].
//! Replies that do not parse are re-asked up to
//! [`AgentSettings::parse_retries`] times with a format reminder. The
//! reflection agent never fails on a bad reply: it returns an inconclusive
//! all-pass audit instead.

mod parse;
mod prompt;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, CallTag, ChatBackend, ChatRequest, STRUCTURED};
use crate::domain::{
    AgentRole, AuditFeedback, CandidateResponse, DialogueContext, EmotionForecast, LabelSet,
    PerceptionEvidence, PragmaticPlan, StageId,
};
use crate::memory::Exemplar;
use crate::trace::CapturedPrompt;

pub use parse::{first_object, parse_structured, ParseOutcome};
pub use prompt::{placeholders, render, PromptTemplate, TemplateError, TemplateSet, Vars};

use parse::{check_value, string_field, string_list};

/// Text shown in place of the output of an ablated stage.
pub const DISABLED_STAGE: &str = "(not available: this stage is disabled)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentSettings {
    /// Model used by every agent without an entry in `role_models`.
    pub model: String,
    pub role_models: BTreeMap<AgentRole, String>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Re-asks after a reply that does not parse.
    pub parse_retries: u32,
    /// Keep rendered prompts for the trace.
    pub capture_prompts: bool,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            model: "qwen3.5:27b".into(),
            role_models: BTreeMap::new(),
            temperature: crate::backend::DEFAULT_TEMPERATURE,
            max_tokens: crate::backend::DEFAULT_MAX_TOKENS,
            parse_retries: 2,
            capture_prompts: false,
        }
    }
}

impl AgentSettings {
    pub fn model_for(&self, role: AgentRole) -> &str {
        self.role_models.get(&role).unwrap_or(&self.model)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("{role}: {source}")]
    Backend {
        role: AgentRole,
        #[source]
        source: BackendError,
        replies: Vec<String>,
    },
    #[error("{role}: no usable reply after {attempts} attempt(s): {diagnostics}")]
    Parse {
        role: AgentRole,
        attempts: u32,
        diagnostics: String,
        replies: Vec<String>,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

impl AgentError {
    pub fn role(&self) -> Option<AgentRole> {
        match self {
            AgentError::Backend { role, .. } | AgentError::Parse { role, .. } => Some(*role),
            AgentError::Template(_) => None,
        }
    }

    /// Raw replies received before the failure.
    pub fn replies(&self) -> &[String] {
        match self {
            AgentError::Backend { replies, .. } | AgentError::Parse { replies, .. } => replies,
            AgentError::Template(_) => &[],
        }
    }

    /// The verbatim text of the last reply, if any.
    pub fn raw_text(&self) -> Option<&str> {
        self.replies().last().map(String::as_str)
    }
}

/// A stage output with every raw reply that led to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Staged<T> {
    pub value: T,
    pub replies: Vec<String>,
    pub prompts: Vec<CapturedPrompt>,
}

/// Feedback injected into the prompt of the stage being re-run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Correction<'a> {
    /// The stage's output from the previous iteration, as prompt text.
    pub previous: &'a str,
    pub critique: &'a str,
}

/// Inputs shared by every agent call of one iteration.
#[derive(Clone, Copy)]
pub struct Call<'a> {
    pub ctx: &'a DialogueContext,
    pub labels: &'a LabelSet,
    pub backend: &'a dyn ChatBackend,
    pub t: u32,
    pub correction: Option<Correction<'a>>,
}

/// Templates plus model settings.
#[derive(Debug, Clone, Default)]
pub struct Agents {
    pub templates: TemplateSet,
    pub settings: AgentSettings,
}

impl Agents {
    pub fn new(templates: TemplateSet, settings: AgentSettings) -> Self {
        Self { templates, settings }
    }

    /// Multimodal perception: evidence from the text and keyframes.
    pub fn run_mpa(&self, call: Call<'_>) -> Result<Staged<PerceptionEvidence>, AgentError> {
        let vars = self.base_vars(AgentRole::Mpa, &call)?;
        self.ask(&call, AgentRole::Mpa, vars, call.ctx.keyframes(), |reply| {
            let map = parse_structured(reply, &[]).value.ok_or("no JSON object found in the reply")?;
            let visual = string_list(&map, "visual_observations")?;
            let textual = string_list(&map, "textual_observations")?;
            PerceptionEvidence::new(visual, textual, reply).map_err(|e| e.message)
        })
    }

    /// Consistency-aware emotion forecast.
    pub fn run_caef(
        &self,
        call: Call<'_>,
        perception: Option<&PerceptionEvidence>,
    ) -> Result<Staged<EmotionForecast>, AgentError> {
        let mut vars = self.base_vars(AgentRole::Caef, &call)?;
        vars.insert("perception", describe_perception(perception));
        let labels = call.labels;
        self.ask(&call, AgentRole::Caef, vars, call.ctx.keyframes(), |reply| {
            let (raw_label, rationale) = match first_object(reply) {
                Some(map) => (
                    string_field(&map, "emotion").or_else(|_| string_field(&map, "label"))?,
                    string_field(&map, "rationale").unwrap_or_default(),
                ),
                None => (reply.trim().to_string(), String::new()),
            };
            let label = labels.normalize(&raw_label).ok_or_else(|| {
                format!(
                    "`{raw_label}` is not one of: {}",
                    labels.labels.join(", ")
                )
            })?;
            EmotionForecast::new(label, rationale, reply, labels).map_err(|e| e.message)
        })
    }

    /// Pragmatic plan: goal, stance, tactic, tone.
    pub fn run_psp(
        &self,
        call: Call<'_>,
        perception: Option<&PerceptionEvidence>,
        emotion: Option<&EmotionForecast>,
    ) -> Result<Staged<PragmaticPlan>, AgentError> {
        let mut vars = self.base_vars(AgentRole::Psp, &call)?;
        vars.insert("perception", describe_perception(perception));
        vars.insert("emotion", describe_emotion(emotion));
        self.ask(&call, AgentRole::Psp, vars, Vec::new(), |reply| {
            let out = parse_structured(reply, &["goal", "stance", "tactic", "tone"]);
            let map = out.value.ok_or(out.diagnostics)?;
            PragmaticPlan::new(
                string_field(&map, "goal")?,
                string_field(&map, "stance")?,
                string_field(&map, "tactic")?,
                string_field(&map, "tone")?,
                reply,
            )
            .map_err(|e| e.message)
        })
    }

    /// Strategy-grounded response generation.
    pub fn run_sgrg(
        &self,
        call: Call<'_>,
        perception: Option<&PerceptionEvidence>,
        emotion: Option<&EmotionForecast>,
        plan: Option<&PragmaticPlan>,
        exemplars: &[Exemplar],
    ) -> Result<Staged<CandidateResponse>, AgentError> {
        let mut vars = self.base_vars(AgentRole::Sgrg, &call)?;
        vars.insert("perception", describe_perception(perception));
        vars.insert("emotion", describe_emotion(emotion));
        vars.insert("plan", describe_plan(plan));
        vars.insert("exemplars", describe_exemplars(exemplars));
        self.ask(&call, AgentRole::Sgrg, vars, call.ctx.keyframes(), |reply| {
            let text = match first_object(reply) {
                Some(map) => string_field(&map, "response")?,
                None => reply.trim().to_string(),
            };
            CandidateResponse::new(text, reply).map_err(|e| e.message)
        })
    }

    /// Global reflection: one check per stage, validity and attribution
    /// recomputed from the checks. An unparseable audit is inconclusive.
    pub fn run_gra(
        &self,
        call: Call<'_>,
        perception: Option<&PerceptionEvidence>,
        emotion: Option<&EmotionForecast>,
        plan: Option<&PragmaticPlan>,
        response: &CandidateResponse,
    ) -> Result<Staged<AuditFeedback>, AgentError> {
        let mut vars = self.base_vars(AgentRole::Gra, &call)?;
        vars.insert("perception", describe_perception(perception));
        vars.insert("emotion", describe_emotion(emotion));
        vars.insert("plan", describe_plan(plan));
        vars.insert("response", response.text.clone());
        let outcome = self.ask(&call, AgentRole::Gra, vars, call.ctx.keyframes(), parse_audit);
        match outcome {
            Err(AgentError::Parse {
                replies,
                diagnostics,
                ..
            }) => {
                log::warn!(
                    "{}: audit at t={} inconclusive: {diagnostics}",
                    call.ctx.dialogue_id,
                    call.t
                );
                let raw = replies.last().cloned().unwrap_or_default();
                Ok(Staged {
                    value: AuditFeedback::inconclusive(raw),
                    replies,
                    prompts: Vec::new(),
                })
            }
            other => other,
        }
    }

    /// Renders the prompts of one role without calling a model.
    pub fn render_prompts(&self, role: AgentRole, vars: &Vars) -> Result<(String, String), TemplateError> {
        let template = self.templates.get(role);
        Ok((template.render_system(vars)?, template.render_user(vars)?))
    }

    fn base_vars(&self, role: AgentRole, call: &Call<'_>) -> Result<Vars, TemplateError> {
        let mut vars = Vars::new();
        vars.insert("history", describe_history(call.ctx));
        vars.insert("keyframes", describe_keyframes(call.ctx));
        vars.insert("target_speaker", call.ctx.target_speaker.clone());
        vars.insert("labels", call.labels.labels.join(", "));
        let correction = match call.correction {
            Some(c) => {
                let text = self.templates.get(role).render_correction(c.previous, c.critique)?;
                format!("\n{text}\n")
            }
            None => String::new(),
        };
        vars.insert("correction", correction);
        Ok(vars)
    }

    fn ask<T>(
        &self,
        call: &Call<'_>,
        role: AgentRole,
        vars: Vars,
        images: Vec<PathBuf>,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Staged<T>, AgentError> {
        let (system, user) = self.render_prompts(role, &vars)?;
        let mut replies = Vec::new();
        let mut prompts = Vec::new();
        let mut diagnostics = String::new();
        let attempts = self.settings.parse_retries + 1;
        for attempt in 0..attempts {
            let user_prompt = if attempt == 0 {
                user.clone()
            } else {
                format!("{user}\n\n{}", format_reminder(&diagnostics))
            };
            let request = ChatRequest {
                model_name: self.settings.model_for(role).to_string(),
                system_prompt: system.clone(),
                user_prompt,
                image_refs: images.clone(),
                temperature: self.settings.temperature,
                max_tokens: self.settings.max_tokens,
                format_hint: Some(STRUCTURED.to_string()),
                tag: CallTag {
                    role,
                    t: call.t,
                    attempt,
                },
            };
            if self.settings.capture_prompts {
                prompts.push(CapturedPrompt {
                    system: request.system_prompt.clone(),
                    user: request.user_prompt.clone(),
                    images: request.image_refs.clone(),
                });
            }
            let reply = match call.backend.chat(&request) {
                Ok(r) => r.text,
                Err(source) => {
                    return Err(AgentError::Backend {
                        role,
                        source,
                        replies,
                    })
                }
            };
            replies.push(reply);
            match parse(replies.last().expect("just pushed")) {
                Ok(value) => {
                    return Ok(Staged {
                        value,
                        replies,
                        prompts,
                    })
                }
                Err(d) => {
                    log::debug!("{role} attempt {} unusable: {d}", attempt + 1);
                    diagnostics = d;
                }
            }
        }
        Err(AgentError::Parse {
            role,
            attempts,
            diagnostics,
            replies,
        })
    }
}

fn format_reminder(diagnostics: &str) -> String {
    format!(
        "Your previous reply could not be used ({diagnostics}). \
         Reply again with exactly one JSON object that follows the format above."
    )
}

fn parse_audit(reply: &str) -> Result<AuditFeedback, String> {
    let map = first_object(reply).ok_or("no JSON object found in the reply")?;
    let checks_value = map.get("checks").ok_or("missing field `checks`")?;
    let mut checks = [None; 4];
    match checks_value {
        serde_json::Value::Array(items) => {
            if items.len() != 4 {
                return Err(format!("`checks` must have 4 entries, got {}", items.len()));
            }
            for (slot, item) in checks.iter_mut().zip(items) {
                *slot = check_value(item);
            }
        }
        serde_json::Value::Object(entries) => {
            for (key, value) in entries {
                let stage: StageId = key.parse().map_err(|_| format!("unknown check `{key}`"))?;
                checks[stage.index()] = check_value(value);
            }
        }
        other => return Err(format!("`checks` must be a list or an object, got {other}")),
    }
    let mut resolved = [true; 4];
    for (i, c) in checks.iter().enumerate() {
        resolved[i] = c.ok_or_else(|| {
            format!("check `{}` is missing or not a boolean", StageId::ALL[i])
        })?;
    }
    let critique = ["critique", "feedback", "correction"]
        .iter()
        .find_map(|k| map.get(*k).and_then(|v| v.as_str()))
        .unwrap_or_default()
        .trim()
        .to_string();
    let feedback = AuditFeedback::from_checks(resolved, critique, reply);
    if let Some(claimed) = map.get("is_valid").and_then(check_value) {
        if claimed != feedback.is_valid {
            log::debug!("audit claimed is_valid={claimed}; checks say {}", feedback.is_valid);
        }
    }
    Ok(feedback)
}

/// The conversation as numbered `SPEAKER: utterance` lines.
pub fn describe_history(ctx: &DialogueContext) -> String {
    let mut out = String::new();
    for turn in &ctx.turns {
        let _ = write!(out, "[{}] {}: {}", turn.turn_index, turn.speaker_id, turn.utterance.trim());
        match turn.keyframes.len() {
            0 => {}
            1 => out.push_str(" (1 keyframe)"),
            n => {
                let _ = write!(out, " ({n} keyframes)");
            }
        }
        out.push('\n');
    }
    out.trim_end().to_string()
}

fn describe_keyframes(ctx: &DialogueContext) -> String {
    let per_turn: Vec<String> = ctx
        .turns
        .iter()
        .filter(|t| !t.keyframes.is_empty())
        .map(|t| format!("turn {} ({})", t.turn_index, t.keyframes.len()))
        .collect();
    if per_turn.is_empty() {
        "No video keyframes are available for this conversation.".into()
    } else {
        format!(
            "The attached images are video keyframes, in turn order: {}.",
            per_turn.join(", ")
        )
    }
}

fn bullets(items: &[String]) -> String {
    if items.is_empty() {
        return "  - (none)".into();
    }
    items.iter().map(|s| format!("  - {s}")).collect::<Vec<_>>().join("\n")
}

pub fn describe_perception(p: Option<&PerceptionEvidence>) -> String {
    match p {
        Some(p) => format!(
            "Visual observations:\n{}\nTextual observations:\n{}",
            bullets(&p.visual_observations),
            bullets(&p.textual_observations)
        ),
        None => DISABLED_STAGE.into(),
    }
}

pub fn describe_emotion(e: Option<&EmotionForecast>) -> String {
    match e {
        Some(e) if e.rationale.is_empty() => e.label.clone(),
        Some(e) => format!("{} ({})", e.label, e.rationale),
        None => DISABLED_STAGE.into(),
    }
}

pub fn describe_plan(p: Option<&PragmaticPlan>) -> String {
    match p {
        Some(p) => format!(
            "goal: {}\nstance: {}\ntactic: {}\ntone: {}",
            p.goal, p.stance, p.tactic, p.tone
        ),
        None => DISABLED_STAGE.into(),
    }
}

/// Header of each exemplar block in the generation prompt.
pub const EXEMPLAR_HEADER: &str = "[Exemplar ";

pub fn describe_exemplars(exemplars: &[Exemplar]) -> String {
    if exemplars.is_empty() {
        return "(none)".into();
    }
    exemplars
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let emotion = ex.emotion.as_deref().unwrap_or("unlabeled");
            format!(
                "{EXEMPLAR_HEADER}{}] emotion: {emotion}\n{}\nReply: {}",
                i + 1,
                ex.context_text,
                ex.response_text
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}
