//! The closed reflection loop.
//!
//! 1. Run the four stages once (`t = 1`) and audit the result.
//! 2. While the latest audit fails and the refinement budget `t_max` is
//!    not spent: attribute the failure to the earliest failed check `k`,
//!    copy every stage before `k` unchanged, re-run stage `k` with the
//!    critique injected into its prompt, re-run every later stage without
//!    it, and audit again.
//! 3. Select the final response as the lexicographic maximum of
//!    `(c1, c2, c3, c4, -t)` over the history.
//!
//! A run therefore has between 1 and `t_max + 1` records.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::agents::{self, AgentError, Agents, Call, Correction, Staged};
use crate::backend::{ChatBackend, Embedder};
use crate::domain::{
    earliest_failure, AgentRole, AuditFeedback, AuditStatus, CandidateResponse, DialogueContext,
    EmotionForecast, EvalTuple, IterationRecord, LabelSet, PerceptionEvidence, PragmaticPlan,
    RunHistory, StageId,
};
use crate::error::InvariantError;
use crate::memory::{Exemplar, MemoryError, MemoryIndex};
use crate::trace::{
    AuditPayload, DialogueTraceWriter, ErrorPayload, EventBody, Origin, SelectionPayload,
    StageOutputPayload, TraceError,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Maximum number of refinement iterations after the initial pass.
    pub t_max: u32,
    /// Exemplars retrieved for generation; 0 disables retrieval.
    pub retrieval_top_k: usize,
    /// When false the last record is returned instead of the best one.
    pub selection_enabled: bool,
    /// Agents removed from the pipeline for ablation runs.
    pub disabled_agents: BTreeSet<AgentRole>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            t_max: 2,
            retrieval_top_k: 1,
            selection_enabled: true,
            disabled_agents: BTreeSet::new(),
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        if self.t_max < 1 {
            return Err(LoopError::Config("t_max must be >= 1".into()));
        }
        if self.disabled_agents.contains(&AgentRole::Sgrg) {
            return Err(LoopError::Config("the response generator cannot be disabled".into()));
        }
        Ok(())
    }

    pub fn stage_enabled(&self, stage: StageId) -> bool {
        !self.disabled_agents.contains(&stage.agent())
    }

    pub fn reflection_enabled(&self) -> bool {
        !self.disabled_agents.contains(&AgentRole::Gra)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoopError {
    #[error("loop configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("retrieval: {0}")]
    Memory(#[from] MemoryError),
    #[error("trace: {0}")]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Invalid(#[from] InvariantError),
}

/// An aborted run. `partial` holds the selection over the records that
/// completed before the failure, if any did.
#[derive(Debug)]
pub struct LoopFailure {
    pub error: LoopError,
    pub partial: Option<RunHistory>,
}

impl std::fmt::Display for LoopFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)?;
        if let Some(p) = &self.partial {
            write!(f, " (kept {} complete record(s))", p.records.len())?;
        }
        Ok(())
    }
}

impl std::error::Error for LoopFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Receives trace events as the loop produces them.
pub trait LoopObserver {
    fn event(&mut self, t: u32, body: &EventBody) -> Result<(), TraceError>;
}

/// Discards events.
impl LoopObserver for () {
    fn event(&mut self, _: u32, _: &EventBody) -> Result<(), TraceError> {
        Ok(())
    }
}

/// Collects events in memory.
impl LoopObserver for Vec<(u32, EventBody)> {
    fn event(&mut self, t: u32, body: &EventBody) -> Result<(), TraceError> {
        self.push((t, body.clone()));
        Ok(())
    }
}

impl LoopObserver for DialogueTraceWriter {
    fn event(&mut self, t: u32, body: &EventBody) -> Result<(), TraceError> {
        self.append(t, body)
    }
}

/// Exemplar memory plus the embedder that built it.
#[derive(Clone, Copy)]
pub struct Retrieval<'a> {
    pub index: &'a MemoryIndex,
    pub embedder: &'a dyn Embedder,
}

/// Stage outputs of one iteration, before the audit.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutputs {
    pub perception: Option<PerceptionEvidence>,
    pub emotion: Option<EmotionForecast>,
    pub plan: Option<PragmaticPlan>,
    pub response: CandidateResponse,
}

/// The stage the audit routes re-generation to, or `None` for a valid audit.
pub fn attribute(feedback: &AuditFeedback) -> Option<StageId> {
    if feedback.is_valid {
        None
    } else {
        earliest_failure(&feedback.checks)
    }
}

/// `(c1, c2, c3, c4, -t)`.
pub fn eval_tuple(feedback: &AuditFeedback, t: u32) -> EvalTuple {
    debug_assert!(t >= 1, "iterations are numbered from 1");
    EvalTuple {
        checks: feedback.checks,
        neg_t: -i64::from(t),
    }
}

/// Checks used for selection. An inconclusive audit carries no information,
/// so it inherits the checks of the closest earlier completed audit.
pub fn selection_checks(records: &[IterationRecord]) -> Vec<[bool; 4]> {
    let mut last_completed: Option<[bool; 4]> = None;
    records
        .iter()
        .map(|r| match r.feedback.status {
            AuditStatus::Inconclusive => last_completed.unwrap_or([true; 4]),
            _ => {
                last_completed = Some(r.feedback.checks);
                r.feedback.checks
            }
        })
        .collect()
}

/// Picks `t*` and its response. With selection disabled the last record wins.
///
/// Panics on an empty history.
pub fn select_final(records: &[IterationRecord], selection_enabled: bool) -> (u32, String) {
    assert!(!records.is_empty(), "selection needs at least one record");
    let chosen = if selection_enabled {
        selection_checks(records)
            .into_iter()
            .zip(records)
            .max_by_key(|(checks, r)| EvalTuple {
                checks: *checks,
                neg_t: -i64::from(r.t),
            })
            .map(|(_, r)| r)
            .expect("non-empty")
    } else {
        records.last().expect("non-empty")
    };
    (chosen.t, chosen.response.text.clone())
}

/// Everything one dialogue run needs.
pub struct LoopRunner<'a> {
    pub ctx: &'a DialogueContext,
    pub labels: &'a LabelSet,
    pub config: &'a LoopConfig,
    pub agents: &'a Agents,
    pub backend: &'a dyn ChatBackend,
    pub exemplars: Vec<Exemplar>,
}

impl<'a> LoopRunner<'a> {
    /// Validates inputs and retrieves exemplars.
    pub fn new(
        ctx: &'a DialogueContext,
        labels: &'a LabelSet,
        config: &'a LoopConfig,
        agents: &'a Agents,
        backend: &'a dyn ChatBackend,
        retrieval: Option<Retrieval<'_>>,
    ) -> Result<Self, LoopError> {
        config.validate()?;
        ctx.validate(labels)?;
        let exemplars = match (config.retrieval_top_k, retrieval) {
            (0, None) => Vec::new(),
            (0, Some(_)) => {
                return Err(LoopError::Config(
                    "a memory index was given but retrieval_top_k is 0".into(),
                ))
            }
            (_, None) => {
                return Err(LoopError::Config(
                    "retrieval_top_k > 0 requires a memory index".into(),
                ))
            }
            (k, Some(r)) => r.index.query(ctx, k, r.embedder)?,
        };
        Ok(Self {
            ctx,
            labels,
            config,
            agents,
            backend,
            exemplars,
        })
    }

    fn call<'s>(&'s self, t: u32, correction: Option<Correction<'s>>) -> Call<'s> {
        Call {
            ctx: self.ctx,
            labels: self.labels,
            backend: self.backend,
            t,
            correction,
        }
    }

    /// Runs stages from `from` onwards. Earlier stages are copied from
    /// `prev`; `critique` goes to stage `from` only.
    pub fn run_stages(
        &self,
        from: StageId,
        prev: Option<&IterationRecord>,
        critique: Option<&str>,
        t: u32,
        observer: &mut dyn LoopObserver,
    ) -> Result<StageOutputs, LoopError> {
        if from > StageId::Perception && prev.is_none() {
            return Err(LoopError::Config(format!(
                "cannot start at {from} without a previous iteration"
            )));
        }
        let previous_text = |stage: StageId| -> String {
            let p = prev.expect("checked above");
            match stage {
                StageId::Perception => agents::describe_perception(p.perception.as_ref()),
                StageId::Emotion => agents::describe_emotion(p.emotion.as_ref()),
                StageId::Strategy => agents::describe_plan(p.plan.as_ref()),
                StageId::Response => p.response.text.clone(),
            }
        };
        let correction_text: Option<String> = critique.map(|_| previous_text(from));

        let mut perception: Option<PerceptionEvidence> = None;
        let mut emotion: Option<EmotionForecast> = None;
        let mut plan: Option<PragmaticPlan> = None;

        for stage in [StageId::Perception, StageId::Emotion, StageId::Strategy] {
            let correction = match (stage == from, critique, &correction_text) {
                (true, Some(c), Some(p)) => Some(Correction {
                    previous: p.as_str(),
                    critique: c,
                }),
                _ => None,
            };
            if !self.config.stage_enabled(stage) {
                emit_stage(observer, t, stage, Origin::Ablated, serde_json::Value::Null, Vec::new(), Vec::new())?;
                continue;
            }
            if stage < from {
                let p = prev.expect("checked above");
                let value = match stage {
                    StageId::Perception => {
                        perception = p.perception.clone();
                        serde_json::to_value(&perception)
                    }
                    StageId::Emotion => {
                        emotion = p.emotion.clone();
                        serde_json::to_value(&emotion)
                    }
                    _ => {
                        plan = p.plan.clone();
                        serde_json::to_value(&plan)
                    }
                }
                .expect("stage outputs serialize");
                emit_stage(observer, t, stage, Origin::Retained, value, Vec::new(), Vec::new())?;
                continue;
            }
            let call = self.call(t, correction);
            match stage {
                StageId::Perception => {
                    let s = self.agents.run_mpa(call).map_err(|e| self.fail(observer, t, e))?;
                    perception = Some(emit_generated(observer, t, stage, s)?);
                }
                StageId::Emotion => {
                    let s = self
                        .agents
                        .run_caef(call, perception.as_ref())
                        .map_err(|e| self.fail(observer, t, e))?;
                    emotion = Some(emit_generated(observer, t, stage, s)?);
                }
                _ => {
                    let s = self
                        .agents
                        .run_psp(call, perception.as_ref(), emotion.as_ref())
                        .map_err(|e| self.fail(observer, t, e))?;
                    plan = Some(emit_generated(observer, t, stage, s)?);
                }
            }
        }

        let correction = match (from == StageId::Response, critique, &correction_text) {
            (true, Some(c), Some(p)) => Some(Correction {
                previous: p.as_str(),
                critique: c,
            }),
            _ => None,
        };
        let call = self.call(t, correction);
        let s = self
            .agents
            .run_sgrg(call, perception.as_ref(), emotion.as_ref(), plan.as_ref(), &self.exemplars)
            .map_err(|e| self.fail(observer, t, e))?;
        let response = emit_generated(observer, t, StageId::Response, s)?;
        Ok(StageOutputs {
            perception,
            emotion,
            plan,
            response,
        })
    }

    /// Re-runs the pipeline from the stage `k` blamed by `prev`'s audit.
    pub fn rerun_from(
        &self,
        k: StageId,
        prev: &IterationRecord,
        critique: &str,
        observer: &mut dyn LoopObserver,
    ) -> Result<StageOutputs, LoopError> {
        if prev.feedback.attributed_stage != Some(k) {
            return Err(LoopError::Config(format!(
                "re-run from {k} but the audit of t={} blames {:?}",
                prev.t, prev.feedback.attributed_stage
            )));
        }
        self.run_stages(k, Some(prev), Some(critique), prev.t + 1, observer)
    }

    /// Audits the outputs of iteration `t`. Checks of disabled stages pass.
    pub fn audit(
        &self,
        outputs: &StageOutputs,
        t: u32,
        regenerated_from: Option<StageId>,
        observer: &mut dyn LoopObserver,
    ) -> Result<AuditFeedback, LoopError> {
        let staged = if self.config.reflection_enabled() {
            let s = self
                .agents
                .run_gra(
                    self.call(t, None),
                    outputs.perception.as_ref(),
                    outputs.emotion.as_ref(),
                    outputs.plan.as_ref(),
                    &outputs.response,
                )
                .map_err(|e| self.fail(observer, t, e))?;
            Staged {
                value: self.force_disabled_checks(s.value),
                ..s
            }
        } else {
            Staged {
                value: AuditFeedback::skipped(),
                replies: Vec::new(),
                prompts: Vec::new(),
            }
        };
        observer.event(
            t,
            &EventBody::Audit(AuditPayload {
                feedback: staged.value.clone(),
                regenerated_from,
                replies: staged.replies,
                prompts: staged.prompts,
            }),
        )?;
        Ok(staged.value)
    }

    fn force_disabled_checks(&self, feedback: AuditFeedback) -> AuditFeedback {
        let mut checks = feedback.checks;
        for stage in StageId::ALL {
            if !self.config.stage_enabled(stage) {
                checks[stage.index()] = true;
            }
        }
        if checks == feedback.checks {
            return feedback;
        }
        AuditFeedback {
            status: feedback.status,
            ..AuditFeedback::from_checks(checks, feedback.critique, feedback.raw_text)
        }
    }

    fn fail(&self, observer: &mut dyn LoopObserver, t: u32, error: AgentError) -> LoopError {
        let body = EventBody::Error(ErrorPayload {
            role: error.role(),
            message: error.to_string(),
            replies: error.replies().to_vec(),
        });
        if let Err(e) = observer.event(t, &body) {
            log::error!("could not record error event: {e}");
        }
        LoopError::Agent(error)
    }

    /// Runs the whole loop and emits the selection event.
    pub fn run(&self, observer: &mut dyn LoopObserver) -> Result<RunHistory, LoopFailure> {
        let mut records: Vec<IterationRecord> = Vec::new();
        let outcome = self.iterate(&mut records, observer);
        if records.is_empty() {
            return Err(LoopFailure {
                error: outcome.expect_err("a successful run has records"),
                partial: None,
            });
        }
        let (selected_t, final_response) = select_final(&records, self.config.selection_enabled);
        let history = RunHistory {
            dialogue_id: self.ctx.dialogue_id.clone(),
            records,
            selected_t,
            final_response,
        };
        let selection = EventBody::Selection(SelectionPayload {
            selected_t,
            final_response: history.final_response.clone(),
            selection_enabled: self.config.selection_enabled,
            predicted_emotion: history.selected().emotion.as_ref().map(|e| e.label.clone()),
            gold_emotion: self.ctx.gold_emotion.clone(),
            gold_response: self.ctx.gold_response.clone(),
        });
        let last_t = history.records.len() as u32;
        let written = observer.event(last_t, &selection);
        let error = match (outcome, written) {
            (Ok(()), Ok(())) => return Ok(history),
            (Err(e), _) => e,
            (Ok(()), Err(e)) => LoopError::Trace(e),
        };
        Err(LoopFailure {
            error,
            partial: Some(history),
        })
    }

    fn iterate(
        &self,
        records: &mut Vec<IterationRecord>,
        observer: &mut dyn LoopObserver,
    ) -> Result<(), LoopError> {
        let outputs = self.run_stages(StageId::Perception, None, None, 1, observer)?;
        let feedback = self.audit(&outputs, 1, None, observer)?;
        records.push(record(1, outputs, feedback, None));

        for _ in 0..self.config.t_max {
            let prev = records.last().expect("initial record");
            let Some(k) = attribute(&prev.feedback) else {
                break;
            };
            let critique = prev.feedback.critique.clone();
            let outputs = self.rerun_from(k, prev, &critique, observer)?;
            let t = prev.t + 1;
            let feedback = self.audit(&outputs, t, Some(k), observer)?;
            records.push(record(t, outputs, feedback, Some(k)));
        }
        Ok(())
    }
}

fn record(
    t: u32,
    outputs: StageOutputs,
    feedback: AuditFeedback,
    regenerated_from: Option<StageId>,
) -> IterationRecord {
    IterationRecord {
        t,
        perception: outputs.perception,
        emotion: outputs.emotion,
        plan: outputs.plan,
        response: outputs.response,
        feedback,
        regenerated_from,
    }
}

fn emit_stage(
    observer: &mut dyn LoopObserver,
    t: u32,
    stage: StageId,
    origin: Origin,
    value: serde_json::Value,
    replies: Vec<String>,
    prompts: Vec<crate::trace::CapturedPrompt>,
) -> Result<(), TraceError> {
    observer.event(
        t,
        &EventBody::StageOutput(StageOutputPayload {
            stage,
            origin,
            value,
            replies,
            prompts,
        }),
    )
}

fn emit_generated<T: Serialize>(
    observer: &mut dyn LoopObserver,
    t: u32,
    stage: StageId,
    staged: Staged<T>,
) -> Result<T, TraceError> {
    let value = serde_json::to_value(&staged.value).expect("stage outputs serialize");
    emit_stage(observer, t, stage, Origin::Generated, value, staged.replies, staged.prompts)?;
    Ok(staged.value)
}

/// Convenience wrapper: build a [`LoopRunner`] and run it.
#[allow(clippy::too_many_arguments)]
pub fn run_closed_loop(
    ctx: &DialogueContext,
    labels: &LabelSet,
    config: &LoopConfig,
    agents: &Agents,
    backend: &dyn ChatBackend,
    retrieval: Option<Retrieval<'_>>,
    observer: &mut dyn LoopObserver,
) -> Result<RunHistory, LoopFailure> {
    let runner = LoopRunner::new(ctx, labels, config, agents, backend, retrieval).map_err(|error| {
        let body = EventBody::Error(ErrorPayload {
            role: None,
            message: error.to_string(),
            replies: Vec::new(),
        });
        if let Err(e) = observer.event(1, &body) {
            log::error!("could not record error event: {e}");
        }
        LoopFailure { error, partial: None }
    })?;
    runner.run(observer)
}
