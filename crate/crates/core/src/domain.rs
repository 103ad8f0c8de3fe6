//! Domain values shared by every stage of the pipeline.
//!
//! Everything here is an immutable value once constructed. Constructors
//! check the invariants that downstream code relies on, so a value that
//! exists is a value that is valid.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::InvariantError;

/// One turn of the conversation history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub turn_index: u32,
    pub speaker_id: String,
    pub utterance: String,
    #[serde(default)]
    pub keyframes: Vec<PathBuf>,
}

impl Turn {
    pub fn new(
        turn_index: u32,
        speaker_id: impl Into<String>,
        utterance: impl Into<String>,
        keyframes: Vec<PathBuf>,
    ) -> Result<Self, InvariantError> {
        let turn = Self {
            turn_index,
            speaker_id: speaker_id.into(),
            utterance: utterance.into(),
            keyframes,
        };
        turn.validate()?;
        Ok(turn)
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.turn_index == 0 {
            return Err(InvariantError::new("turn", "turn_index must be >= 1"));
        }
        if self.utterance.trim().is_empty() {
            return Err(InvariantError::new(
                "turn",
                format!("utterance of turn {} is empty", self.turn_index),
            ));
        }
        Ok(())
    }
}

/// Conversation history plus keyframe references, the input of one run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueContext {
    pub dialogue_id: String,
    pub turns: Vec<Turn>,
    pub target_speaker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_emotion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_response: Option<String>,
    pub label_set_id: String,
}

impl DialogueContext {
    /// Checks structural invariants and that `gold_emotion` belongs to `labels`.
    pub fn validate(&self, labels: &LabelSet) -> Result<(), InvariantError> {
        if self.dialogue_id.trim().is_empty() {
            return Err(InvariantError::new("dialogue", "dialogue_id is empty"));
        }
        if self.turns.is_empty() {
            return Err(InvariantError::new(
                "dialogue",
                format!("{}: no turns", self.dialogue_id),
            ));
        }
        let mut last = 0;
        for turn in &self.turns {
            turn.validate()
                .map_err(|e| e.within(&self.dialogue_id))?;
            if turn.turn_index <= last {
                return Err(InvariantError::new(
                    "dialogue",
                    format!(
                        "{}: turn_index {} is not strictly increasing",
                        self.dialogue_id, turn.turn_index
                    ),
                ));
            }
            last = turn.turn_index;
        }
        if self.target_speaker.trim().is_empty() {
            return Err(InvariantError::new(
                "dialogue",
                format!("{}: target_speaker is empty", self.dialogue_id),
            ));
        }
        if labels.id != self.label_set_id {
            return Err(InvariantError::new(
                "dialogue",
                format!(
                    "{}: label set `{}` does not match `{}`",
                    self.dialogue_id, labels.id, self.label_set_id
                ),
            ));
        }
        if let Some(gold) = &self.gold_emotion {
            if !labels.contains(gold) {
                return Err(InvariantError::new(
                    "dialogue",
                    format!(
                        "{}: gold_emotion `{}` is not in label set `{}`",
                        self.dialogue_id, gold, labels.id
                    ),
                ));
            }
        }
        Ok(())
    }

    /// All keyframes of the context in turn order.
    pub fn keyframes(&self) -> Vec<PathBuf> {
        self.turns
            .iter()
            .flat_map(|t| t.keyframes.iter().cloned())
            .collect()
    }

    pub fn last_turn(&self) -> &Turn {
        self.turns.last().expect("validated context has turns")
    }
}

/// A named emotion vocabulary with a synonym map used for normalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub id: String,
    pub labels: Vec<String>,
    #[serde(default)]
    pub synonyms: BTreeMap<String, String>,
}

impl LabelSet {
    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    /// Lowercases, strips punctuation and maps synonyms onto a canonical label.
    pub fn normalize(&self, raw: &str) -> Option<String> {
        let cleaned: String = raw
            .chars()
            .filter(|c| !c.is_ascii_punctuation())
            .collect::<String>()
            .trim()
            .to_lowercase();
        if self.contains(&cleaned) {
            return Some(cleaned);
        }
        let target = self.synonyms.get(&cleaned)?;
        self.contains(target).then(|| target.clone())
    }
}

/// Label sets keyed by id. Ships with the IEMOCAP and MELD vocabularies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRegistry {
    #[serde(rename = "label_set")]
    sets: Vec<LabelSet>,
}

const BUILTIN_LABEL_SETS: &str = include_str!("../config/label_sets.toml");

impl Default for LabelRegistry {
    fn default() -> Self {
        toml::from_str(BUILTIN_LABEL_SETS).expect("built-in label sets parse")
    }
}

impl LabelRegistry {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn get(&self, id: &str) -> Option<&LabelSet> {
        self.sets.iter().find(|s| s.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.sets.iter().map(|s| s.id.as_str())
    }

    /// Adds or replaces a set.
    pub fn insert(&mut self, set: LabelSet) {
        self.sets.retain(|s| s.id != set.id);
        self.sets.push(set);
    }
}

/// Perceptual evidence extracted from the text and keyframes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceptionEvidence {
    pub visual_observations: Vec<String>,
    pub textual_observations: Vec<String>,
    pub raw_text: String,
}

impl PerceptionEvidence {
    pub fn new(
        visual_observations: Vec<String>,
        textual_observations: Vec<String>,
        raw_text: impl Into<String>,
    ) -> Result<Self, InvariantError> {
        let raw_text = raw_text.into();
        if raw_text.is_empty() {
            return Err(InvariantError::new("perception", "raw_text is empty"));
        }
        if visual_observations.is_empty() && textual_observations.is_empty() {
            return Err(InvariantError::new(
                "perception",
                "both observation lists are empty",
            ));
        }
        Ok(Self {
            visual_observations,
            textual_observations,
            raw_text,
        })
    }
}

/// The emotion the response should be guided by.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionForecast {
    pub label: String,
    pub rationale: String,
    pub raw_text: String,
}

impl EmotionForecast {
    pub fn new(
        label: impl Into<String>,
        rationale: impl Into<String>,
        raw_text: impl Into<String>,
        labels: &LabelSet,
    ) -> Result<Self, InvariantError> {
        let label = label.into();
        if !labels.contains(&label) {
            return Err(InvariantError::new(
                "emotion",
                format!("`{label}` is not in label set `{}`", labels.id),
            ));
        }
        Ok(Self {
            label,
            rationale: rationale.into(),
            raw_text: raw_text.into(),
        })
    }
}

/// Goal, stance, tactic and tone of the response. Open vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PragmaticPlan {
    pub goal: String,
    pub stance: String,
    pub tactic: String,
    pub tone: String,
    pub raw_text: String,
}

impl PragmaticPlan {
    pub fn new(
        goal: impl Into<String>,
        stance: impl Into<String>,
        tactic: impl Into<String>,
        tone: impl Into<String>,
        raw_text: impl Into<String>,
    ) -> Result<Self, InvariantError> {
        let plan = Self {
            goal: goal.into(),
            stance: stance.into(),
            tactic: tactic.into(),
            tone: tone.into(),
            raw_text: raw_text.into(),
        };
        for (name, value) in [
            ("goal", &plan.goal),
            ("stance", &plan.stance),
            ("tactic", &plan.tactic),
            ("tone", &plan.tone),
        ] {
            if value.trim().is_empty() {
                return Err(InvariantError::new("plan", format!("{name} is empty")));
            }
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateResponse {
    pub text: String,
    pub raw_text: String,
}

impl CandidateResponse {
    pub fn new(text: impl Into<String>, raw_text: impl Into<String>) -> Result<Self, InvariantError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(InvariantError::new("response", "text is empty"));
        }
        Ok(Self {
            text,
            raw_text: raw_text.into(),
        })
    }
}

/// A pipeline stage. The derived order is the architectural priority used
/// for attribution and selection.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    Perception,
    Emotion,
    Strategy,
    Response,
}

impl StageId {
    pub const ALL: [StageId; 4] = [
        StageId::Perception,
        StageId::Emotion,
        StageId::Strategy,
        StageId::Response,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StageId::Perception => "perception",
            StageId::Emotion => "emotion",
            StageId::Strategy => "strategy",
            StageId::Response => "response",
        }
    }

    /// The agent that produces this stage's output.
    pub fn agent(self) -> AgentRole {
        match self {
            StageId::Perception => AgentRole::Mpa,
            StageId::Emotion => AgentRole::Caef,
            StageId::Strategy => AgentRole::Psp,
            StageId::Response => AgentRole::Sgrg,
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageId {
    type Err = InvariantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase();
        let stage = match key.as_str() {
            "perception" | "p" | "mpa" | "a1" => StageId::Perception,
            "emotion" | "e" | "caef" | "a2" => StageId::Emotion,
            "strategy" | "s" | "psp" | "a3" => StageId::Strategy,
            "response" | "r" | "sgrg" | "a4" => StageId::Response,
            _ => return Err(InvariantError::new("stage", format!("unknown stage `{s}`"))),
        };
        Ok(stage)
    }
}

/// The five agents. Four produce stage outputs, the reflection agent audits.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Mpa,
    Caef,
    Psp,
    Sgrg,
    Gra,
}

impl AgentRole {
    pub const ALL: [AgentRole; 5] = [
        AgentRole::Mpa,
        AgentRole::Caef,
        AgentRole::Psp,
        AgentRole::Sgrg,
        AgentRole::Gra,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Mpa => "mpa",
            AgentRole::Caef => "caef",
            AgentRole::Psp => "psp",
            AgentRole::Sgrg => "sgrg",
            AgentRole::Gra => "gra",
        }
    }

    pub fn stage(self) -> Option<StageId> {
        match self {
            AgentRole::Mpa => Some(StageId::Perception),
            AgentRole::Caef => Some(StageId::Emotion),
            AgentRole::Psp => Some(StageId::Strategy),
            AgentRole::Sgrg => Some(StageId::Response),
            AgentRole::Gra => None,
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentRole {
    type Err = InvariantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentRole::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| InvariantError::new("agent", format!("unknown agent role `{s}`")))
    }
}

/// How an audit came about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditStatus {
    /// The reflection agent replied with a parseable audit.
    #[default]
    Completed,
    /// The reply could not be parsed; treated as all-pass so the loop stops.
    Inconclusive,
    /// Reflection is disabled for this run.
    Skipped,
}

/// Output of the reflection agent: one check per stage plus a critique.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFeedback {
    pub checks: [bool; 4],
    pub is_valid: bool,
    pub attributed_stage: Option<StageId>,
    pub critique: String,
    pub raw_text: String,
    #[serde(default)]
    pub status: AuditStatus,
}

impl AuditFeedback {
    /// Builds feedback from the checks alone; validity and attribution are
    /// derived, never taken from the model.
    pub fn from_checks(checks: [bool; 4], critique: impl Into<String>, raw_text: impl Into<String>) -> Self {
        Self {
            checks,
            is_valid: checks.iter().all(|c| *c),
            attributed_stage: earliest_failure(&checks),
            critique: critique.into(),
            raw_text: raw_text.into(),
            status: AuditStatus::Completed,
        }
    }

    pub fn inconclusive(raw_text: impl Into<String>) -> Self {
        Self {
            status: AuditStatus::Inconclusive,
            ..Self::from_checks([true; 4], "", raw_text)
        }
    }

    pub fn skipped() -> Self {
        Self {
            status: AuditStatus::Skipped,
            ..Self::from_checks([true; 4], "", "")
        }
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.is_valid != self.checks.iter().all(|c| *c) {
            return Err(InvariantError::new("audit", "is_valid disagrees with checks"));
        }
        if self.attributed_stage != earliest_failure(&self.checks) {
            return Err(InvariantError::new(
                "audit",
                "attributed_stage is not the earliest failed check",
            ));
        }
        Ok(())
    }
}

/// Index of the first failed check, as a stage.
pub fn earliest_failure(checks: &[bool; 4]) -> Option<StageId> {
    checks
        .iter()
        .position(|c| !c)
        .and_then(StageId::from_index)
}

/// All intermediate states of one iteration together with its audit.
///
/// Stage outputs are `None` only when that stage is ablated for the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: u32,
    pub perception: Option<PerceptionEvidence>,
    pub emotion: Option<EmotionForecast>,
    pub plan: Option<PragmaticPlan>,
    pub response: CandidateResponse,
    pub feedback: AuditFeedback,
    pub regenerated_from: Option<StageId>,
}

impl IterationRecord {
    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.t == 0 {
            return Err(InvariantError::new("record", "t must be >= 1"));
        }
        if (self.t == 1) != self.regenerated_from.is_none() {
            return Err(InvariantError::new(
                "record",
                format!("record {}: regenerated_from must be absent iff t = 1", self.t),
            ));
        }
        self.feedback.validate()
    }
}

/// The full refinement history of one dialogue and the selected response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunHistory {
    pub dialogue_id: String,
    pub records: Vec<IterationRecord>,
    pub selected_t: u32,
    pub final_response: String,
}

impl RunHistory {
    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.records.is_empty() {
            return Err(InvariantError::new("history", "no records"));
        }
        for (i, record) in self.records.iter().enumerate() {
            if record.t as usize != i + 1 {
                return Err(InvariantError::new(
                    "history",
                    format!("record {} has t = {}", i + 1, record.t),
                ));
            }
            record.validate()?;
        }
        let selected = self
            .selected_t
            .checked_sub(1)
            .and_then(|i| self.records.get(i as usize))
            .ok_or_else(|| {
                InvariantError::new(
                    "history",
                    format!("selected_t {} out of range", self.selected_t),
                )
            })?;
        if selected.response.text != self.final_response {
            return Err(InvariantError::new(
                "history",
                "final_response differs from the selected record",
            ));
        }
        Ok(())
    }

    pub fn selected(&self) -> &IterationRecord {
        &self.records[self.selected_t as usize - 1]
    }

    pub fn refinement_count(&self) -> usize {
        self.records.len() - 1
    }
}

/// Lexicographic evaluation tuple: the checks in priority order, then `-t`.
///
/// The derived ordering compares `checks` element-wise with `false < true`
/// and breaks ties with the larger `neg_t`, i.e. the earlier iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EvalTuple {
    pub checks: [bool; 4],
    pub neg_t: i64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iemocap() -> LabelSet {
        LabelRegistry::default().get("iemocap").unwrap().clone()
    }

    #[test]
    fn builtin_label_sets() {
        let reg = LabelRegistry::default();
        let ie = reg.get("iemocap").unwrap();
        assert_eq!(
            ie.labels,
            ["angry", "happy", "sad", "neutral", "excited", "frustrated"]
        );
        let meld = reg.get("meld").unwrap();
        assert_eq!(
            meld.labels,
            ["anger", "disgust", "fear", "joy", "neutral", "sadness", "surprise"]
        );
    }

    #[test]
    fn normalization() {
        let ie = iemocap();
        assert_eq!(ie.normalize("Angry."), Some("angry".into()));
        assert_eq!(ie.normalize("  FRUSTRATED!"), Some("frustrated".into()));
        assert_eq!(ie.normalize("anger"), Some("angry".into()));
        assert_eq!(ie.normalize("melancholy"), None);
    }

    #[test]
    fn audit_feedback_derives_validity_and_attribution() {
        let all = AuditFeedback::from_checks([true; 4], "", "x");
        assert!(all.is_valid);
        assert_eq!(all.attributed_stage, None);

        let f = AuditFeedback::from_checks([true, false, true, false], "", "x");
        assert!(!f.is_valid);
        assert_eq!(f.attributed_stage, Some(StageId::Emotion));
        f.validate().unwrap();

        let mut bad = f.clone();
        bad.is_valid = true;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn eval_tuple_ordering() {
        let t = |c: [bool; 4], n: i64| EvalTuple { checks: c, neg_t: n };
        assert!(t([true; 4], -1) > t([true; 4], -2));
        assert!(t([true; 4], -2) > t([true, true, false, true], -1));
        assert!(t([true, false, false, false], -6) > t([false, true, true, true], -1));
    }

    #[test]
    fn context_rejects_unknown_gold_label() {
        let ctx = DialogueContext {
            dialogue_id: "d".into(),
            turns: vec![Turn::new(1, "A", "hi", vec![]).unwrap()],
            target_speaker: "B".into(),
            gold_emotion: Some("joy".into()),
            gold_response: None,
            label_set_id: "iemocap".into(),
        };
        assert!(ctx.validate(&iemocap()).is_err());
    }

    #[test]
    fn context_rejects_non_increasing_turns() {
        let ctx = DialogueContext {
            dialogue_id: "d".into(),
            turns: vec![
                Turn::new(2, "A", "hi", vec![]).unwrap(),
                Turn::new(2, "B", "hey", vec![]).unwrap(),
            ],
            target_speaker: "B".into(),
            gold_emotion: None,
            gold_response: None,
            label_set_id: "iemocap".into(),
        };
        assert!(ctx.validate(&iemocap()).is_err());
    }

    #[test]
    fn empty_values_rejected() {
        assert!(Turn::new(1, "A", "   ", vec![]).is_err());
        assert!(PerceptionEvidence::new(vec![], vec![], "raw").is_err());
        assert!(PerceptionEvidence::new(vec![], vec!["x".into()], "").is_err());
        assert!(PragmaticPlan::new("g", "s", "t", " ", "raw").is_err());
        assert!(CandidateResponse::new("\n", "raw").is_err());
        assert!(EmotionForecast::new("joy", "", "", &iemocap()).is_err());
    }

    #[test]
    fn stage_parsing() {
        assert_eq!("Emotion".parse::<StageId>().unwrap(), StageId::Emotion);
        assert_eq!("A4".parse::<StageId>().unwrap(), StageId::Response);
        assert!("audio".parse::<StageId>().is_err());
    }
}
