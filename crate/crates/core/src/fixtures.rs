//! Canned dialogues and model replies for tests, examples and the guide.
//!
//! [`scripted_schedule`] builds a backend whose audits follow a given list
//! of check vectors, so any path through the loop can be driven without a
//! model.
//!
//! ```
//! use reflect_loop::{fixtures, run_closed_loop, LoopConfig};
//! use reflect_loop::agents::Agents;
//!
//! let ctx = fixtures::dialogue("d1");
//! let labels = fixtures::labels();
//! let config = LoopConfig { retrieval_top_k: 0, ..LoopConfig::default() };
//! let backend = fixtures::scripted_schedule(&[[true, false, true, true], [true; 4]]);
//! let history = run_closed_loop(&ctx, &labels, &config, &Agents::default(), &backend, None, &mut ())
//!     .unwrap();
//! assert_eq!(history.records.len(), 2);
//! assert_eq!(history.selected_t, 2);
//! ```

use serde_json::json;

use crate::backend::ScriptedBackend;
use crate::domain::{AgentRole, DialogueContext, LabelRegistry, LabelSet, Turn};

/// The built-in IEMOCAP label set.
pub fn labels() -> LabelSet {
    LabelRegistry::default()
        .get("iemocap")
        .expect("built-in label set")
        .clone()
}

/// A short two-speaker dialogue with IEMOCAP labels and no keyframes.
pub fn dialogue(id: &str) -> DialogueContext {
    let turns = [
        ("F", "I waited at the station for two hours."),
        ("M", "I'm sorry, the traffic was terrible."),
        ("F", "You always have an excuse. I'm so tired of this."),
    ];
    DialogueContext {
        dialogue_id: id.to_string(),
        turns: turns
            .iter()
            .enumerate()
            .map(|(i, (s, u))| Turn::new(i as u32 + 1, *s, *u, Vec::new()).expect("valid turn"))
            .collect(),
        target_speaker: "M".into(),
        gold_emotion: Some("frustrated".into()),
        gold_response: Some("You're right, I should have called you.".into()),
        label_set_id: "iemocap".into(),
    }
}

pub fn perception_reply(tag: &str) -> String {
    json!({
        "visual_observations": [format!("F has crossed arms ({tag})")],
        "textual_observations": [format!("F repeats a complaint ({tag})")]
    })
    .to_string()
}

pub fn emotion_reply(label: &str, tag: &str) -> String {
    json!({"agreement": "consistent", "emotion": label, "rationale": format!("tired of excuses ({tag})")})
        .to_string()
}

pub fn plan_reply(tone: &str, tag: &str) -> String {
    json!({
        "goal": format!("acknowledge the frustration ({tag})"),
        "stance": "accountable",
        "tactic": "apologize and commit",
        "tone": tone
    })
    .to_string()
}

pub fn response_reply(text: &str) -> String {
    json!({ "response": text }).to_string()
}

pub fn audit_reply(checks: [bool; 4], critique: &str) -> String {
    json!({
        "checks": {
            "perception": checks[0],
            "emotion": checks[1],
            "strategy": checks[2],
            "response": checks[3]
        },
        "critique": critique
    })
    .to_string()
}

/// Critique text used by [`scripted_schedule`] for audit `i` (1-based).
pub fn critique(i: usize) -> String {
    format!("critique {i}")
}

/// Response text used by [`scripted_schedule`] for call `i` (1-based).
pub fn response_text(i: usize) -> String {
    format!("I hear you, and I am sorry. (reply {i})")
}

/// A by-role script whose `i`-th audit returns `audits[i]`. Every stage has
/// enough distinct replies for `audits.len()` iterations; reply `i` of a
/// role is tagged with `i` so retained and regenerated outputs can be told
/// apart.
pub fn scripted_schedule(audits: &[[bool; 4]]) -> ScriptedBackend {
    let n = audits.len().max(1);
    let tags: Vec<String> = (1..=n).map(|i| format!("call {i}")).collect();
    ScriptedBackend::by_role([
        (AgentRole::Mpa, tags.iter().map(|t| perception_reply(t)).collect::<Vec<_>>()),
        (AgentRole::Caef, tags.iter().map(|t| emotion_reply("frustrated", t)).collect()),
        (AgentRole::Psp, tags.iter().map(|t| plan_reply("gentle", t)).collect()),
        (AgentRole::Sgrg, (1..=n).map(|i| response_reply(&response_text(i))).collect()),
        (
            AgentRole::Gra,
            audits
                .iter()
                .enumerate()
                .map(|(i, c)| audit_reply(*c, &critique(i + 1)))
                .collect(),
        ),
    ])
}
