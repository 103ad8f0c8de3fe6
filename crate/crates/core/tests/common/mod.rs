#![allow(dead_code)]

use std::path::{Path, PathBuf};

use reflect_loop::backend::ScriptFile;
use reflect_loop::domain::{AgentRole, DialogueContext, Turn};
use reflect_loop::fixtures;
use reflect_loop::ingest::{write_corpus, CorpusManifest};

pub const PASS: [bool; 4] = [true; 4];

/// A dialogue whose utterances vary with `i`.
pub fn dialogue(id: &str, i: usize) -> DialogueContext {
    let mut d = fixtures::dialogue(id);
    d.turns.push(
        Turn::new(4, "M", format!("Let me make it up to you, number {i}."), Vec::new()).unwrap(),
    );
    d.turns.push(Turn::new(5, "F", format!("Fine, but {i} times is enough."), Vec::new()).unwrap());
    d.gold_response = Some(format!("Thank you, I mean it this time {i}."));
    d.gold_emotion = Some(["frustrated", "sad", "angry", "neutral"][i % 4].into());
    d
}

/// Writes an iemocap corpus of `n` dialogues named `{prefix}{i}`.
pub fn write(dir: &Path, prefix: &str, n: usize) -> PathBuf {
    let dialogues: Vec<DialogueContext> = (0..n).map(|i| dialogue(&format!("{prefix}{i}"), i)).collect();
    let manifest = CorpusManifest {
        schema_version: 1,
        dataset_id: "iemocap".into(),
        label_set_id: "iemocap".into(),
        split: prefix.trim_end_matches('_').into(),
        dialogues: n,
        keyframe_root: "frames".into(),
        dialogue_file: "dialogues.jsonl".into(),
    };
    write_corpus(dir, &manifest, &dialogues).unwrap()
}

/// Roles called in one iteration that re-runs from stage index `k`.
fn roles_from(k: usize) -> impl Iterator<Item = AgentRole> {
    [AgentRole::Mpa, AgentRole::Caef, AgentRole::Psp, AgentRole::Sgrg]
        .into_iter()
        .skip(k)
        .chain([AgentRole::Gra])
}

/// A by-role script serving `schedules` (one list of audits per dialogue,
/// in run order) under budget `t_max`. Unused audits are not scripted.
pub fn script(schedules: &[Vec<[bool; 4]>], t_max: u32) -> ScriptFile {
    let mut file = ScriptFile {
        schema_version: 1,
        ..ScriptFile::default()
    };
    let mut n = 0;
    for audits in schedules {
        let mut from = 0;
        for (i, checks) in audits.iter().enumerate().take(t_max as usize + 1) {
            for role in roles_from(from) {
                n += 1;
                let tag = format!("#{n}");
                let reply = match role {
                    AgentRole::Mpa => fixtures::perception_reply(&tag),
                    AgentRole::Caef => fixtures::emotion_reply(["sad", "frustrated"][n % 2], &tag),
                    AgentRole::Psp => fixtures::plan_reply(["gentle", "firm", "supportive"][n % 3], &tag),
                    AgentRole::Sgrg => fixtures::response_reply(&format!("Reply {n}: I am sorry, truly.")),
                    AgentRole::Gra => fixtures::audit_reply(*checks, &format!("critique {n}")),
                };
                file.replies.entry(role).or_default().push(reply);
            }
            match checks.iter().position(|c| !c) {
                Some(k) if i < t_max as usize => from = k,
                _ => break,
            }
        }
    }
    file
}

pub fn write_script(path: &Path, file: &ScriptFile) -> PathBuf {
    std::fs::write(path, serde_json::to_string_pretty(file).unwrap()).unwrap();
    path.to_path_buf()
}

pub fn trace_files(run_dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(run_dir.join("dialogues"))
        .map(|rd| rd.map(|e| e.unwrap().path()).collect())
        .unwrap_or_default();
    v.sort();
    v
}
