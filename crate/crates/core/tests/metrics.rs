//! Metric fixtures and trace analytics against hand-computed values.

use std::collections::BTreeMap;

use chrono::Utc;
use reflect_loop::agents::Agents;
use reflect_loop::backend::ScriptedBackend;
use reflect_loop::closed_loop::run_closed_loop;
use reflect_loop::domain::{AgentRole, StageId};
use reflect_loop::fixtures::{self, audit_reply, emotion_reply, perception_reply, plan_reply, response_reply};
use reflect_loop::metrics::{analyze_traces, distinct_n, emotion_accuracy, percent, MetricError};
use reflect_loop::trace::{RunManifest, RunTrace};
use reflect_loop::LoopConfig;

const P: [bool; 4] = [true; 4];
const FE: [bool; 4] = [true, false, true, true];
const FS: [bool; 4] = [true, true, false, true];
const FR: [bool; 4] = [true, true, true, false];

struct Row {
    caef: &'static [&'static str],
    tones: &'static [&'static str],
    responses: &'static [&'static str],
    audits: &'static [[bool; 4]],
    gold: &'static str,
}

/// Ten dialogues. The expected values in `ten_run_fixture` were worked out
/// by hand from this table.
const ROWS: [Row; 10] = [
    Row { caef: &["sad"], tones: &["gentle"], responses: &["I am so sorry."], audits: &[P], gold: "sad" },
    Row { caef: &["angry"], tones: &["firm"], responses: &["That sounds hard!"], audits: &[P], gold: "frustrated" },
    Row { caef: &["sad", "frustrated"], tones: &["gentle", "gentle"], responses: &["No.", "I am here."], audits: &[FE, P], gold: "frustrated" },
    Row { caef: &["sad"], tones: &["gentle"], responses: &["Whatever.", "Tell me more."], audits: &[FR, P], gold: "sad" },
    Row { caef: &["happy"], tones: &["gentle"], responses: &["Ok", "ok then", "fine"], audits: &[FR, FR, FR], gold: "happy" },
    Row { caef: &["neutral"], tones: &["gentle"], responses: &["So sorry"], audits: &[P], gold: "sad" },
    Row { caef: &["angry"], tones: &["gentle", "firm"], responses: &["Calm down.", "I understand."], audits: &[FS, P], gold: "angry" },
    Row { caef: &["happy"], tones: &["gentle"], responses: &["I am so glad!"], audits: &[P], gold: "excited" },
    Row { caef: &["sad", "excited"], tones: &["gentle", "gentle", "gentle"], responses: &["a", "b", "That is wonderful."], audits: &[FE, FS, P], gold: "excited" },
    Row { caef: &["sad"], tones: &["gentle"], responses: &["Oh, no."], audits: &[P], gold: "sad" },
];

fn write_run(dir: &std::path::Path) {
    let manifest = RunManifest {
        schema_version: 1,
        run_id: "fixture".into(),
        started_at: Utc::now(),
        finished_at: None,
        corpus: "fixture".into(),
        backend: "scripted".into(),
        config: serde_json::Value::Null,
        dialogues: vec![],
    };
    let trace = RunTrace::create(dir, &manifest).unwrap();
    let config = LoopConfig {
        retrieval_top_k: 0,
        ..LoopConfig::default()
    };
    for (i, row) in ROWS.iter().enumerate() {
        let mut ctx = fixtures::dialogue(&format!("d{i}"));
        ctx.gold_emotion = Some(row.gold.into());
        let backend = ScriptedBackend::by_role([
            (AgentRole::Mpa, vec![perception_reply("x")]),
            (AgentRole::Caef, row.caef.iter().map(|l| emotion_reply(l, "x")).collect()),
            (AgentRole::Psp, row.tones.iter().map(|t| plan_reply(t, "x")).collect()),
            (AgentRole::Sgrg, row.responses.iter().map(|r| response_reply(r)).collect()),
            (AgentRole::Gra, row.audits.iter().map(|a| audit_reply(*a, "fix it")).collect()),
        ]);
        let mut w = trace.dialogue(&ctx.dialogue_id).unwrap();
        run_closed_loop(&ctx, &fixtures::labels(), &config, &Agents::default(), &backend, None, &mut w).unwrap();
        assert_eq!(backend.remaining(), 0, "row {i} scripted more replies than the loop used");
    }
}

#[test]
fn ten_run_fixture() {
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path());
    let r = analyze_traces(dir.path(), false).unwrap();

    assert_eq!(r.n_dialogues, 10);
    assert_eq!(r.n_failed, 0);
    assert_eq!(r.dist1, Some(18.0 / 27.0));
    assert_eq!(r.dist2, Some(13.0 / 17.0));
    assert_eq!(r.emotion_acc, Some(0.7));
    assert_eq!(r.emotion_n, 10);
    assert_eq!(r.avg_selected_refinement, 0.5);
    assert_eq!(r.refinement_records, 7);
    let attributions: BTreeMap<StageId, usize> = [
        (StageId::Perception, 0),
        (StageId::Emotion, 2),
        (StageId::Strategy, 2),
        (StageId::Response, 3),
    ]
    .into();
    assert_eq!(r.attribution_counts, attributions);
    assert_eq!(r.selected_t_histogram, [(1, 6), (2, 3), (3, 1)].into());

    let tones = |pairs: &[(&str, usize)]| -> BTreeMap<String, usize> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    };
    assert_eq!(r.tone_by_emotion["angry"], tones(&[("firm", 2)]));
    assert_eq!(r.tone_by_emotion["sad"], tones(&[("gentle", 3)]));
    assert_eq!(r.tone_by_emotion["happy"], tones(&[("gentle", 2)]));
    assert_eq!(r.tone_by_emotion.len(), 6);

    let finals: Vec<&str> = r.rows.iter().map(|row| row.final_response.as_str()).collect();
    assert_eq!(
        finals,
        [
            "I am so sorry.",
            "That sounds hard!",
            "I am here.",
            "Tell me more.",
            "Ok",
            "So sorry",
            "I understand.",
            "I am so glad!",
            "That is wonderful.",
            "Oh, no."
        ]
    );
    assert_eq!(r.rows[8].attributions, "emotion;strategy");
    assert!(r.perplexity.is_none() && r.bertscore.is_none());

    let csv = r.rows_csv().unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.lines().next().unwrap().starts_with("dialogue_id,records,selected_t"));
}

#[test]
fn two_runs_both_first() {
    let dir = tempfile::tempdir().unwrap();
    let trace = RunTrace::create(
        dir.path(),
        &RunManifest {
            schema_version: 1,
            run_id: "r".into(),
            started_at: Utc::now(),
            finished_at: None,
            corpus: String::new(),
            backend: String::new(),
            config: serde_json::Value::Null,
            dialogues: vec![],
        },
    )
    .unwrap();
    let config = LoopConfig {
        retrieval_top_k: 0,
        ..LoopConfig::default()
    };
    for id in ["a", "b"] {
        let backend = fixtures::scripted_schedule(&[P]);
        let mut w = trace.dialogue(id).unwrap();
        run_closed_loop(&fixtures::dialogue(id), &fixtures::labels(), &config, &Agents::default(), &backend, None, &mut w)
            .unwrap();
    }
    let r = analyze_traces(dir.path(), false).unwrap();
    assert_eq!(r.avg_selected_refinement, 0.0);
    assert_eq!(r.attribution_counts.values().sum::<usize>(), 0);
}

#[test]
fn empty_run_dir_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(analyze_traces(dir.path(), false), Err(MetricError::NoHistories(_))));
}

#[test]
fn metric_fixtures() {
    assert_eq!(distinct_n(&["a a a"], 1).unwrap(), 1.0 / 3.0);
    assert_eq!(distinct_n(&["the cat", "the dog"], 1).unwrap(), 0.75);
    assert_eq!(distinct_n(&["a b", "b a"], 2).unwrap(), 1.0);
    let golds = vec!["angry"; 31];
    let preds: Vec<&str> = (0..31).map(|i| if i < 23 { "angry" } else { "sad" }).collect();
    assert_eq!(percent(emotion_accuracy(&preds, &golds).unwrap()), "74.19");
}

#[test]
fn accuracy_takes_values_on_the_1_over_n_grid() {
    let n = 31;
    for hits in 0..=n {
        let preds: Vec<&str> = (0..n).map(|i| if i < hits { "x" } else { "y" }).collect();
        let acc = emotion_accuracy(&preds, &vec!["x"; n]).unwrap();
        assert_eq!(acc, hits as f64 / n as f64);
    }
}
