//! Trace round-trips, replay closure, lenient loading and concurrent writers.

mod common;

use std::fs;
use std::sync::Arc;
use std::thread;

use chrono::Utc;
use reflect_loop::agents::{AgentSettings, Agents, TemplateSet};
use reflect_loop::backend::ScriptedBackend;
use reflect_loop::closed_loop::run_closed_loop;
use reflect_loop::config::RunConfig;
use reflect_loop::domain::{AgentRole, RunHistory};
use reflect_loop::fixtures;
use reflect_loop::runner::{run_corpus, BackendSpec, RunOptions};
use reflect_loop::trace::{
    load_run, read_events, strip_timestamps, EventBody, ErrorPayload, RunManifest, RunTrace, TraceError,
};
use reflect_loop::LoopConfig;

use common::PASS;

const FAIL_E: [bool; 4] = [true, false, true, true];
const FAIL_P: [bool; 4] = [false, true, true, true];
const FAIL_R: [bool; 4] = [true, true, true, false];

fn manifest(run_id: &str) -> RunManifest {
    RunManifest {
        schema_version: 1,
        run_id: run_id.into(),
        started_at: Utc::now(),
        finished_at: None,
        corpus: "mem".into(),
        backend: "scripted".into(),
        config: serde_json::Value::Null,
        dialogues: vec![],
    }
}

#[test]
fn written_histories_load_back_equal() {
    let dir = tempfile::tempdir().unwrap();
    let trace = RunTrace::create(dir.path(), &manifest("r1")).unwrap();
    let config = LoopConfig {
        retrieval_top_k: 0,
        ..LoopConfig::default()
    };
    let labels = fixtures::labels();
    let agents = Agents::default();
    let schedules = [vec![PASS], vec![FAIL_E, PASS], vec![FAIL_R, FAIL_P, FAIL_E]];
    let mut originals: Vec<RunHistory> = Vec::new();
    for (i, s) in schedules.iter().enumerate() {
        let ctx = common::dialogue(&format!("d{i}"), i);
        let backend = fixtures::scripted_schedule(s);
        let mut writer = trace.dialogue(&ctx.dialogue_id).unwrap();
        originals.push(run_closed_loop(&ctx, &labels, &config, &agents, &backend, None, &mut writer).unwrap());
    }
    let loaded = load_run(dir.path(), false).unwrap();
    assert_eq!(loaded.histories(), originals);
    assert!(loaded.warnings.is_empty());
}

fn run_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.loop_config.retrieval_top_k = 0;
    c.run.capture_prompts = true;
    c
}

#[test]
fn replay_reproduces_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::write(&dir.path().join("corpus"), "test_", 4);
    let schedules = vec![vec![PASS], vec![FAIL_E, PASS], vec![FAIL_R, FAIL_R, FAIL_R], vec![FAIL_P, FAIL_E, PASS]];
    let script = common::write_script(&dir.path().join("script.json"), &common::script(&schedules, 2));

    let first = run_corpus(&RunOptions {
        corpus: corpus.clone(),
        out: dir.path().join("run1"),
        config: run_config(),
        backend: BackendSpec::Scripted(script),
        offset: 0,
        limit: None,
        run_id: None,
    })
    .unwrap();
    assert!(first.all_ok(), "{first}");

    let second = run_corpus(&RunOptions {
        corpus,
        out: dir.path().join("run2"),
        config: run_config(),
        backend: BackendSpec::Replay(dir.path().join("run1")),
        offset: 0,
        limit: None,
        run_id: None,
    })
    .unwrap();
    assert!(second.all_ok(), "{second}");
    assert_eq!(first.manifest.run_id, second.manifest.run_id);

    let a = common::trace_files(&dir.path().join("run1"));
    let b = common::trace_files(&dir.path().join("run2"));
    assert_eq!(a.len(), 4);
    for (x, y) in a.iter().zip(&b) {
        let ex = read_events(x, false).unwrap().0;
        let ey = read_events(y, false).unwrap().0;
        assert_eq!(strip_timestamps(&ex), strip_timestamps(&ey), "{}", x.display());
    }
}

#[test]
fn replay_of_a_failed_dialogue_fails_the_same_way() {
    let dir = tempfile::tempdir().unwrap();
    let trace = RunTrace::create(dir.path().join("run1"), &manifest("r")).unwrap();
    let ctx = fixtures::dialogue("d");
    let config = LoopConfig {
        retrieval_top_k: 0,
        ..LoopConfig::default()
    };
    let backend = ScriptedBackend::by_role([
        (AgentRole::Mpa, vec![fixtures::perception_reply("a")]),
        (AgentRole::Caef, vec!["melancholy".to_string(); 3]),
    ]);
    let mut w = trace.dialogue("d").unwrap();
    let failure = run_closed_loop(&ctx, &fixtures::labels(), &config, &Agents::default(), &backend, None, &mut w)
        .unwrap_err();
    assert!(failure.partial.is_none());

    let path = dir.path().join("run1/dialogues/d.jsonl");
    let events = read_events(&path, false).unwrap().0;
    let replay = ScriptedBackend::from_trace_events(&events).unwrap();
    let mut again = Vec::new();
    let failure2 =
        run_closed_loop(&ctx, &fixtures::labels(), &config, &Agents::default(), &replay, None, &mut again)
            .unwrap_err();
    assert_eq!(failure.error.to_string(), failure2.error.to_string());
    let last = again.last().unwrap();
    assert!(matches!(&last.1, EventBody::Error(ErrorPayload { role: Some(AgentRole::Caef), replies, .. }) if replies.len() == 3));
}

#[test]
fn truncated_line_strict_and_lenient() {
    let dir = tempfile::tempdir().unwrap();
    let trace = RunTrace::create(dir.path(), &manifest("r")).unwrap();
    let ctx = fixtures::dialogue("d");
    let config = LoopConfig {
        retrieval_top_k: 0,
        ..LoopConfig::default()
    };
    let backend = fixtures::scripted_schedule(&[FAIL_E, PASS]);
    let mut w = trace.dialogue("d").unwrap();
    run_closed_loop(&ctx, &fixtures::labels(), &config, &Agents::default(), &backend, None, &mut w).unwrap();

    let path = dir.path().join("dialogues/d.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let n_lines = text.lines().count();
    fs::write(&path, &text[..text.len() - 20]).unwrap();

    match load_run(dir.path(), false) {
        Err(TraceError::Corrupt { line, .. }) => assert_eq!(line, n_lines),
        other => panic!("unexpected {other:?}"),
    }
    let (events, warnings) = read_events(&path, true).unwrap();
    assert_eq!(events.len(), n_lines - 1);
    assert_eq!(warnings.len(), 1);
    let run = load_run(dir.path(), true).unwrap();
    let d = run.dialogue("d").unwrap();
    // the selection line was lost, so no history, but both iterations survive as events
    assert!(d.history.is_none());
    assert!(d.events.iter().any(|e| e.t == 2));
}

#[test]
fn concurrent_writers_never_interleave() {
    let dir = tempfile::tempdir().unwrap();
    let trace = Arc::new(RunTrace::create(dir.path(), &manifest("stress")).unwrap());
    let writers = 8;
    let per_writer = 400;
    let handles: Vec<_> = (0..writers)
        .map(|w| {
            let trace = trace.clone();
            thread::spawn(move || {
                let mut writer = trace.dialogue(&format!("dialogue-{w}")).unwrap();
                for i in 0..per_writer {
                    let body = EventBody::Error(ErrorPayload {
                        role: None,
                        message: format!("{w}:{i}:{}", "x".repeat(i % 300)),
                        replies: vec![],
                    });
                    writer.append(i as u32 + 1, &body).unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    for w in 0..writers {
        let path = dir.path().join(format!("dialogues/dialogue-{w}.jsonl"));
        let (events, warnings) = read_events(&path, false).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(events.len(), per_writer);
        for (i, e) in events.iter().enumerate() {
            assert_eq!(e.dialogue_id, format!("dialogue-{w}"));
            assert_eq!(e.t, i as u32 + 1);
        }
    }
}

#[test]
fn colliding_file_stems_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let trace = RunTrace::create(dir.path(), &manifest("r")).unwrap();
    let _a = trace.dialogue("a/b").unwrap();
    assert!(matches!(trace.dialogue("a:b"), Err(TraceError::Inconsistent(_))));
}

#[test]
fn capture_includes_all_prompts_of_a_re_ask() {
    let dir = tempfile::tempdir().unwrap();
    let trace = RunTrace::create(dir.path(), &manifest("r")).unwrap();
    let ctx = fixtures::dialogue("d");
    let agents = Agents::new(
        TemplateSet::default(),
        AgentSettings {
            capture_prompts: true,
            ..AgentSettings::default()
        },
    );
    let config = LoopConfig {
        retrieval_top_k: 0,
        ..LoopConfig::default()
    };
    let backend = ScriptedBackend::by_role([
        (AgentRole::Mpa, vec!["prose".to_string(), fixtures::perception_reply("a")]),
        (AgentRole::Caef, vec![fixtures::emotion_reply("sad", "a")]),
        (AgentRole::Psp, vec![fixtures::plan_reply("gentle", "a")]),
        (AgentRole::Sgrg, vec![fixtures::response_reply("ok")]),
        (AgentRole::Gra, vec![fixtures::audit_reply(PASS, "")]),
    ]);
    let mut w = trace.dialogue("d").unwrap();
    run_closed_loop(&ctx, &fixtures::labels(), &config, &agents, &backend, None, &mut w).unwrap();
    let events = read_events(&dir.path().join("dialogues/d.jsonl"), false).unwrap().0;
    let EventBody::StageOutput(p) = events[0].body().unwrap() else {
        panic!("first event is a stage output")
    };
    assert_eq!(p.replies.len(), 2);
    assert_eq!(p.prompts.len(), 2);
}
