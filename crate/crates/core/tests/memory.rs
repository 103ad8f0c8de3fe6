//! Retrieval against an exhaustive ranking oracle, and the hashing embedder.

mod common;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reflect_loop::backend::{Embedder, HashingEmbedder};
use reflect_loop::domain::{DialogueContext, Turn};
use reflect_loop::memory::{dot, flatten_context, MemoryError, MemoryIndex};

const VOCAB: &[&str] = &[
    "sorry", "late", "train", "work", "tired", "happy", "birthday", "dog", "lost", "job", "money", "again",
    "never", "always", "promise", "call", "angry", "love", "house", "move", "exam", "failed", "passed", "great",
];

fn random_dialogue(rng: &mut ChaCha8Rng, id: String) -> DialogueContext {
    let turns = rng.gen_range(1..9);
    DialogueContext {
        dialogue_id: id,
        turns: (0..turns)
            .map(|i| {
                let words: Vec<&str> = (0..rng.gen_range(1..6)).map(|_| *VOCAB.choose(rng).unwrap()).collect();
                Turn::new(i + 1, ["A", "B"][i as usize % 2], words.join(" "), Vec::new()).unwrap()
            })
            .collect(),
        target_speaker: "B".into(),
        gold_emotion: None,
        gold_response: Some(format!("response {}", rng.gen::<u16>())),
        label_set_id: "iemocap".into(),
    }
}

/// Rank of exemplar `i`: how many others beat it on (similarity desc, id asc).
fn oracle(sims: &[(f64, String)], k: usize) -> Vec<String> {
    let mut ranked: Vec<(usize, &String)> = sims
        .iter()
        .map(|(s, id)| {
            let rank = sims
                .iter()
                .filter(|(s2, id2)| s2 > s || (s2 == s && id2 < id))
                .count();
            (rank, id)
        })
        .collect();
    ranked.sort();
    ranked.into_iter().take(k).map(|(_, id)| id.clone()).collect()
}

#[test]
fn query_matches_exhaustive_oracle() {
    let embedder = HashingEmbedder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for round in 0..60 {
        let n = rng.gen_range(0..=100);
        let mut corpus: Vec<DialogueContext> =
            (0..n).map(|i| random_dialogue(&mut rng, format!("ex{:03}", (i * 37 + round) % 1000))).collect();
        // force exact ties with duplicated contexts under fresh ids
        if n > 2 {
            let mut dup = corpus[0].clone();
            dup.dialogue_id = format!("aa-dup-{round}");
            corpus.push(dup);
        }
        let ids: HashSet<&str> = corpus.iter().map(|c| c.dialogue_id.as_str()).collect();
        if ids.len() != corpus.len() {
            continue;
        }
        let index = MemoryIndex::build(&corpus, &embedder).unwrap();
        for _ in 0..5 {
            let q = random_dialogue(&mut rng, "q".into());
            let qv = embedder.embed(&flatten_context(&q)).unwrap();
            let sims: Vec<(f64, String)> = index
                .exemplars()
                .iter()
                .zip(index.vectors())
                .map(|(e, v)| (dot(qv.values(), v), e.source_id.clone()))
                .collect();
            for k in [0, 1, 2, 5, n + 3] {
                let got: Vec<String> = index
                    .query(&q, k, &embedder)
                    .unwrap()
                    .into_iter()
                    .map(|e| e.source_id)
                    .collect();
                assert_eq!(got, oracle(&sims, k), "round {round} k {k}");
            }
        }
    }
}

#[test]
fn scores_are_cosines() {
    let embedder = HashingEmbedder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let corpus: Vec<DialogueContext> = (0..30).map(|i| random_dialogue(&mut rng, format!("c{i}"))).collect();
    let index = MemoryIndex::build(&corpus, &embedder).unwrap();
    let q = flatten_context(&corpus[4]);
    let hits = index.query_scored(&q, 30, &embedder).unwrap();
    assert_eq!(hits[0].similarity.clamp(-1.0, 1.0), hits[0].similarity);
    assert!((hits[0].similarity - 1.0).abs() < 1e-6);
    // independent cosine on raw, unnormalized counts
    let raw = |s: &str| embedder.embed(s).unwrap().values().iter().map(|v| f64::from(*v)).collect::<Vec<_>>();
    let qv = raw(&q);
    for h in &hits {
        let ev = raw(&h.exemplar.context_text);
        let cos = qv.iter().zip(&ev).map(|(a, b)| a * b).sum::<f64>()
            / (qv.iter().map(|a| a * a).sum::<f64>().sqrt() * ev.iter().map(|a| a * a).sum::<f64>().sqrt());
        assert!((cos - h.similarity).abs() < 1e-5);
    }
}

#[test]
fn saved_index_answers_identically() {
    let embedder = HashingEmbedder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let corpus: Vec<DialogueContext> = (0..40).map(|i| random_dialogue(&mut rng, format!("s{i}"))).collect();
    let index = MemoryIndex::build(&corpus, &embedder).unwrap();
    let dir = tempfile::tempdir().unwrap();
    index.save(dir.path()).unwrap();
    let loaded = MemoryIndex::load(dir.path()).unwrap();
    assert_eq!(loaded, index);
    let q = random_dialogue(&mut rng, "q".into());
    assert_eq!(loaded.query(&q, 3, &embedder).unwrap(), index.query(&q, 3, &embedder).unwrap());
}

#[test]
fn other_embedder_is_rejected() {
    let corpus = vec![common::dialogue("x", 0)];
    let index = MemoryIndex::build(&corpus, &HashingEmbedder::default()).unwrap();
    let other = HashingEmbedder::new(256, 1);
    assert!(matches!(
        index.query(&corpus[0], 1, &other),
        Err(MemoryError::EmbedderMismatch { .. })
    ));
}

#[test]
fn thousand_words_embed_distinctly() {
    let embedder = HashingEmbedder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut words = HashSet::new();
    while words.len() < 1000 {
        let len = rng.gen_range(3..10);
        let w: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
        words.insert(w);
    }
    let mut words: Vec<String> = words.into_iter().collect();
    words.sort();
    let vectors: Vec<Vec<f32>> = words.iter().map(|w| embedder.embed(w).unwrap().into_values()).collect();
    for v in &vectors {
        assert!((dot(v, v) - 1.0).abs() < 1e-6);
    }
    let mut worst = 0.0f64;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            worst = worst.max(dot(&vectors[i], &vectors[j]));
        }
    }
    assert!(worst < 1.0 - 1e-6, "two words share an embedding (cosine {worst})");
}

#[test]
fn embedding_is_stable_across_instances() {
    let a = HashingEmbedder::default().embed("I waited two hours").unwrap();
    let b = HashingEmbedder::from_id("hashing-256-0").unwrap().embed("I waited two hours").unwrap();
    assert_eq!(a, b);
}
