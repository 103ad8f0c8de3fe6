//! Exemplar memory for retrieval-augmented generation.
//!
//! The index is built once from a split disjoint from evaluation and is
//! immutable afterwards. Queries are an exact cosine scan: every exemplar
//! is scored, results are ordered by descending similarity and ties are
//! broken by ascending `source_id`.
//!
//! On disk an index is a directory with `exemplars.json` (exemplars and
//! metadata) and `vectors.f32` (row-major little-endian `f32`).

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, Embedder};
use crate::domain::DialogueContext;

pub const EXEMPLAR_FILE: &str = "exemplars.json";
pub const VECTOR_FILE: &str = "vectors.f32";
/// Number of trailing turns used as the retrieval key.
pub const CONTEXT_TURNS: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("dialogue `{0}` has no gold_response and cannot be an exemplar")]
    MissingResponse(String),
    #[error("index was built with embedder `{index}`, query uses `{query}`")]
    EmbedderMismatch { index: String, query: String },
    #[error("embedding dimension {found} differs from the index dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub source_id: String,
    pub context_text: String,
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<String>,
}

/// A scored query hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored<'a> {
    pub exemplar: &'a Exemplar,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryIndex {
    exemplars: Vec<Exemplar>,
    vectors: Vec<Vec<f32>>,
    embedder_id: String,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct IndexDocument {
    schema_version: u32,
    embedder_id: String,
    dim: usize,
    exemplars: Vec<Exemplar>,
}

/// The last [`CONTEXT_TURNS`] turns as `SPEAKER: utterance` lines.
pub fn flatten_context(ctx: &DialogueContext) -> String {
    let skip = ctx.turns.len().saturating_sub(CONTEXT_TURNS);
    ctx.turns[skip..]
        .iter()
        .map(|t| format!("{}: {}", t.speaker_id, t.utterance.trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

impl MemoryIndex {
    /// One exemplar per dialogue, keyed by its flattened context.
    pub fn build(corpus: &[DialogueContext], embedder: &dyn Embedder) -> Result<Self, MemoryError> {
        let mut exemplars = Vec::with_capacity(corpus.len());
        let mut vectors = Vec::with_capacity(corpus.len());
        for ctx in corpus {
            let response = ctx
                .gold_response
                .as_deref()
                .filter(|r| !r.trim().is_empty())
                .ok_or_else(|| MemoryError::MissingResponse(ctx.dialogue_id.clone()))?;
            let exemplar = Exemplar {
                source_id: ctx.dialogue_id.clone(),
                context_text: flatten_context(ctx),
                response_text: response.trim().to_string(),
                emotion: ctx.gold_emotion.clone(),
            };
            vectors.push(embedder.embed(&exemplar.context_text)?.normalized()?.into_values());
            exemplars.push(exemplar);
        }
        let dim = vectors.first().map_or(0, Vec::len);
        if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
            return Err(MemoryError::DimensionMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        Ok(Self {
            exemplars,
            vectors,
            embedder_id: embedder.id().to_string(),
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        &self.exemplars
    }

    pub fn vectors(&self) -> &[Vec<f32>] {
        &self.vectors
    }

    /// Top `k` exemplars for the context.
    pub fn query(
        &self,
        ctx: &DialogueContext,
        k: usize,
        embedder: &dyn Embedder,
    ) -> Result<Vec<Exemplar>, MemoryError> {
        Ok(self
            .query_scored(&flatten_context(ctx), k, embedder)?
            .into_iter()
            .map(|s| s.exemplar.clone())
            .collect())
    }

    /// Top `k` exemplars for a flattened key text, with similarities.
    pub fn query_scored(
        &self,
        text: &str,
        k: usize,
        embedder: &dyn Embedder,
    ) -> Result<Vec<Scored<'_>>, MemoryError> {
        if embedder.id() != self.embedder_id {
            return Err(MemoryError::EmbedderMismatch {
                index: self.embedder_id.clone(),
                query: embedder.id().to_string(),
            });
        }
        if k == 0 || self.is_empty() {
            return Ok(Vec::new());
        }
        let q = embedder.embed(text)?.normalized()?;
        if q.dim() != self.dim {
            return Err(MemoryError::DimensionMismatch {
                expected: self.dim,
                found: q.dim(),
            });
        }
        Ok(self.top_k(q.values(), k))
    }

    /// Ranks all exemplars against an already normalized query vector.
    pub fn top_k(&self, query: &[f32], k: usize) -> Vec<Scored<'_>> {
        let mut scored: Vec<Scored<'_>> = self
            .exemplars
            .iter()
            .zip(&self.vectors)
            .map(|(exemplar, v)| Scored {
                exemplar,
                similarity: dot(query, v),
            })
            .collect();
        scored.sort_by(|a, b| {
            b.similarity
                .partial_cmp(&a.similarity)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.exemplar.source_id.cmp(&b.exemplar.source_id))
        });
        scored.truncate(k);
        scored
    }

    pub fn save(&self, dir: &Path) -> Result<(), MemoryError> {
        let io = |path: &Path, e: std::io::Error| MemoryError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let doc = IndexDocument {
            schema_version: 1,
            embedder_id: self.embedder_id.clone(),
            dim: self.dim,
            exemplars: self.exemplars.clone(),
        };
        let doc_path = dir.join(EXEMPLAR_FILE);
        let text = serde_json::to_string_pretty(&doc).expect("index document serializes");
        fs::write(&doc_path, text).map_err(|e| io(&doc_path, e))?;
        let bytes: Vec<u8> = self
            .vectors
            .iter()
            .flatten()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let vec_path = dir.join(VECTOR_FILE);
        fs::write(&vec_path, bytes).map_err(|e| io(&vec_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, MemoryError> {
        let io = |path: &Path, e: std::io::Error| MemoryError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let doc_path = dir.join(EXEMPLAR_FILE);
        let text = fs::read_to_string(&doc_path).map_err(|e| io(&doc_path, e))?;
        let doc: IndexDocument = serde_json::from_str(&text)
            .map_err(|e| MemoryError::Corrupt(format!("{}: {e}", doc_path.display())))?;
        let vec_path = dir.join(VECTOR_FILE);
        let bytes = fs::read(&vec_path).map_err(|e| io(&vec_path, e))?;
        let expected = doc.exemplars.len() * doc.dim * 4;
        if bytes.len() != expected {
            return Err(MemoryError::Corrupt(format!(
                "{}: {} bytes, expected {expected}",
                vec_path.display(),
                bytes.len()
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MemoryError::Corrupt(format!("{}: non-finite value", vec_path.display())));
        }
        let vectors = if doc.dim == 0 {
            Vec::new()
        } else {
            values.chunks_exact(doc.dim).map(<[f32]>::to_vec).collect()
        };
        Ok(Self {
            exemplars: doc.exemplars,
            vectors,
            embedder_id: doc.embedder_id,
            dim: doc.dim,
        })
    }
}
