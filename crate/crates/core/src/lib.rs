//! Closed-loop multi-agent generation of empathetic dialogue responses.
//!
//! A four-stage pipeline (perception, emotion forecasting, strategy
//! planning, response generation) produces a candidate reply from a
//! conversation and its video keyframes. A reflection agent audits every
//! stage, blames the earliest failing one, and the pipeline is re-run from
//! there while upstream outputs are kept. The final reply is chosen from the
//! whole refinement history.
//!
//! | module | contents |
//! |---|---|
//! | [`domain`] | dialogue, stage outputs, audits, histories |
//! | [`backend`] | chat and embedding services, scripted replay |
//! | [`agents`] | prompts and reply parsing for the five agents |
//! | [`closed_loop`] | the audit, attribution, re-generation and selection loop |
//! | [`memory`] | exemplar retrieval |
//! | [`ingest`] | corpus format and validation |
//! | [`metrics`] | Distinct-n, emotion accuracy, trace analytics |
//! | [`trace`] | JSONL run traces |
//! | [`runner`] | batch execution over a corpus |
//!
//! ```
//! use reflect_loop::closed_loop::eval_tuple;
//! use reflect_loop::domain::AuditFeedback;
//!
//! let first = AuditFeedback::from_checks([true, false, true, true], "overstated", "");
//! let second = AuditFeedback::from_checks([true, true, true, true], "", "");
//! assert!(eval_tuple(&second, 2) > eval_tuple(&first, 1));
//! ```

pub mod agents;
pub mod backend;
pub mod closed_loop;
pub mod config;
pub mod domain;
pub mod error;
pub mod fixtures;
pub mod ingest;
pub mod memory;
pub mod metrics;
pub mod runner;
pub mod trace;

pub mod cli;

pub use closed_loop::{run_closed_loop, LoopConfig};
pub use domain::{AuditFeedback, DialogueContext, RunHistory, StageId};

// The guide's Rust snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/reflection.md")]
    mod reflection {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/traces.md")]
    mod traces {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
