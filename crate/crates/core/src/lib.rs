//! Evaluation-pipeline engine for probing how language models handle
//! samples they answer with `Unknown`.
//!
//! The library is organized in layers:
//!
//! - [`domain`]: labels, samples, verdicts, phases, exact rational rates.
//! - [`dataset`]: line-delimited sample ingestion, unknownization, balanced splits.
//! - [`prompt`]: template assets, rendering, completion parsing, guidance-label draws.
//! - [`provider`]: completion backends (live HTTP, scripted, replay), caching, transcripts.
//! - [`pipeline`]: phase orchestration, trajectory persistence, checkpoint/resume.
//! - [`metrics`]: conversion/conformity/degradation metrics plus an independent
//!   brute-force recomputation used to cross-check the engine.
//! - [`report`]: table and manifest emission.

#![forbid(unsafe_code)]

pub mod dataset;
pub mod domain;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod provider;
pub mod report;
