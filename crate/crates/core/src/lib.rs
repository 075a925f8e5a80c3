//! Diagnosis toolkit for distributed-training profiling traces.
//!
//! The pipeline is: ingest per-worker traces ([`trace`]), extract the
//! priority-based critical path ([`critical`]), summarize every function into
//! a compact behavior pattern ([`pattern`]), and localize abnormal
//! (function, worker) pairs by comparing patterns across workers
//! ([`localize`]). A degradation detector ([`detector`]) and a synchronized
//! profiling coordinator ([`coordinator`]) decide *when* to profile, and a
//! fault-injecting simulator ([`simulator`]) provides ground-truth sessions
//! for end-to-end verification.
//!
//! Core numeric routines are generic over the scalar type via [`num::Scalar`]
//! (f32 or f64); the pipeline itself uses the [`Value`] alias.

pub mod config;
pub mod coordinator;
pub mod critical;
pub mod detector;
pub mod localize;
pub mod num;
pub mod pattern;
pub mod pipeline;
pub mod simulator;
pub mod trace;

/// Scalar type used by the concrete analysis pipeline.
pub type Value = f64;

/// Worker-local timestamp in nanoseconds. Never compared across workers.
pub type TimeNs = i64;

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
