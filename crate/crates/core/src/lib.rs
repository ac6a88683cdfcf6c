//! Budget-bounded orchestration of LLM agents proposing code edits.
//!
//! Agents propose SEARCH/REPLACE edits to a target repository. Each proposal
//! is applied in its own git worktree, gated by a cheap preflight, evaluated
//! by a training command that prints `val_bpb`, and promoted to the main
//! branch only when it improves on the best metric so far.

pub mod agents;
pub mod cli;
pub mod config;
pub mod exec;
pub mod memory;
pub mod patch;
pub mod repo;
pub mod telemetry;
pub mod testbed;
pub mod topology;
