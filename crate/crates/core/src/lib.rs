//! Deterministic reward engine for decomposition-based search-agent traces.
//!
//! Parses tagged rollouts (`<think>`, `<search>`, `<information>`,
//! `<answer>`), builds the subquery decomposition tree, scores answer,
//! answerability, decomposition and format rewards, aggregates them and
//! computes group-relative advantages. A scripted-policy harness drives the
//! search loop against an in-memory retriever.

pub mod aggregation;
pub mod api;
pub mod config;
pub mod embed;
pub mod error;
pub mod grpo;
pub mod harness;
pub mod parser;
pub mod render;
pub mod report;
pub mod rewards;
pub mod search;
pub mod trace;

pub use error::{Error, Result};
