//! Local-search code generation engine.
//!
//! Drafts candidate programs, revises them with execution feedback from a
//! subprocess sandbox, scores them with pluggable reward functions, and
//! mines revision-distance preference pairs from breadth-first revision
//! trees.

pub mod bench;
pub mod domain;
pub mod error;
pub mod executor;
pub mod policy;
pub mod reward;
pub mod revtree;
pub mod search;
mod sync;
#[cfg(test)]
mod testkit;

pub use domain::{
    canonical_code_order, compare_scores, pass_at_k, CodeId, CodeSample, CompositeScore,
    ExecutionFeedback, History, HistoryEntry, Origin, Reward, Task, TestCase, TokenUsage, Verdict,
    VerdictStatus,
};
