//! Orchestration engine for a single software-engineering agent that
//! handles repair, test writing, code generation and feature work through
//! one task state, a fixed action set and a Meta-Agent loop, plus the
//! harness that evaluates its solutions.

pub mod actions;
pub mod bench;
pub mod coverage;
pub mod diff;
pub mod index;
pub mod knowledge;
pub mod llm;
pub mod meta;
pub mod state;
pub mod stats;
pub mod workspace;
