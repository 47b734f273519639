//! Benchmark harness for forecasting mental-health severity levels from
//! passive smartphone sensing data.
//!
//! The crate covers the full pipeline: synthetic data generation and CSV
//! import, feature representation, classical / neural / LLM-protocol model
//! families, evaluation under forecasting and early-prediction protocols,
//! and post-hoc analyses.

pub mod analysis;
pub mod classical;
pub mod data;
pub mod error;
pub mod eval;
pub mod exp;
pub mod features;
pub mod io;
pub mod llm;
pub mod neural;
pub mod schema;
pub mod split;
pub mod syngen;
