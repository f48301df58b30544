//! Evaluation harness for yes/no visual-question hallucination benchmarks
//! under prompt interventions.

pub mod client;
pub mod dataset;
pub mod labels;
pub mod metrics;
pub mod prompts;
pub mod report;
pub mod runner;

pub use labels::{GoldLabel, Prediction};
