//! Human-in-the-loop deductive coding engine.
//!
//! Classifier predictions flow through a confidence-and-sparsity [`router`];
//! escalated turns get LLM candidate codes from [`llm`] and land in the
//! [`adjudication`] queue for an expert. [`metrics`] and [`embed_audit`]
//! compute the reliability and codebook-confusability analyses, and
//! [`runner`] wires the pieces into reproducible experiments.

pub mod adjudication;
pub mod codebooks;
pub mod corpus;
pub mod domain;
pub mod embed_audit;
pub mod fixtures;
pub mod ingest;
pub mod llm;
pub mod metrics;
pub mod router;
pub mod runner;

pub use domain::*;
