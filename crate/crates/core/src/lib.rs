//! Zero-shot coding of free-text clinical terms into hierarchical
//! terminologies (ATC, MedDRA-style).
//!
//! A query flows through three stages: diverse candidate generation (LLM
//! reasoning plus BM25 and dense retrieval), entailment-based self-evaluation
//! against grounded code descriptions, and multiple-choice confidence scoring
//! from logit-biased answer log-probabilities. The resulting distribution
//! drives entropy-based deferral to human review and, given labelled data,
//! split conformal prediction sets.

pub mod eval;
pub mod jsonl;
pub mod llm;
pub mod pipeline;
pub mod retrieval;
pub mod terminology;
pub mod uncertainty;
