//! Self-supervised annotation of structured records with language models.
//!
//! A record is summarized by a model, recovered from the summary, and the
//! reconstruction is scored against the original. The score drives the
//! choice of the one-shot template used for annotation.

pub mod backend;
pub mod dataset;
pub mod generation;
pub mod metrics;
pub mod prompting;
pub mod tuning;
