//! Image clustering for cluster-level document review.
//!
//! The pipeline runs scan → dedup → frequency triage → embed → K-means →
//! summarize, with a randomized k-d forest for similar-image lookup and an
//! event-sourced tag store for reviewer decisions.

pub mod ann;
pub mod embedding;
pub mod ingest;
pub mod kmeans;
pub mod vectors;
