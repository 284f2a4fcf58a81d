//! Discriminative closed information extraction.
//!
//! Text goes through four trained stages: a token-pair mention recognizer, a
//! bi-encoder candidate generator over a vector index of all entities, a
//! cross-encoder candidate ranker, and a relation extractor that combines the
//! ranker's joint embeddings with fine-grained entity types. A greedy pipeline
//! applies three calibrated thresholds to produce (subject, relation, object)
//! triples grounded in the knowledge graph.

pub mod config;
pub mod error;
pub mod eval;
pub mod kg;
pub mod mention;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod ranker;
pub mod relation;
pub mod retrieval;
pub mod synth;
pub mod text;
pub mod train;
pub mod workflow;

pub use error::{Error, Result};
pub use par::Execution;
