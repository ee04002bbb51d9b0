//! Multi-hop retrieval-augmented question answering over a local corpus.

pub mod config;
pub mod corpus;
pub mod embedding;
pub mod fusion;
pub mod generation;
pub mod metrics;
pub mod multihop;
pub mod pipeline;
pub mod training;
pub mod vector_index;
