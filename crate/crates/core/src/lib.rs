//! Building blocks for narrative incoherence benchmarks: corpus handling,
//! BM25 confounder retrieval, greedy-matching similarity, MSD/DSD instance
//! forging, frozen sentence embeddings and evaluation metrics.

pub mod corpus;
pub mod embedder;
pub mod error;
pub mod evalkit;
pub mod forge;
pub mod retrieval;
pub mod seed;
pub mod similarity;

pub use corpus::{Narrative, Sentence};
pub use error::{Error, Result};
pub use forge::{Instance, Mode};
