//! Retrieval decoding: the pool sentence whose embedding is closest to ĥ.

use incoforge_core::similarity::cosine;

use crate::error::{DetectorError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub id: u32,
    pub text: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub id: u32,
    pub text: String,
    pub cosine: f64,
}

/// Argmax cosine over the pool; equal scores go to the smaller id.
pub fn retrieve_sentence(hhat: &[f64], pool: &[PoolEntry]) -> Result<Retrieved> {
    let mut best: Option<(&PoolEntry, f64)> = None;
    for e in pool {
        let c = cosine(hhat, &e.embedding)?;
        let better = match best {
            None => true,
            Some((b, bc)) => c > bc || (c == bc && e.id < b.id),
        };
        if better {
            best = Some((e, c));
        }
    }
    best.map(|(e, c)| Retrieved { id: e.id, text: e.text.clone(), cosine: c }).ok_or(DetectorError::EmptyPool)
}
