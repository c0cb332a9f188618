//! Static token vectors and greedy-matching (BERTScore-style) similarity.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, RwLock};

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed::{rng_from_seed, stable_hash64};

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), actual: v.len() });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

pub fn l2_normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    // already unit length: leave the bits alone so save/load is exact
    if (norm - 1.0).abs() > 1e-12 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(())
}

/// Seeded Gaussian vector for an arbitrary key, normalized to unit length.
pub fn hash_projection(seed: u64, key: &str, dim: usize) -> Vec<f64> {
    let mut rng = rng_from_seed(stable_hash64(&[&seed.to_le_bytes(), key.as_bytes()]));
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if l2_normalize(&mut v).is_ok() {
            return v;
        }
    }
}

#[derive(Debug, Clone)]
enum TokenSource {
    Table(HashMap<String, Arc<[f64]>>),
    HashProjection,
}

/// Unit-norm vectors for tokens. A loaded table serves known tokens; every
/// other token falls back to a seeded hash projection.
#[derive(Debug)]
pub struct TokenEmbeddingProvider {
    dim: usize,
    seed: u64,
    source: TokenSource,
    cache: RwLock<HashMap<String, Arc<[f64]>>>,
}

impl Clone for TokenEmbeddingProvider {
    fn clone(&self) -> Self {
        Self {
            dim: self.dim,
            seed: self.seed,
            source: self.source.clone(),
            cache: RwLock::new(HashMap::new()),
        }
    }
}

impl TokenEmbeddingProvider {
    pub fn hash_projection(dim: usize, seed: u64) -> Self {
        Self { dim, seed, source: TokenSource::HashProjection, cache: RwLock::new(HashMap::new()) }
    }

    /// Table-backed provider. Vectors are normalized on the way in.
    pub fn from_table(dim: usize, seed: u64, table: HashMap<String, Vec<f64>>) -> Result<Self> {
        let mut out = HashMap::with_capacity(table.len());
        for (tok, mut v) in table {
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: v.len() });
            }
            l2_normalize(&mut v)?;
            out.insert(tok, Arc::from(v));
        }
        Ok(Self { dim, seed, source: TokenSource::Table(out), cache: RwLock::new(HashMap::new()) })
    }

    /// Reads a `"<vocab_size> <dim>"` header followed by `"<token> <f1> ... <fdim>"` lines.
    pub fn load(path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let reader = BufReader::new(File::open(path.as_ref())?);
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse { line: 1, message: "missing header".into() })?;
        let header = header?;
        let mut parts = header.split_whitespace();
        let parse_usize = |s: Option<&str>| -> Result<usize> {
            s.and_then(|x| x.parse().ok())
                .ok_or(Error::Parse { line: 1, message: format!("bad header {header:?}") })
        };
        let count = parse_usize(parts.next())?;
        let dim = parse_usize(parts.next())?;
        let mut table = HashMap::with_capacity(count);
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let tok = fields.next().unwrap_or_default().to_string();
            let v = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
            if v.len() != dim {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected {dim} values, got {}", v.len()),
                });
            }
            table.insert(tok, v);
        }
        if table.len() != count {
            return Err(Error::Parse {
                line: 1,
                message: format!("header says {count} entries, file has {}", table.len()),
            });
        }
        Self::from_table(dim, seed, table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let TokenSource::Table(table) = &self.source else {
            return Err(Error::invalid("only table-backed providers can be saved"));
        };
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        writeln!(w, "{} {}", table.len(), self.dim)?;
        let mut keys: Vec<&String> = table.keys().collect();
        keys.sort();
        for k in keys {
            write!(w, "{k}")?;
            for x in table[k].iter() {
                write!(w, " {x}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_table(&self) -> bool {
        matches!(self.source, TokenSource::Table(_))
    }

    pub fn vector(&self, token: &str) -> Arc<[f64]> {
        if let TokenSource::Table(t) = &self.source {
            if let Some(v) = t.get(token) {
                return v.clone();
            }
        }
        if let Some(v) = self.cache.read().expect("cache lock").get(token) {
            return v.clone();
        }
        let v: Arc<[f64]> = Arc::from(hash_projection(self.seed, token, self.dim));
        self.cache.write().expect("cache lock").insert(token.to_string(), v.clone());
        v
    }

    /// Stable digest of everything that determines the vectors.
    pub fn checksum(&self) -> u64 {
        let mut parts: Vec<Vec<u8>> = vec![self.dim.to_le_bytes().to_vec(), self.seed.to_le_bytes().to_vec()];
        if let TokenSource::Table(t) = &self.source {
            let mut keys: Vec<&String> = t.keys().collect();
            keys.sort();
            for k in keys {
                parts.push(k.as_bytes().to_vec());
                parts.push(t[k].iter().flat_map(|x| x.to_le_bytes()).collect());
            }
        }
        let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
        stable_hash64(&refs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BertScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Greedy maximum-cosine matching in both directions, no idf weighting.
pub fn bertscore(x: &[String], y: &[String], provider: &TokenEmbeddingProvider) -> Result<BertScore> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyTokens);
    }
    let xv: Vec<_> = x.iter().map(|t| provider.vector(t)).collect();
    let yv: Vec<_> = y.iter().map(|t| provider.vector(t)).collect();
    let mut sims = vec![0.0; xv.len() * yv.len()];
    for (i, a) in xv.iter().enumerate() {
        for (j, b) in yv.iter().enumerate() {
            sims[i * yv.len() + j] = cosine(a, b)?;
        }
    }
    let precision = (0..xv.len())
        .map(|i| sims[i * yv.len()..(i + 1) * yv.len()].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / xv.len() as f64;
    let recall = (0..yv.len())
        .map(|j| (0..xv.len()).map(|i| sims[i * yv.len() + j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / yv.len() as f64;
    // the harmonic mean is only meaningful when P and R share a sign
    let f1 = if precision * recall <= 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(BertScore { precision, recall, f1 })
}

pub fn bertscore_f(x: &[String], y: &[String], provider: &TokenEmbeddingProvider) -> Result<f64> {
    bertscore(x, y, provider).map(|s| s.f1)
}
