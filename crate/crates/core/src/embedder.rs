//! Frozen sentence embeddings for the sentence-level detector.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::seed::stable_hash64;
use crate::similarity::{hash_projection, l2_normalize, TokenEmbeddingProvider};

/// Unit-norm sentence vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding(pub Vec<f64>);

impl SentenceEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Serializable description of a provider, stored next to trained models so
/// inference rebuilds the same embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProviderSpec {
    HashProjection { dim: usize, seed: u64 },
    MeanOfTokens { dim: usize, seed: u64, token_vectors: Option<String> },
    Precomputed { dim: usize, seed: u64, table: String },
}

impl ProviderSpec {
    pub fn build(&self) -> Result<EmbeddingProvider> {
        match self {
            ProviderSpec::HashProjection { dim, seed } => Ok(EmbeddingProvider::hash_projection(*dim, *seed)),
            ProviderSpec::MeanOfTokens { dim, seed, token_vectors } => {
                let tokens = match token_vectors {
                    Some(path) => TokenEmbeddingProvider::load(path, *seed)?,
                    None => TokenEmbeddingProvider::hash_projection(*dim, *seed),
                };
                EmbeddingProvider::mean_of_tokens(*dim, tokens)
            }
            ProviderSpec::Precomputed { dim, seed, table } => {
                let p = EmbeddingProvider::import_table(table, *seed)?;
                if p.dim() != *dim {
                    return Err(Error::DimensionMismatch { expected: *dim, actual: p.dim() });
                }
                Ok(p)
            }
        }
    }
}

#[derive(Debug)]
enum Backing {
    HashProjection { seed: u64 },
    MeanOfTokens(TokenEmbeddingProvider),
    Precomputed { table: HashMap<String, Vec<f64>>, seed: u64, misses: AtomicU64 },
}

#[derive(Debug)]
pub struct EmbeddingProvider {
    dim: usize,
    backing: Backing,
}

impl EmbeddingProvider {
    /// One seeded random unit vector per distinct sentence text.
    pub fn hash_projection(dim: usize, seed: u64) -> Self {
        Self { dim, backing: Backing::HashProjection { seed } }
    }

    /// Normalized average of the token vectors.
    pub fn mean_of_tokens(dim: usize, tokens: TokenEmbeddingProvider) -> Result<Self> {
        if tokens.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: tokens.dim() });
        }
        Ok(Self { dim, backing: Backing::MeanOfTokens(tokens) })
    }

    /// Exact-text lookup table; misses fall back to a hash projection and are counted.
    pub fn precomputed(dim: usize, seed: u64, table: HashMap<String, Vec<f64>>) -> Result<Self> {
        let mut norm = HashMap::with_capacity(table.len());
        for (k, mut v) in table {
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: v.len() });
            }
            l2_normalize(&mut v)?;
            norm.insert(k, v);
        }
        Ok(Self { dim, backing: Backing::Precomputed { table: norm, seed, misses: AtomicU64::new(0) } })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &'static str {
        match self.backing {
            Backing::HashProjection { .. } => "hash-projection",
            Backing::MeanOfTokens(_) => "mean-of-token-vectors",
            Backing::Precomputed { .. } => "precomputed-table",
        }
    }

    pub fn misses(&self) -> u64 {
        match &self.backing {
            Backing::Precomputed { misses, .. } => misses.load(Ordering::Relaxed),
            _ => 0,
        }
    }

    pub fn embed(&self, sentence: &Sentence) -> Result<SentenceEmbedding> {
        let v = match &self.backing {
            Backing::HashProjection { seed } => hash_projection(*seed, &sentence.text, self.dim),
            Backing::MeanOfTokens(tokens) => {
                if sentence.tokens.is_empty() {
                    return Err(Error::EmptyTokens);
                }
                let mut acc = vec![0.0; self.dim];
                for t in &sentence.tokens {
                    for (a, x) in acc.iter_mut().zip(tokens.vector(t).iter()) {
                        *a += x;
                    }
                }
                let n = sentence.tokens.len() as f64;
                acc.iter_mut().for_each(|a| *a /= n);
                if l2_normalize(&mut acc).is_err() {
                    // tokens cancelled exactly; fall back to the text projection
                    acc = hash_projection(tokens.seed(), &sentence.text, self.dim);
                }
                acc
            }
            Backing::Precomputed { table, seed, misses } => match table.get(&sentence.text) {
                Some(v) => v.clone(),
                None => {
                    misses.fetch_add(1, Ordering::Relaxed);
                    hash_projection(*seed, &sentence.text, self.dim)
                }
            },
        };
        Ok(SentenceEmbedding(v))
    }

    pub fn embed_all<'a>(&self, sentences: impl IntoIterator<Item = &'a Sentence>) -> Result<Vec<SentenceEmbedding>> {
        sentences.into_iter().map(|s| self.embed(s)).collect()
    }

    /// Reads `"<count> <dim>"` then `"<base64 text>\t<f1> ... <fdim>"` lines.
    pub fn import_table(path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let reader = BufReader::new(File::open(path.as_ref())?);
        let mut lines = reader.lines();
        let header = lines.next().ok_or(Error::Parse { line: 1, message: "missing header".into() })??;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(|x| x.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse { line: 1, message: format!("bad header {header:?}") })?;
        let [count, dim] = nums[..] else {
            return Err(Error::Parse { line: 1, message: format!("bad header {header:?}") });
        };
        let mut table = HashMap::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |m: String| Error::Parse { line: line_no, message: m };
            let (key, values) = line.split_once('\t').ok_or_else(|| bad("missing tab".into()))?;
            let text = B64
                .decode(key)
                .map_err(|e| bad(e.to_string()))
                .and_then(|b| String::from_utf8(b).map_err(|e| bad(e.to_string())))?;
            let v: Vec<f64> = values
                .split_whitespace()
                .map(|x| x.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: v.len() });
            }
            table.insert(text, v);
        }
        if table.len() != count {
            return Err(Error::Parse {
                line: 1,
                message: format!("header says {count} entries, file has {}", table.len()),
            });
        }
        Self::precomputed(dim, seed, table)
    }

    /// Writes the embeddings of `sentences` in the import format.
    pub fn export_table<'a>(
        &self,
        path: impl AsRef<Path>,
        sentences: impl IntoIterator<Item = &'a Sentence>,
    ) -> Result<usize> {
        let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for s in sentences {
            if seen.insert(s.text.clone()) {
                rows.push((s.text.clone(), self.embed(s)?.0));
            }
        }
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        writeln!(w, "{} {}", rows.len(), self.dim)?;
        for (text, v) in &rows {
            write!(w, "{}\t", B64.encode(text.as_bytes()))?;
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{}", vals.join(" "))?;
        }
        w.flush()?;
        Ok(rows.len())
    }

    /// Digest of the provider's embedding-relevant state. Miss counters are
    /// bookkeeping and excluded.
    pub fn checksum(&self) -> u64 {
        match &self.backing {
            Backing::HashProjection { seed } => {
                stable_hash64(&[b"hash", &self.dim.to_le_bytes(), &seed.to_le_bytes()])
            }
            Backing::MeanOfTokens(t) => stable_hash64(&[b"mean", &t.checksum().to_le_bytes()]),
            Backing::Precomputed { table, seed, .. } => {
                let mut keys: Vec<&String> = table.keys().collect();
                keys.sort();
                let mut buf = Vec::new();
                for k in keys {
                    buf.extend_from_slice(k.as_bytes());
                    buf.push(0);
                    for x in &table[k] {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
                stable_hash64(&[b"table", &self.dim.to_le_bytes(), &seed.to_le_bytes(), &buf])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_tokens() -> TokenEmbeddingProvider {
        let mut t = HashMap::new();
        t.insert("we".to_string(), vec![1.0, 0.0]);
        t.insert("left".to_string(), vec![0.0, 1.0]);
        TokenEmbeddingProvider::from_table(2, 1, t).unwrap()
    }

    #[test]
    fn embedding_is_deterministic_and_unit() {
        for p in [
            EmbeddingProvider::hash_projection(32, 4),
            EmbeddingProvider::mean_of_tokens(32, TokenEmbeddingProvider::hash_projection(32, 4)).unwrap(),
        ] {
            let s = Sentence::new("The river rose.");
            let a = p.embed(&s).unwrap();
            assert_eq!(a, p.embed(&s).unwrap());
            let norm: f64 = a.0.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_kind_hand_arithmetic() {
        let p = EmbeddingProvider::mean_of_tokens(2, table_tokens()).unwrap();
        assert_eq!(p.embed(&Sentence::new("we")).unwrap().0, vec![1.0, 0.0]);
        let e = p.embed(&Sentence::new("We left")).unwrap();
        let r = 0.5f64.sqrt();
        assert!((e.0[0] - r).abs() < 1e-12 && (e.0[1] - r).abs() < 1e-12);
        // equal token lists give equal embeddings regardless of casing
        assert_eq!(p.embed(&Sentence::new("WE LEFT")).unwrap(), e);
        assert!(EmbeddingProvider::mean_of_tokens(3, table_tokens()).is_err());
    }

    #[test]
    fn table_import_lookup_and_misses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        let a = B64.encode("It rained.");
        let b = B64.encode("We left.");
        std::fs::write(&path, format!("2 2\n{a}\t3 4\n{b}\t0 2\n")).unwrap();
        let p = EmbeddingProvider::import_table(&path, 0).unwrap();
        assert_eq!(p.embed(&Sentence::new("It rained.")).unwrap().0, vec![0.6, 0.8]);
        assert_eq!(p.embed(&Sentence::new("We left.")).unwrap().0, vec![0.0, 1.0]);
        assert_eq!(p.misses(), 0);
        let miss = p.embed(&Sentence::new("Unknown.")).unwrap();
        assert_eq!(miss.dim(), 2);
        assert_eq!(p.misses(), 1);

        let out = dir.path().join("re.tsv");
        let sents = [Sentence::new("It rained."), Sentence::new("We left.")];
        p.export_table(&out, sents.iter()).unwrap();
        let q = EmbeddingProvider::import_table(&out, 0).unwrap();
        assert_eq!(p.checksum(), q.checksum());
        for s in &sents {
            assert_eq!(p.embed(s).unwrap(), q.embed(s).unwrap());
        }

        std::fs::write(&path, format!("1 3\n{a}\t3 4\n")).unwrap();
        assert!(matches!(
            EmbeddingProvider::import_table(&path, 0),
            Err(Error::DimensionMismatch { .. })
        ));
        std::fs::write(&path, "1 2\n!!!\t1 2\n").unwrap();
        assert!(matches!(EmbeddingProvider::import_table(&path, 0), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn spec_round_trip_builds_same_provider() {
        let spec = ProviderSpec::MeanOfTokens { dim: 16, seed: 3, token_vectors: None };
        let json = serde_json::to_string(&spec).unwrap();
        let back: ProviderSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec.build().unwrap().checksum(), back.build().unwrap().checksum());
    }
}
