//! BM25 retrieval over every sentence of a corpus.
//!
//! Each sentence is one document. Ids are assigned in corpus order, so the
//! sentences of a narrative occupy a contiguous id range.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::corpus::{Narrative, Sentence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SentenceId(pub u32);

impl std::fmt::Display for SentenceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self> {
        if !(k1 >= 0.0) || !(0.0..=1.0).contains(&b) {
            return Err(Error::invalid(format!("bm25 params out of range: k1={k1}, b={b}")));
        }
        Ok(Self { k1, b })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexOptions {
    pub remove_stopwords: bool,
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "if", "in", "into", "is",
    "it", "no", "not", "of", "on", "or", "such", "that", "the", "their", "then", "there",
    "these", "they", "this", "to", "was", "will", "with", "he", "she", "i", "we", "you", "his",
    "her", "had", "has", "have", "were", "been",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: SentenceId,
    pub tf: u32,
}

/// Where a sentence came from: narrative index in the corpus and 0-based
/// position inside that narrative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub narrative: usize,
    pub position: usize,
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    postings: HashMap<String, Vec<Posting>>,
    doc_len: Vec<u32>,
    avgdl: f64,
    provenance: Vec<Provenance>,
    narrative_ids: Vec<String>,
    narrative_starts: Vec<u32>,
    by_narrative: HashMap<String, usize>,
    sentences: Vec<Sentence>,
    options: IndexOptions,
}

impl Bm25Index {
    pub fn build(corpus: &[Narrative]) -> Result<Self> {
        Self::build_with(corpus, IndexOptions::default())
    }

    pub fn build_with(corpus: &[Narrative], options: IndexOptions) -> Result<Self> {
        let texts: Vec<(String, Vec<String>)> = corpus
            .iter()
            .map(|n| (n.id.clone(), n.sentences.iter().map(|s| s.text.clone()).collect()))
            .collect();
        Self::from_parts(texts, options, None)
    }

    fn from_parts(
        narratives: Vec<(String, Vec<String>)>,
        options: IndexOptions,
        postings: Option<HashMap<String, Vec<Posting>>>,
    ) -> Result<Self> {
        if narratives.iter().all(|(_, s)| s.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        let mut sentences = Vec::new();
        let mut provenance = Vec::new();
        let mut narrative_ids = Vec::with_capacity(narratives.len());
        let mut narrative_starts = Vec::with_capacity(narratives.len() + 1);
        let mut by_narrative = HashMap::new();
        for (ni, (id, texts)) in narratives.into_iter().enumerate() {
            narrative_starts.push(sentences.len() as u32);
            by_narrative.insert(id.clone(), ni);
            narrative_ids.push(id);
            for (pos, text) in texts.into_iter().enumerate() {
                sentences.push(Sentence::new(text));
                provenance.push(Provenance { narrative: ni, position: pos });
            }
        }
        narrative_starts.push(sentences.len() as u32);

        let doc_len: Vec<u32> =
            sentences.iter().map(|s| index_terms(&s.tokens, options).count() as u32).collect();
        let total: u64 = doc_len.iter().map(|&l| l as u64).sum();
        let avgdl = total as f64 / doc_len.len() as f64;

        let postings = postings.unwrap_or_else(|| {
            let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
            for (doc, s) in sentences.iter().enumerate() {
                let mut tf: HashMap<&str, u32> = HashMap::new();
                for t in index_terms(&s.tokens, options) {
                    *tf.entry(t).or_default() += 1;
                }
                for (t, n) in tf {
                    postings
                        .entry(t.to_string())
                        .or_default()
                        .push(Posting { doc: SentenceId(doc as u32), tf: n });
                }
            }
            for list in postings.values_mut() {
                list.sort_by_key(|p| p.doc);
            }
            postings
        });

        Ok(Self {
            postings,
            doc_len,
            avgdl,
            provenance,
            narrative_ids,
            narrative_starts,
            by_narrative,
            sentences,
            options,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.doc_len.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn options(&self) -> IndexOptions {
        self.options
    }

    pub fn doc_len(&self, doc: SentenceId) -> Result<u32> {
        self.doc_len.get(doc.0 as usize).copied().ok_or(Error::UnknownSentence(doc.0))
    }

    pub fn df(&self, term: &str) -> u32 {
        self.postings.get(term).map_or(0, |p| p.len() as u32)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn tf(&self, term: &str, doc: SentenceId) -> u32 {
        let list = self.postings(term);
        list.binary_search_by_key(&doc, |p| p.doc).map_or(0, |i| list[i].tf)
    }

    pub fn sentence(&self, doc: SentenceId) -> Result<&Sentence> {
        self.sentences.get(doc.0 as usize).ok_or(Error::UnknownSentence(doc.0))
    }

    pub fn provenance(&self, doc: SentenceId) -> Result<(&str, usize)> {
        let p = self.provenance.get(doc.0 as usize).ok_or(Error::UnknownSentence(doc.0))?;
        Ok((&self.narrative_ids[p.narrative], p.position))
    }

    /// Id range covering the sentences of a narrative.
    pub fn narrative_range(&self, narrative_id: &str) -> Option<Range<u32>> {
        let ni = *self.by_narrative.get(narrative_id)?;
        Some(self.narrative_starts[ni]..self.narrative_starts[ni + 1])
    }

    /// Id of the sentence at a 0-based position of a narrative.
    pub fn sentence_id(&self, narrative_id: &str, position: usize) -> Option<SentenceId> {
        let r = self.narrative_range(narrative_id)?;
        let id = r.start + position as u32;
        r.contains(&id).then_some(SentenceId(id))
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n_docs() as f64;
        let df = self.df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, term: &str, tf: u32, doc_len: u32, params: &Bm25Params) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - params.b + params.b * doc_len as f64 / self.avgdl;
        self.idf(term) * tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
    }

    /// BM25 score of one document. Repeated query terms count once.
    pub fn score(&self, query_tokens: &[String], doc: SentenceId, params: &Bm25Params) -> Result<f64> {
        let len = self.doc_len(doc)?;
        let mut total = 0.0;
        for term in query_terms(query_tokens, self.options) {
            let tf = self.tf(term, doc);
            if tf > 0 {
                total += self.term_weight(term, tf, len, params);
            }
        }
        Ok(total)
    }

    /// Highest-scoring documents for the query, descending, ties by ascending
    /// id. Documents sharing no term with the query are never returned.
    pub fn top_k(
        &self,
        query_tokens: &[String],
        k: usize,
        params: &Bm25Params,
        exclusions: &HashSet<SentenceId>,
    ) -> Vec<(SentenceId, f64)> {
        let mut acc: HashMap<SentenceId, f64> = HashMap::new();
        for term in query_terms(query_tokens, self.options) {
            for p in self.postings(term) {
                let w = self.term_weight(term, p.tf, self.doc_len[p.doc.0 as usize], params);
                *acc.entry(p.doc).or_insert(0.0) += w;
            }
        }
        let mut ranked: Vec<(SentenceId, f64)> =
            acc.into_iter().filter(|(d, _)| !exclusions.contains(d)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }

    /// `top_k` for a sentence already in the index; the sentence itself is
    /// always excluded.
    pub fn top_k_for(
        &self,
        query: SentenceId,
        k: usize,
        params: &Bm25Params,
        exclusions: &HashSet<SentenceId>,
    ) -> Result<Vec<(SentenceId, f64)>> {
        let tokens = &self.sentence(query)?.tokens;
        let mut ex = exclusions.clone();
        ex.insert(query);
        Ok(self.top_k(tokens, k, params, &ex))
    }

    /// Writes the binary cache file. `corpus_hash` ties the cache to the
    /// exact corpus bytes it was built from.
    pub fn save_cache(&self, path: impl AsRef<Path>, corpus_hash: &str) -> Result<()> {
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        w.write_all(CACHE_MAGIC)?;
        w.write_u32::<LittleEndian>(CACHE_VERSION)?;
        write_str(&mut w, corpus_hash)?;
        w.write_u64::<LittleEndian>(self.n_docs() as u64)?;
        w.write_f64::<LittleEndian>(self.avgdl)?;
        w.write_u8(self.options.remove_stopwords as u8)?;

        w.write_u64::<LittleEndian>(self.narrative_ids.len() as u64)?;
        for (ni, id) in self.narrative_ids.iter().enumerate() {
            write_str(&mut w, id)?;
            let r = self.narrative_starts[ni]..self.narrative_starts[ni + 1];
            w.write_u32::<LittleEndian>(r.len() as u32)?;
            for doc in r {
                write_str(&mut w, &self.sentences[doc as usize].text)?;
            }
        }

        let mut terms: Vec<&String> = self.postings.keys().collect();
        terms.sort();
        w.write_u64::<LittleEndian>(terms.len() as u64)?;
        for t in terms {
            write_str(&mut w, t)?;
            let list = &self.postings[t];
            w.write_u32::<LittleEndian>(list.len() as u32)?;
            for p in list {
                w.write_u32::<LittleEndian>(p.doc.0)?;
                w.write_u32::<LittleEndian>(p.tf)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a cache file. Returns `None` when the file was built from a
    /// different corpus or by another format version.
    pub fn load_cache(path: impl AsRef<Path>, corpus_hash: &str) -> Result<Option<Self>> {
        let mut r = BufReader::new(File::open(path.as_ref())?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC || r.read_u32::<LittleEndian>()? != CACHE_VERSION {
            return Ok(None);
        }
        if read_str(&mut r)? != corpus_hash {
            return Ok(None);
        }
        let n_docs = r.read_u64::<LittleEndian>()? as usize;
        let avgdl = r.read_f64::<LittleEndian>()?;
        let options = IndexOptions { remove_stopwords: r.read_u8()? != 0 };

        let n_narr = r.read_u64::<LittleEndian>()? as usize;
        let mut narratives = Vec::with_capacity(n_narr);
        for _ in 0..n_narr {
            let id = read_str(&mut r)?;
            let n = r.read_u32::<LittleEndian>()? as usize;
            let texts = (0..n).map(|_| read_str(&mut r)).collect::<Result<Vec<_>>>()?;
            narratives.push((id, texts));
        }
        let n_terms = r.read_u64::<LittleEndian>()? as usize;
        let mut postings = HashMap::with_capacity(n_terms);
        for _ in 0..n_terms {
            let t = read_str(&mut r)?;
            let n = r.read_u32::<LittleEndian>()? as usize;
            let mut list = Vec::with_capacity(n);
            for _ in 0..n {
                let doc = SentenceId(r.read_u32::<LittleEndian>()?);
                let tf = r.read_u32::<LittleEndian>()?;
                list.push(Posting { doc, tf });
            }
            postings.insert(t, list);
        }
        let index = Self::from_parts(narratives, options, Some(postings))?;
        if index.n_docs() != n_docs || index.avgdl.to_bits() != avgdl.to_bits() {
            return Err(Error::invalid("index cache header disagrees with its body"));
        }
        Ok(Some(index))
    }
}

const CACHE_MAGIC: &[u8; 8] = b"IFBM25\0\0";
const CACHE_VERSION: u32 = 1;

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::invalid(format!("cache string: {e}")))
}

fn index_terms<'a>(tokens: &'a [String], options: IndexOptions) -> impl Iterator<Item = &'a str> {
    tokens
        .iter()
        .map(String::as_str)
        .filter(move |t| !options.remove_stopwords || !STOPWORDS.contains(t))
}

/// Distinct query terms in first-occurrence order.
fn query_terms(tokens: &[String], options: IndexOptions) -> Vec<&str> {
    let mut seen = HashSet::new();
    index_terms(tokens, options).filter(|t| seen.insert(*t)).collect()
}
