//! Instance forging: missing-sentence (MSD) and discordant-sentence (DSD)
//! corruption of corpus segments, plus token noising and long-document
//! window extraction.
//!
//! Positions, slots and `phi` entries are 1-based throughout. Slot `k` is the
//! boundary between observed sentences `k` and `k + 1`.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Narrative, Sentence};
use crate::error::{Error, Result};
use crate::retrieval::{Bm25Index, Bm25Params, SentenceId};
use crate::seed::{rng_for, sha256_hex, Rng};
use crate::similarity::{bertscore_f, TokenEmbeddingProvider};

pub const MASK_TOKEN: &str = "[MASK]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Msd,
    Dsd,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Msd => "msd",
            Mode::Dsd => "dsd",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "msd" => Ok(Mode::Msd),
            "dsd" => Ok(Mode::Dsd),
            other => Err(Error::invalid(format!("unknown mode {other:?} (expected msd or dsd)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeConfig {
    pub mode: Mode,
    pub segment_len: usize,
    pub corrupt_count: usize,
    pub bm25_top_k: usize,
    pub tau: f64,
    pub seed: u64,
    pub no_boundary_removal: bool,
    pub no_adjacent_removal: bool,
    pub exclude_self_narrative: bool,
    /// Applies the MSD boundary/adjacency constraints to DSD replacements.
    pub constrain_replacements: bool,
}

impl ForgeConfig {
    pub fn new(mode: Mode, segment_len: usize, corrupt_count: usize, seed: u64) -> Self {
        Self {
            mode,
            segment_len,
            corrupt_count,
            bm25_top_k: 100,
            tau: 0.7,
            seed,
            no_boundary_removal: true,
            no_adjacent_removal: true,
            exclude_self_narrative: true,
            constrain_replacements: false,
        }
    }

    /// Five-sentence stories with one corruption.
    pub fn timetravel(mode: Mode, seed: u64) -> Self {
        Self::new(mode, 5, 1, seed)
    }

    /// Eight-sentence review segments with two corruptions.
    pub fn tripadvisor(mode: Mode, seed: u64) -> Self {
        Self::new(mode, 8, 2, seed)
    }

    pub fn removal_constraints(&self) -> Constraints {
        Constraints { no_boundary: self.no_boundary_removal, no_adjacent: self.no_adjacent_removal }
    }

    pub fn validate(&self) -> Result<()> {
        let (s, k) = (self.segment_len, self.corrupt_count);
        if s < 2 || k < 1 || k >= s {
            return Err(Error::invalid(format!("need 1 <= corrupt_count < segment_len, got K={k}, S={s}")));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::invalid(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if self.bm25_top_k < 1 {
            return Err(Error::invalid("bm25_top_k must be >= 1"));
        }
        let needs_constraints = self.mode == Mode::Msd || self.constrain_replacements;
        if needs_constraints && count_valid_subsets(s, k, self.removal_constraints()) == 0 {
            return Err(Error::Infeasible(format!(
                "no valid choice of {k} positions in a segment of {s} under the removal constraints"
            )));
        }
        Ok(())
    }

    pub fn corruption_rate(&self) -> f64 {
        self.corrupt_count as f64 / self.segment_len as f64
    }

    /// Canonical `key=value` rendering, one per line, sorted by key.
    pub fn canonical(&self) -> String {
        let mut kv = vec![
            ("bm25_top_k", self.bm25_top_k.to_string()),
            ("constrain_replacements", self.constrain_replacements.to_string()),
            ("corrupt_count", self.corrupt_count.to_string()),
            ("exclude_self_narrative", self.exclude_self_narrative.to_string()),
            ("mode", self.mode.to_string()),
            ("no_adjacent_removal", self.no_adjacent_removal.to_string()),
            ("no_boundary_removal", self.no_boundary_removal.to_string()),
            ("seed", self.seed.to_string()),
            ("segment_len", self.segment_len.to_string()),
            ("tau", self.tau.to_string()),
        ];
        kv.sort();
        kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Constraints {
    pub no_boundary: bool,
    pub no_adjacent: bool,
}

impl Constraints {
    pub const NONE: Constraints = Constraints { no_boundary: false, no_adjacent: false };
    pub const MSD: Constraints = Constraints { no_boundary: true, no_adjacent: true };
}

/// Uniformly random contiguous window of `len` sentences, `None` when the
/// narrative is too short.
pub fn sample_segment<'a>(narrative: &'a Narrative, len: usize, rng: &mut Rng) -> Option<(usize, &'a [Sentence])> {
    let n = narrative.sentences.len();
    if len < 1 || n < len {
        return None;
    }
    let start = rng.random_range(0..=n - len);
    Some((start, &narrative.sentences[start..start + len]))
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn candidate_span(s: usize, c: Constraints) -> (usize, usize) {
    if c.no_boundary {
        (2, s.saturating_sub(1))
    } else {
        (1, s)
    }
}

/// Number of admissible position sets.
pub fn count_valid_subsets(s: usize, k: usize, c: Constraints) -> u128 {
    let (lo, hi) = candidate_span(s, c);
    if hi < lo {
        return (k == 0) as u128;
    }
    let m = hi - lo + 1;
    if c.no_adjacent {
        if k == 0 {
            return 1;
        }
        if m + 1 < k {
            return 0;
        }
        binomial(m + 1 - k, k)
    } else {
        binomial(m, k)
    }
}

/// Uniform K-subset of the admissible positions, sorted, 1-based.
///
/// Non-adjacent sets are drawn through the standard bijection: a sorted
/// K-subset `c_1 < ... < c_K` of `m - K + 1` slots maps to `c_i + i`, which
/// has pairwise gaps of at least two.
pub fn choose_positions(s: usize, k: usize, rng: &mut Rng, c: Constraints) -> Result<Vec<usize>> {
    if count_valid_subsets(s, k, c) == 0 {
        return Err(Error::Infeasible(format!(
            "cannot choose {k} of {s} positions (no_boundary={}, no_adjacent={})",
            c.no_boundary, c.no_adjacent
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let (lo, hi) = candidate_span(s, c);
    let m = hi - lo + 1;
    let pool = if c.no_adjacent { m + 1 - k } else { m };
    let mut picks: Vec<usize> = index::sample(rng, pool, k).into_vec();
    picks.sort_unstable();
    Ok(picks
        .into_iter()
        .enumerate()
        .map(|(i, p)| lo + p + if c.no_adjacent { i } else { 0 })
        .collect())
}

/// MSD removal positions: interior and pairwise non-adjacent by default.
pub fn choose_removals(s: usize, k: usize, rng: &mut Rng, c: Constraints) -> Result<Vec<usize>> {
    choose_positions(s, k, rng, c)
}

/// DSD replacement positions: any K-subset unless `constrained`.
pub fn choose_replacements(s: usize, k: usize, rng: &mut Rng, constrained: bool) -> Result<Vec<usize>> {
    if k < 1 || k > s {
        return Err(Error::invalid(format!("need 1 <= K <= S, got K={k}, S={s}")));
    }
    choose_positions(s, k, rng, if constrained { Constraints::MSD } else { Constraints::NONE })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsdInstance {
    pub id: String,
    pub source: String,
    #[serde(rename = "sentences")]
    pub observed: Vec<Sentence>,
    pub slot_labels: Vec<u8>,
    #[serde(with = "keyed")]
    /// Removed sentences keyed by slot. Slot 0 and slot N only occur when
    /// boundary removal is allowed.
    pub gap_targets: BTreeMap<usize, Vec<Sentence>>,
    pub phi: Vec<usize>,
}

impl MsdInstance {
    /// Interleaves gap targets back between the observed sentences.
    pub fn reconstruct(&self) -> Vec<Sentence> {
        let mut out = Vec::new();
        if let Some(g) = self.gap_targets.get(&0) {
            out.extend(g.iter().cloned());
        }
        for (k, s) in self.observed.iter().enumerate() {
            out.push(s.clone());
            if let Some(g) = self.gap_targets.get(&(k + 1)) {
                out.extend(g.iter().cloned());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confounder {
    pub sid: SentenceId,
    /// 1-based BM25 rank among the retrieved candidates.
    pub rank: usize,
    pub sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsdInstance {
    pub id: String,
    pub source: String,
    pub sentences: Vec<Sentence>,
    pub labels: Vec<u8>,
    #[serde(with = "keyed")]
    pub originals: BTreeMap<usize, Sentence>,
    #[serde(with = "keyed")]
    pub confounders: BTreeMap<usize, Confounder>,
}

impl DsdInstance {
    pub fn reconstruct(&self) -> Vec<Sentence> {
        self.sentences
            .iter()
            .enumerate()
            .map(|(i, s)| self.originals.get(&(i + 1)).unwrap_or(s).clone())
            .collect()
    }
}

/// Integer-keyed maps stored with string keys. Needed because the tagged
/// `Instance` enum buffers its fields, which loses serde_json's key coercion.
mod keyed {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<V: Serialize, S: Serializer>(m: &BTreeMap<usize, V>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(m.iter().map(|(k, v)| (k.to_string(), v)))
    }

    pub fn deserialize<'de, V: Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, V>, D::Error> {
        BTreeMap::<String, V>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(|_| D::Error::custom(format!("bad position key {k:?}"))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Instance {
    Msd(MsdInstance),
    Dsd(DsdInstance),
}

impl Instance {
    pub fn id(&self) -> &str {
        match self {
            Instance::Msd(m) => &m.id,
            Instance::Dsd(d) => &d.id,
        }
    }

    pub fn source(&self) -> &str {
        match self {
            Instance::Msd(m) => &m.source,
            Instance::Dsd(d) => &d.source,
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            Instance::Msd(_) => Mode::Msd,
            Instance::Dsd(_) => Mode::Dsd,
        }
    }

    /// The sentences as presented to a detector.
    pub fn sentences(&self) -> &[Sentence] {
        match self {
            Instance::Msd(m) => &m.observed,
            Instance::Dsd(d) => &d.sentences,
        }
    }

    /// Gold labels: one per slot (MSD) or per sentence (DSD).
    pub fn labels(&self) -> &[u8] {
        match self {
            Instance::Msd(m) => &m.slot_labels,
            Instance::Dsd(d) => &d.labels,
        }
    }

    pub fn positive_count(&self) -> usize {
        self.labels().iter().filter(|&&y| y == 1).count()
    }

    /// Ground-truth sentences for each positively labeled position, keyed by
    /// 0-based label index.
    pub fn sm_targets(&self) -> Vec<(usize, Vec<&Sentence>)> {
        match self {
            Instance::Msd(m) => m
                .gap_targets
                .iter()
                .filter(|(k, _)| **k >= 1 && **k <= m.slot_labels.len())
                .map(|(k, v)| (k - 1, v.iter().collect()))
                .collect(),
            Instance::Dsd(d) => d.originals.iter().map(|(k, s)| (k - 1, vec![s])).collect(),
        }
    }

    pub fn reconstruct(&self) -> Vec<Sentence> {
        match self {
            Instance::Msd(m) => m.reconstruct(),
            Instance::Dsd(d) => d.reconstruct(),
        }
    }
}

/// Removes the given 1-based positions from a segment.
pub fn forge_msd(id: &str, source: &str, segment: &[Sentence], removals: &[usize]) -> MsdInstance {
    let removed: HashSet<usize> = removals.iter().copied().collect();
    let phi: Vec<usize> = (1..=segment.len()).filter(|p| !removed.contains(p)).collect();
    let observed: Vec<Sentence> = phi.iter().map(|&p| segment[p - 1].clone()).collect();
    let slot_labels: Vec<u8> = phi.windows(2).map(|w| (w[1] - w[0] > 1) as u8).collect();

    let mut gap_targets: BTreeMap<usize, Vec<Sentence>> = BTreeMap::new();
    let mut sorted: Vec<usize> = removed.into_iter().collect();
    sorted.sort_unstable();
    for p in sorted {
        // number of observed sentences before p is the slot it opens
        let slot = phi.partition_point(|&q| q < p);
        gap_targets.entry(slot).or_default().push(segment[p - 1].clone());
    }
    MsdInstance { id: id.to_string(), source: source.to_string(), observed, slot_labels, gap_targets, phi }
}

/// Index and vectors used to mine confounders.
#[derive(Clone, Copy)]
pub struct ConfounderSearch<'a> {
    pub index: &'a Bm25Index,
    pub provider: &'a TokenEmbeddingProvider,
    pub params: Bm25Params,
}

/// First BM25 candidate (in rank order, within `top_k`) whose similarity
/// with `x` is below `tau` and whose text differs from `x`.
pub fn find_confounder(
    x: &Sentence,
    exclusions: &HashSet<SentenceId>,
    search: &ConfounderSearch<'_>,
    top_k: usize,
    tau: f64,
) -> Result<Option<Confounder>> {
    let ranked = search.index.top_k(&x.tokens, top_k, &search.params, exclusions);
    for (rank0, (sid, _)) in ranked.into_iter().enumerate() {
        let cand = search.index.sentence(sid)?;
        if cand.text == x.text {
            continue;
        }
        let sim = bertscore_f(&x.tokens, &cand.tokens, search.provider)?;
        if sim < tau {
            return Ok(Some(Confounder { sid, rank: rank0 + 1, sim }));
        }
    }
    Ok(None)
}

/// Replaces each 1-based position with a mined confounder. `None` when any
/// position has no qualifying candidate.
pub fn forge_dsd(
    id: &str,
    narrative_id: &str,
    segment_start: usize,
    segment: &[Sentence],
    positions: &[usize],
    search: &ConfounderSearch<'_>,
    cfg: &ForgeConfig,
) -> Result<Option<DsdInstance>> {
    let mut base: HashSet<SentenceId> = HashSet::new();
    if cfg.exclude_self_narrative {
        if let Some(r) = search.index.narrative_range(narrative_id) {
            base.extend(r.map(SentenceId));
        }
    }
    let mut sentences = segment.to_vec();
    let mut labels = vec![0u8; segment.len()];
    let mut originals = BTreeMap::new();
    let mut confounders = BTreeMap::new();
    let mut chosen: HashSet<SentenceId> = HashSet::new();
    for &p in positions {
        let x = &segment[p - 1];
        let mut ex = base.clone();
        if let Some(own) = search.index.sentence_id(narrative_id, segment_start + p - 1) {
            ex.insert(own);
        }
        ex.extend(chosen.iter().copied());
        let Some(c) = find_confounder(x, &ex, search, cfg.bm25_top_k, cfg.tau)? else {
            return Ok(None);
        };
        chosen.insert(c.sid);
        sentences[p - 1] = search.index.sentence(c.sid)?.clone();
        labels[p - 1] = 1;
        originals.insert(p, x.clone());
        confounders.insert(p, c);
    }
    Ok(Some(DsdInstance {
        id: id.to_string(),
        source: narrative_id.to_string(),
        sentences,
        labels,
        originals,
        confounders,
    }))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgeCounts {
    pub narratives: usize,
    pub attempted: usize,
    pub emitted: usize,
    pub skipped_too_short: usize,
    pub skipped_no_confounder: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeManifest {
    pub config: ForgeConfig,
    pub config_hash: String,
    pub corpus_hash: String,
    pub corruption_rate: f64,
    /// Window length for long-document extraction, absent for per-narrative forging.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub window_len: Option<usize>,
    pub counts: ForgeCounts,
}

#[derive(Debug, Clone)]
pub struct ForgeOutput {
    pub instances: Vec<Instance>,
    pub manifest: ForgeManifest,
}

impl ForgeOutput {
    pub fn write_jsonl<W: Write>(&self, out: W) -> Result<()> {
        write_instances(out, &self.instances)
    }
}

pub fn write_instances<W: Write>(mut out: W, instances: &[Instance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_instances(path: impl AsRef<std::path::Path>) -> Result<Vec<Instance>> {
    use std::io::BufRead;
    let f = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

pub fn corpus_hash(corpus: &[Narrative]) -> String {
    let mut buf = Vec::new();
    crate::corpus::write_corpus(&mut buf, corpus).expect("writing to memory");
    sha256_hex(&buf)
}

enum Outcome {
    Emitted(Instance),
    TooShort,
    NoConfounder,
}

fn corrupt_segment(
    id: &str,
    narrative_id: &str,
    start: usize,
    segment: &[Sentence],
    rng: &mut Rng,
    cfg: &ForgeConfig,
    search: Option<&ConfounderSearch<'_>>,
) -> Result<Outcome> {
    match cfg.mode {
        Mode::Msd => {
            let pos = choose_removals(segment.len(), cfg.corrupt_count, rng, cfg.removal_constraints())?;
            Ok(Outcome::Emitted(Instance::Msd(forge_msd(id, narrative_id, segment, &pos))))
        }
        Mode::Dsd => {
            let search = search.ok_or_else(|| Error::invalid("DSD forging needs a confounder index"))?;
            let pos = choose_replacements(segment.len(), cfg.corrupt_count, rng, cfg.constrain_replacements)?;
            Ok(match forge_dsd(id, narrative_id, start, segment, &pos, search, cfg)? {
                Some(d) => Outcome::Emitted(Instance::Dsd(d)),
                None => Outcome::NoConfounder,
            })
        }
    }
}

fn collect(outcomes: Vec<Outcome>, counts: &mut ForgeCounts) -> Vec<Instance> {
    let mut instances = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Emitted(i) => {
                counts.attempted += 1;
                counts.emitted += 1;
                instances.push(i);
            }
            Outcome::TooShort => counts.skipped_too_short += 1,
            Outcome::NoConfounder => {
                counts.attempted += 1;
                counts.skipped_no_confounder += 1;
            }
        }
    }
    instances
}

/// One attempted instance per narrative. Each narrative draws from its own
/// stream seeded by `(cfg.seed, narrative id)`, so `parallel` never changes
/// the output.
pub fn forge_dataset(
    corpus: &[Narrative],
    cfg: &ForgeConfig,
    search: Option<&ConfounderSearch<'_>>,
    parallel: bool,
) -> Result<ForgeOutput> {
    cfg.validate()?;
    let one = |n: &Narrative| -> Result<Outcome> {
        let mut rng = rng_for(cfg.seed, &n.id);
        let Some((start, seg)) = sample_segment(n, cfg.segment_len, &mut rng) else {
            return Ok(Outcome::TooShort);
        };
        let id = format!("{}#{}", n.id, cfg.mode);
        corrupt_segment(&id, &n.id, start, seg, &mut rng, cfg, search)
    };
    let outcomes: Vec<Outcome> = if parallel {
        corpus.par_iter().map(one).collect::<Result<_>>()?
    } else {
        corpus.iter().map(one).collect::<Result<_>>()?
    };
    let mut counts = ForgeCounts { narratives: corpus.len(), ..Default::default() };
    let instances = collect(outcomes, &mut counts);
    Ok(ForgeOutput {
        instances,
        manifest: ForgeManifest {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            corpus_hash: corpus_hash(corpus),
            corruption_rate: cfg.corruption_rate(),
            window_len: None,
            counts,
        },
    })
}

/// Corruptions per window for a given rate.
pub fn window_corruptions(window_len: usize, rate: f64) -> usize {
    (rate * window_len as f64).round() as usize
}

/// Cuts every document into non-overlapping windows of `window_len`
/// sentences (a short tail is dropped) and corrupts `round(rate * len)`
/// positions per window through the mode's forging path.
pub fn make_pretrain_segments(
    corpus: &[Narrative],
    window_len: usize,
    rate: f64,
    base: &ForgeConfig,
    search: Option<&ConfounderSearch<'_>>,
    parallel: bool,
) -> Result<ForgeOutput> {
    let mut cfg = base.clone();
    cfg.segment_len = window_len;
    cfg.corrupt_count = window_corruptions(window_len, rate);
    cfg.validate()?;
    let jobs: Vec<(&Narrative, usize)> =
        corpus.iter().flat_map(|n| (0..n.sentences.len() / window_len).map(move |w| (n, w))).collect();
    let one = |(n, w): &(&Narrative, usize)| -> Result<Outcome> {
        let key = format!("{}/w{}", n.id, w);
        let mut rng = rng_for(cfg.seed, &key);
        let start = w * window_len;
        let seg = &n.sentences[start..start + window_len];
        corrupt_segment(&format!("{key}#{}", cfg.mode), &n.id, start, seg, &mut rng, &cfg, search)
    };
    let outcomes: Vec<Outcome> = if parallel {
        jobs.par_iter().map(one).collect::<Result<_>>()?
    } else {
        jobs.iter().map(one).collect::<Result<_>>()?
    };
    let mut counts = ForgeCounts { narratives: corpus.len(), ..Default::default() };
    counts.skipped_too_short = corpus.iter().filter(|n| n.sentences.len() < window_len).count();
    let instances = collect(outcomes, &mut counts);
    Ok(ForgeOutput {
        instances,
        manifest: ForgeManifest {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            corpus_hash: corpus_hash(corpus),
            corruption_rate: cfg.corruption_rate(),
            window_len: Some(window_len),
            counts,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseRatios {
    pub permutation: f64,
    pub mask: f64,
    pub random: f64,
}

impl Default for NoiseRatios {
    fn default() -> Self {
        Self { permutation: 0.2, mask: 0.2, random: 0.2 }
    }
}

/// The concrete edits a noising pass performs, in application order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoisePlan {
    /// Positions whose tokens are shuffled among themselves, sorted.
    pub permuted: Vec<usize>,
    /// `permuted[i]` receives the token originally at `sources[i]`.
    pub sources: Vec<usize>,
    pub masked: Vec<usize>,
    pub randomized: Vec<(usize, String)>,
}

fn ratio_count(ratio: f64, len: usize) -> usize {
    // guard ceil against representation error (0.2 * 15 = 3.0000000000000004)
    (((ratio * len as f64) - 1e-9).ceil().max(0.0) as usize).min(len)
}

pub fn plan_noise(len: usize, rng: &mut Rng, ratios: NoiseRatios, vocab: &[String]) -> Result<NoisePlan> {
    for r in [ratios.permutation, ratios.mask, ratios.random] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid(format!("noise ratio {r} outside [0, 1]")));
        }
    }
    let n_perm = ratio_count(ratios.permutation, len);
    let mut permuted = index::sample(rng, len, n_perm).into_vec();
    permuted.sort_unstable();
    let mut sources = permuted.clone();
    sources.shuffle(rng);

    let n_mask = ratio_count(ratios.mask, len);
    let mut masked = index::sample(rng, len, n_mask).into_vec();
    masked.sort_unstable();

    let free: Vec<usize> = (0..len).filter(|p| masked.binary_search(p).is_err()).collect();
    let n_rand = ratio_count(ratios.random, len).min(free.len());
    if n_rand > 0 && vocab.is_empty() {
        return Err(Error::invalid("random replacement needs a non-empty vocabulary"));
    }
    let mut picks = index::sample(rng, free.len(), n_rand).into_vec();
    picks.sort_unstable();
    let randomized = picks
        .into_iter()
        .map(|i| (free[i], vocab[rng.random_range(0..vocab.len())].clone()))
        .collect();
    Ok(NoisePlan { permuted, sources, masked, randomized })
}

pub fn apply_noise(tokens: &[String], plan: &NoisePlan) -> Vec<String> {
    let original = tokens.to_vec();
    let mut out = tokens.to_vec();
    for (&dst, &src) in plan.permuted.iter().zip(&plan.sources) {
        out[dst] = original[src].clone();
    }
    for &p in &plan.masked {
        out[p] = MASK_TOKEN.to_string();
    }
    for (p, t) in &plan.randomized {
        out[*p] = t.clone();
    }
    out
}

/// Permutation, then masking, then random replacement on disjoint positions.
pub fn noise_sentence(tokens: &[String], rng: &mut Rng, ratios: NoiseRatios, vocab: &[String]) -> Result<Vec<String>> {
    let plan = plan_noise(tokens.len(), rng, ratios, vocab)?;
    Ok(apply_noise(tokens, &plan))
}
