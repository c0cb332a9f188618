//! Evaluation metrics: thresholded classification scores, ROC/AUC, and the
//! reference-based generation metrics (BLEU, NIST, METEOR without synonym
//! tables) plus lexical diversity.

use std::collections::{BTreeMap, HashMap};

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub score: f64,
    pub gold: u8,
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance: String,
    pub position: usize,
    pub score: f64,
    pub gold: u8,
}

/// One line of a generation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub instance: String,
    pub position: usize,
    pub hyp: String,
    #[serde(rename = "ref")]
    pub reference: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    /// Set when nothing was predicted positive and precision was defined as 0.
    pub precision_undefined: bool,
}

impl ClassificationReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let total = (tp + fp + fn_ + tn) as f64;
        let precision_undefined = tp + fp == 0;
        let precision = if precision_undefined { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self {
            accuracy: if total == 0.0 { 0.0 } else { (tp + tn) as f64 / total },
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
            precision_undefined,
        }
    }
}

/// Predictions with `score >= threshold` count as positive.
pub fn classification_report(preds: &[Prediction], threshold: f64) -> Result<ClassificationReport> {
    if preds.is_empty() {
        return Err(Error::invalid("no predictions"));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for p in preds {
        match (p.score >= threshold, p.gold == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(ClassificationReport::from_counts(tp, fp, fn_, tn))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub auc: f64,
    pub roc: Vec<RocPoint>,
}

fn class_counts(preds: &[Prediction]) -> Result<(usize, usize)> {
    let pos = preds.iter().filter(|p| p.gold == 1).count();
    let neg = preds.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate(format!("AUC needs both classes (positives={pos}, negatives={neg})")));
    }
    Ok((pos, neg))
}

/// Mann-Whitney statistic with midranks for ties: the fraction of
/// (positive, negative) pairs ordered correctly, ties counting one half.
pub fn auc_rank(preds: &[Prediction]) -> Result<f64> {
    let (pos, neg) = class_counts(preds)?;
    let mut sorted: Vec<&Prediction> = preds.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].score == sorted[i].score {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = sorted[i..=j].iter().filter(|p| p.gold == 1).count();
        rank_sum_pos += midrank * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// ROC curve over every distinct score threshold, from (0, 0) to (1, 1).
pub fn roc_curve(preds: &[Prediction]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = class_counts(preds)?;
    let mut sorted: Vec<&Prediction> = preds.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].gold == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { threshold: t, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    Ok(points)
}

pub fn trapezoid_area(roc: &[RocPoint]) -> f64 {
    roc.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

pub fn auc(preds: &[Prediction]) -> Result<AucResult> {
    Ok(AucResult { auc: auc_rank(preds)?, roc: roc_curve(preds)? })
}

/// AUC per position index, for positions whose predictions contain both classes.
pub fn auc_by_position(records: &[PredictionRecord]) -> BTreeMap<usize, f64> {
    let mut groups: BTreeMap<usize, Vec<Prediction>> = BTreeMap::new();
    for r in records {
        groups.entry(r.position).or_default().push(Prediction { score: r.score, gold: r.gold });
    }
    groups.into_iter().filter_map(|(k, v)| auc_rank(&v).ok().map(|a| (k, a))).collect()
}

fn ngrams<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut m = HashMap::new();
    if n == 0 || tokens.len() < n {
        return m;
    }
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

fn check_corpus(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BleuSmoothing {
    #[default]
    None,
    /// Adds one to matches and totals for orders above one.
    AddOne,
}

/// Corpus BLEU in percent, single reference per hypothesis.
pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<String>], max_n: usize) -> Result<f64> {
    bleu_with(hyps, refs, max_n, BleuSmoothing::None)
}

pub fn bleu_with(hyps: &[Vec<String>], refs: &[Vec<String>], max_n: usize, smoothing: BleuSmoothing) -> Result<f64> {
    check_corpus(hyps, refs)?;
    if max_n == 0 {
        return Err(Error::invalid("max_n must be >= 1"));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hc = ngrams(h, n);
            let rc = ngrams(rf, n);
            totals[n - 1] += hc.values().sum::<usize>();
            matches[n - 1] += hc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let (m, t) = match smoothing {
            BleuSmoothing::AddOne if n > 0 => (matches[n] as f64 + 1.0, totals[n] as f64 + 1.0),
            _ => (matches[n] as f64, totals[n] as f64),
        };
        if m == 0.0 || t == 0.0 {
            return Ok(0.0);
        }
        log_sum += (m / t).ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

/// Brevity exponent making the penalty 0.5 at a length ratio of 2/3.
pub fn nist_beta() -> f64 {
    0.5f64.ln() / (1.5f64.ln()).powi(2)
}

/// Corpus NIST with information weights from reference statistics.
pub fn nist(hyps: &[Vec<String>], refs: &[Vec<String>], max_n: usize) -> Result<f64> {
    check_corpus(hyps, refs)?;
    if max_n == 0 {
        return Err(Error::invalid("max_n must be >= 1"));
    }
    let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
    let mut ref_words = 0usize;
    for rf in refs {
        ref_words += rf.len();
        for n in 1..=max_n {
            for (g, k) in ngrams(rf, n) {
                *ref_counts.entry(g).or_insert(0) += k;
            }
        }
    }
    let info = |g: &[String]| -> f64 {
        let num = if g.len() == 1 { ref_words } else { ref_counts.get(&g[..g.len() - 1]).copied().unwrap_or(0) };
        let den = ref_counts.get(g).copied().unwrap_or(0);
        (num as f64 / den as f64).log2()
    };
    let mut info_sum = vec![0.0; max_n];
    let mut hyp_total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hc = ngrams(h, n);
            let rc = ngrams(rf, n);
            hyp_total[n - 1] += hc.values().sum::<usize>();
            // deterministic summation order
            let mut matched: Vec<(&[String], usize)> = hc
                .iter()
                .filter_map(|(g, &k)| rc.get(g).map(|&rk| (*g, k.min(rk))))
                .collect();
            matched.sort();
            for (g, k) in matched {
                info_sum[n - 1] += k as f64 * info(g);
            }
        }
    }
    let mut score = 0.0;
    for n in 0..max_n {
        if hyp_total[n] > 0 {
            score += info_sum[n] / hyp_total[n] as f64;
        }
    }
    let ratio = if r == 0 { 1.0 } else { (c as f64 / r as f64).min(1.0) };
    let bp = if ratio <= 0.0 { 0.0 } else { (nist_beta() * ratio.ln().powi(2)).exp() };
    Ok(score * bp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeteorDetail {
    pub score: f64,
    pub matches: usize,
    pub chunks: usize,
    pub precision: f64,
    pub recall: f64,
    pub fmean: f64,
    pub penalty: f64,
}

const METEOR_ALPHA: f64 = 0.9;
const METEOR_BETA: f64 = 3.0;
const METEOR_GAMMA: f64 = 0.5;
const ALIGN_NODE_BUDGET: usize = 200_000;

/// Sorted (hyp, ref) index pairs.
type Alignment = Vec<(usize, usize)>;

fn count_chunks(align: &Alignment) -> usize {
    let mut a = align.clone();
    a.sort_unstable();
    let mut chunks = 0;
    for (i, &(h, r)) in a.iter().enumerate() {
        if i == 0 || !(h == a[i - 1].0 + 1 && r == a[i - 1].1 + 1) {
            chunks += 1;
        }
    }
    chunks
}

/// Maximum-cardinality matching of equal keys between the unaligned
/// positions, choosing among maxima the one with fewest chunks when combined
/// with `fixed`. Depth-first search with a node budget; the best alignment
/// seen so far is kept when the budget runs out.
fn align_stage(hyp_keys: &[Option<String>], ref_keys: &[Option<String>], fixed: &Alignment) -> Alignment {
    let mut ref_by_key: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, k) in ref_keys.iter().enumerate() {
        if let Some(k) = k {
            ref_by_key.entry(k.as_str()).or_default().push(j);
        }
    }
    let mut hyp_by_key: HashMap<&str, usize> = HashMap::new();
    for k in hyp_keys.iter().flatten() {
        *hyp_by_key.entry(k.as_str()).or_insert(0) += 1;
    }
    // how many hyp occurrences of each key must be matched
    let target: HashMap<&str, usize> = hyp_by_key
        .iter()
        .map(|(k, &c)| (*k, c.min(ref_by_key.get(k).map_or(0, Vec::len))))
        .collect();
    let total_target: usize = target.values().sum();
    let hyp_positions: Vec<usize> = (0..hyp_keys.len())
        .filter(|&i| hyp_keys[i].as_deref().is_some_and(|k| target.get(k).copied().unwrap_or(0) > 0))
        .collect();

    struct Search<'a> {
        hyp_keys: &'a [Option<String>],
        ref_by_key: &'a HashMap<&'a str, Vec<usize>>,
        target: &'a HashMap<&'a str, usize>,
        remaining_occ: HashMap<&'a str, usize>,
        used: Vec<bool>,
        matched: HashMap<&'a str, usize>,
        cur: Alignment,
        best: Option<(usize, Alignment)>,
        nodes: usize,
        total_target: usize,
        fixed: &'a Alignment,
    }

    impl<'a> Search<'a> {
        fn run(&mut self, idx: usize, positions: &[usize]) {
            self.nodes += 1;
            if self.nodes > ALIGN_NODE_BUDGET && self.best.is_some() {
                return;
            }
            if self.cur.len() == self.total_target {
                let mut all = self.fixed.clone();
                all.extend(self.cur.iter().copied());
                let chunks = count_chunks(&all);
                if self.best.as_ref().is_none_or(|(b, _)| chunks < *b) {
                    self.best = Some((chunks, self.cur.clone()));
                }
                return;
            }
            if idx == positions.len() {
                return;
            }
            let i = positions[idx];
            let key: &'a str = self.hyp_keys[i].as_deref().expect("filtered to keyed positions");
            let need = self.target[key] - self.matched.get(key).copied().unwrap_or(0);
            let left = self.remaining_occ[key];
            *self.remaining_occ.get_mut(key).unwrap() -= 1;
            if need > 0 {
                // prefer the ref position that extends the previous match
                let mut options: Vec<usize> =
                    self.ref_by_key[key].iter().copied().filter(|&j| !self.used[j]).collect();
                if let Some(&(ph, pr)) = self.cur.last() {
                    if ph + 1 == i {
                        options.sort_by_key(|&j| (j != pr + 1, j));
                    }
                }
                for j in options {
                    self.used[j] = true;
                    self.cur.push((i, j));
                    *self.matched.entry(key).or_insert(0) += 1;
                    self.run(idx + 1, positions);
                    *self.matched.get_mut(key).unwrap() -= 1;
                    self.cur.pop();
                    self.used[j] = false;
                }
            }
            // leaving this occurrence unmatched is allowed only if enough remain
            if left > need {
                self.run(idx + 1, positions);
            }
            *self.remaining_occ.get_mut(key).unwrap() += 1;
        }
    }

    let remaining_occ: HashMap<&str, usize> = hyp_positions
        .iter()
        .fold(HashMap::new(), |mut m, &i| {
            *m.entry(hyp_keys[i].as_deref().unwrap()).or_insert(0) += 1;
            m
        });
    let mut s = Search {
        hyp_keys,
        ref_by_key: &ref_by_key,
        target: &target,
        remaining_occ,
        used: vec![false; ref_keys.len()],
        matched: HashMap::new(),
        cur: Vec::new(),
        best: None,
        nodes: 0,
        total_target,
        fixed,
    };
    s.run(0, &hyp_positions);
    s.best.map(|(_, a)| a).unwrap_or_default()
}

fn stem(stemmer: &Stemmer, token: &str) -> String {
    stemmer.stem(token).into_owned()
}

/// METEOR with exact and stem matching stages only.
pub fn meteor_lite(hyp: &[String], reference: &[String]) -> Result<MeteorDetail> {
    if hyp.is_empty() || reference.is_empty() {
        return Err(Error::EmptyTokens);
    }
    let exact_h: Vec<Option<String>> = hyp.iter().cloned().map(Some).collect();
    let exact_r: Vec<Option<String>> = reference.iter().cloned().map(Some).collect();
    let mut align = align_stage(&exact_h, &exact_r, &Vec::new());

    let stemmer = Stemmer::create(Algorithm::English);
    let mut hu = vec![true; hyp.len()];
    let mut ru = vec![true; reference.len()];
    for &(i, j) in &align {
        hu[i] = false;
        ru[j] = false;
    }
    let stem_h: Vec<Option<String>> =
        hyp.iter().enumerate().map(|(i, t)| hu[i].then(|| stem(&stemmer, t))).collect();
    let stem_r: Vec<Option<String>> =
        reference.iter().enumerate().map(|(j, t)| ru[j].then(|| stem(&stemmer, t))).collect();
    let extra = align_stage(&stem_h, &stem_r, &align);
    align.extend(extra);

    let m = align.len();
    if m == 0 {
        return Ok(MeteorDetail { score: 0.0, matches: 0, chunks: 0, precision: 0.0, recall: 0.0, fmean: 0.0, penalty: 0.0 });
    }
    let chunks = count_chunks(&align);
    let precision = m as f64 / hyp.len() as f64;
    let recall = m as f64 / reference.len() as f64;
    let fmean = precision * recall / (METEOR_ALPHA * precision + (1.0 - METEOR_ALPHA) * recall);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    Ok(MeteorDetail { score: fmean * (1.0 - penalty), matches: m, chunks, precision, recall, fmean, penalty })
}

/// Mean segment-level METEOR over a corpus.
pub fn meteor_corpus(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let mut total = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        total += meteor_lite(h, r)?.score;
    }
    Ok(total / hyps.len() as f64)
}

fn pooled_ngrams(corpus: &[Vec<String>], n: usize) -> Vec<(Vec<String>, usize)> {
    let mut m: HashMap<&[String], usize> = HashMap::new();
    for h in corpus {
        for (g, k) in ngrams(h, n) {
            *m.entry(g).or_insert(0) += k;
        }
    }
    let mut v: Vec<(Vec<String>, usize)> = m.into_iter().map(|(g, k)| (g.to_vec(), k)).collect();
    v.sort();
    v
}

/// Natural-log entropy of pooled n-gram counts. Corpora without any n-gram
/// score 0 and report `undefined`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityValue {
    pub value: f64,
    pub undefined: bool,
}

pub fn entropy_n(corpus: &[Vec<String>], n: usize) -> DiversityValue {
    let counts = pooled_ngrams(corpus, n);
    let total: usize = counts.iter().map(|c| c.1).sum();
    if total == 0 {
        return DiversityValue { value: 0.0, undefined: true };
    }
    let t = total as f64;
    let value = -counts.iter().map(|(_, c)| (*c as f64 / t) * (*c as f64 / t).ln()).sum::<f64>();
    DiversityValue { value: value.max(0.0), undefined: false }
}

pub fn dist_n(corpus: &[Vec<String>], n: usize) -> DiversityValue {
    let counts = pooled_ngrams(corpus, n);
    let total: usize = counts.iter().map(|c| c.1).sum();
    if total == 0 {
        return DiversityValue { value: 0.0, undefined: true };
    }
    DiversityValue { value: counts.len() as f64 / total as f64, undefined: false }
}

pub fn mean_length(corpus: &[Vec<String>]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    Ok(corpus.iter().map(Vec::len).sum::<usize>() as f64 / corpus.len() as f64)
}

/// Every generation metric reported for a hypothesis/reference corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub nist2: f64,
    pub nist4: f64,
    pub bleu2: f64,
    pub bleu4: f64,
    pub meteor_lite: f64,
    pub entropy4: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub mean_length: f64,
    pub pairs: usize,
}

pub fn generation_report(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<GenerationReport> {
    Ok(GenerationReport {
        nist2: nist(hyps, refs, 2)?,
        nist4: nist(hyps, refs, 4)?,
        bleu2: bleu(hyps, refs, 2)?,
        bleu4: bleu(hyps, refs, 4)?,
        meteor_lite: meteor_corpus(hyps, refs)?,
        entropy4: entropy_n(hyps, 4).value,
        dist1: dist_n(hyps, 1).value,
        dist2: dist_n(hyps, 2).value,
        mean_length: mean_length(hyps)?,
        pairs: hyps.len(),
    })
}
