//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails. Pass criterion numbers as arguments to run a
//! subset: `cargo test -p incoforge-cli --test acceptance -- 3 4`.

mod common;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Result};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde_json::{json, Value};

use incoforge_annotation::{filter_testset, human_baseline, AgreementPolicy, Candidate, Judgment, Phase};
use incoforge_core::embedder::{EmbeddingProvider, ProviderSpec};
use incoforge_core::evalkit::{
    auc_rank, bleu, dist_n, entropy_n, meteor_corpus, meteor_lite, nist, roc_curve, trapezoid_area, Prediction,
};
use incoforge_core::forge::{
    forge_dataset, forge_msd, make_pretrain_segments, write_instances, ConfounderSearch, ForgeConfig, Instance,
};
use incoforge_core::retrieval::{Bm25Index, Bm25Params, IndexOptions};
use incoforge_core::seed::rng_for;
use incoforge_core::similarity::TokenEmbeddingProvider;
use incoforge_core::corpus::save_corpus;
use incoforge_core::{Mode, Narrative, Sentence};
use incoforge_detector::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use incoforge_detector::decode::{retrieve_sentence, PoolEntry};
use incoforge_detector::gradcheck::{grad_check, GradCheckOptions};
use incoforge_detector::train::{pooled_auc, predict};
use incoforge_detector::{train, DetectorModel, Example, Featurizer, InputMode, TrainConfig, TransformerConfig};

type Check = fn() -> Result<String>;

fn main() {
    let criteria: [(u32, &str, Check); 9] = [
        (1, "forge fidelity", forge_fidelity),
        (2, "determinism", determinism),
        (3, "retrieval oracle", retrieval_oracle),
        (4, "metric oracles", metric_oracles),
        (5, "gradient check", gradient_check),
        (6, "learning sanity", learning_sanity),
        (7, "complexity", complexity),
        (8, "pre-training pipeline", pretraining),
        (9, "annotation filter", annotation),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(anyhow!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} {name}: PASS ({secs:.1}s) {detail}"),
            Err(e) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({secs:.1}s) {e:#}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn bm25_index(corpus: &[Narrative]) -> Bm25Index {
    Bm25Index::build_with(corpus, IndexOptions { remove_stopwords: false }).unwrap()
}

fn contiguous_in(haystack: &[Sentence], needle: &[Sentence]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Brute-force BM25: every document scored from raw token lists, sorted by
/// score descending then id ascending.
struct BruteBm25 {
    docs: Vec<Vec<String>>,
    df: HashMap<String, usize>,
    avgdl: f64,
    k1: f64,
    b: f64,
}

impl BruteBm25 {
    fn new(corpus: &[Narrative]) -> Self {
        let docs: Vec<Vec<String>> = corpus.iter().flat_map(|n| n.sentences.iter().map(|s| s.tokens.clone())).collect();
        let mut df = HashMap::new();
        for d in &docs {
            for t in d.iter().collect::<HashSet<_>>() {
                *df.entry(t.clone()).or_insert(0) += 1;
            }
        }
        let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / docs.len() as f64;
        Self { docs, df, avgdl, k1: 1.2, b: 0.75 }
    }

    fn score(&self, query: &[String], d: usize) -> f64 {
        let n = self.docs.len() as f64;
        let mut seen = HashSet::new();
        let mut s = 0.0;
        for q in query {
            if !seen.insert(q) {
                continue;
            }
            let tf = self.docs[d].iter().filter(|t| *t == q).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let df = self.df[q] as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            let norm = 1.0 - self.b + self.b * self.docs[d].len() as f64 / self.avgdl;
            s += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm);
        }
        s
    }

    fn ranking(&self, query: &[String], excluded: &HashSet<usize>) -> Vec<(usize, f64)> {
        let mut r: Vec<(usize, f64)> = (0..self.docs.len())
            .filter(|d| !excluded.contains(d))
            .map(|d| (d, self.score(query, d)))
            .filter(|(_, s)| *s > 0.0)
            .collect();
        r.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        r
    }
}

/// Greedy max-cosine F1 between two token lists.
fn greedy_f1(x: &[String], y: &[String], tokens: &TokenEmbeddingProvider) -> f64 {
    let dot = |a: &[f64], b: &[f64]| {
        let (d, na, nb) = a.iter().zip(b).fold((0.0, 0.0, 0.0), |(d, na, nb), (p, q)| (d + p * q, na + p * p, nb + q * q));
        d / (na.sqrt() * nb.sqrt())
    };
    let xv: Vec<_> = x.iter().map(|t| tokens.vector(t)).collect();
    let yv: Vec<_> = y.iter().map(|t| tokens.vector(t)).collect();
    let best = |from: &[std::sync::Arc<[f64]>], to: &[std::sync::Arc<[f64]>]| {
        from.iter().map(|a| to.iter().map(|b| dot(a, b)).fold(f64::MIN, f64::max)).sum::<f64>() / from.len() as f64
    };
    let (p, r) = (best(&xv, &yv), best(&yv, &xv));
    if p * r <= 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }
}

fn forge_fidelity() -> Result<String> {
    let corpus: Vec<Narrative> = common::story_corpus(1000, 12, 20, 7)
        .into_iter()
        .enumerate()
        .map(|(i, n)| Narrative::new(n.id, n.sentences[..8 + i % 5].to_vec()).unwrap())
        .collect();
    let by_id: HashMap<&str, &Narrative> = corpus.iter().map(|n| (n.id.as_str(), n)).collect();

    let t = Instant::now();
    let msd = forge_dataset(&corpus, &ForgeConfig::new(Mode::Msd, 5, 1, 11), None, false)?;
    let msd_secs = t.elapsed().as_secs_f64();
    ensure!(msd_secs < 60.0, "msd forge took {msd_secs:.1}s");
    ensure!(msd.instances.len() == corpus.len(), "msd emitted {} of {}", msd.instances.len(), corpus.len());
    for inst in &msd.instances {
        let Instance::Msd(m) = inst else { bail!("{} is not msd", inst.id()) };
        let removed: Vec<usize> = (1..=5).filter(|p| !m.phi.contains(p)).collect();
        ensure!(removed.len() == 1, "{}: removed {removed:?}", m.id);
        ensure!(m.slot_labels.iter().map(|&y| y as usize).sum::<usize>() == 1, "{}: positives", m.id);
        for w in removed.windows(2) {
            ensure!(w[1] > w[0] + 1, "{}: adjacent removals {removed:?}", m.id);
        }
        ensure!(removed.iter().all(|&p| p > 1 && p < 5), "{}: boundary removal {removed:?}", m.id);
        let full = inst.reconstruct();
        ensure!(full.len() == 5 && contiguous_in(&by_id[m.source.as_str()].sentences, &full), "{}: reconstruction", m.id);
        for (o, &p) in m.observed.iter().zip(&m.phi) {
            ensure!(*o == full[p - 1], "{}: phi", m.id);
        }
    }

    let t = Instant::now();
    let idx = bm25_index(&corpus);
    let tokens = TokenEmbeddingProvider::hash_projection(64, 0);
    let search = ConfounderSearch { index: &idx, provider: &tokens, params: Bm25Params::default() };
    let dsd = forge_dataset(&corpus, &ForgeConfig::new(Mode::Dsd, 8, 2, 11), Some(&search), false)?;
    let dsd_secs = t.elapsed().as_secs_f64();
    ensure!(dsd_secs < 60.0, "dsd forge took {dsd_secs:.1}s");
    ensure!(dsd.instances.len() * 10 >= corpus.len() * 9, "dsd emitted only {}", dsd.instances.len());

    let brute = BruteBm25::new(&corpus);
    let mut offsets = HashMap::new();
    let mut next = 0;
    for n in &corpus {
        offsets.insert(n.id.as_str(), next);
        next += n.sentences.len();
    }
    for inst in &dsd.instances {
        let Instance::Dsd(d) = inst else { bail!("{} is not dsd", inst.id()) };
        ensure!(d.labels.iter().map(|&y| y as usize).sum::<usize>() == 2, "{}: positives", d.id);
        let full = inst.reconstruct();
        ensure!(contiguous_in(&by_id[d.source.as_str()].sentences, &full), "{}: reconstruction", d.id);
        let own = offsets[d.source.as_str()];
        let own_range: HashSet<usize> = (own..own + by_id[d.source.as_str()].sentences.len()).collect();
        for (&p, c) in &d.confounders {
            ensure!(c.sim < 0.7 && c.rank >= 1 && c.rank <= 100, "{}: confounder {c:?}", d.id);
            let original = &d.originals[&p];
            let replaced = &d.sentences[p - 1];
            ensure!(replaced.text != original.text, "{}: confounder equals original", d.id);
            ensure!(!own_range.contains(&(c.sid.0 as usize)), "{}: confounder from own narrative", d.id);
            let sim = greedy_f1(&original.tokens, &replaced.tokens, &tokens);
            ensure!(sim < 0.7 && (sim - c.sim).abs() < 1e-9, "{}: similarity {sim} vs recorded {}", d.id, c.sim);
            // the other confounder may or may not have been excluded, depending on order
            let others: HashSet<usize> =
                d.confounders.values().filter(|o| o.sid != c.sid).map(|o| o.sid.0 as usize).collect();
            let strict = brute.ranking(&original.tokens, &own_range);
            let loose: HashSet<usize> = own_range.union(&others).copied().collect();
            let relaxed = brute.ranking(&original.tokens, &loose);
            let pos = |r: &[(usize, f64)]| r.iter().position(|(id, _)| *id == c.sid.0 as usize).map(|i| i + 1);
            let ranks = (pos(&relaxed), pos(&strict));
            ensure!(
                ranks.0 == Some(c.rank) || ranks.1 == Some(c.rank),
                "{}: recorded rank {} but oracle ranks {ranks:?}",
                d.id,
                c.rank
            );
        }
    }
    Ok(format!(
        "msd {} instances in {msd_secs:.2}s, dsd {} in {dsd_secs:.2}s, all constraints hold",
        msd.instances.len(),
        dsd.instances.len()
    ))
}

fn determinism() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    save_corpus(d.join("c.jsonl"), &common::story_corpus(300, 6, 10, 2))?;
    let forge = |out: &str, threads: &str| {
        common::ok(
            d,
            &["forge", "--corpus", "c.jsonl", "--output", out, "--mode", "dsd", "--segment-len", "5", "--seed", "3", "--threads", threads],
        )
    };
    forge("a.jsonl", "1");
    forge("b.jsonl", "1");
    forge("p.jsonl", "4");
    let a = std::fs::read(d.join("a.jsonl"))?;
    ensure!(!a.is_empty(), "empty forge output");
    ensure!(a == std::fs::read(d.join("b.jsonl"))?, "two forge runs differ");
    ensure!(a == std::fs::read(d.join("p.jsonl"))?, "threaded forge differs");
    let train = |out: &str, parallel: &str| {
        common::ok(d, &["train", "--train", "a.jsonl", "--output", out, "--epochs", "2", "--seed", "5", &format!("--parallel={parallel}")])
    };
    train("m1.ckpt", "false");
    train("m2.ckpt", "false");
    train("m3.ckpt", "true");
    let m = std::fs::read(d.join("m1.ckpt"))?;
    ensure!(m == std::fs::read(d.join("m2.ckpt"))?, "two training runs differ");
    ensure!(m == std::fs::read(d.join("m3.ckpt"))?, "parallel training differs");
    let h = incoforge_core::seed::sha256_hex(&a);
    Ok(format!("forge sha256 {}…, checkpoints of {} bytes identical", &h[..12], m.len()))
}

fn random_corpus(n_narratives: usize, per: usize, seed: u64) -> Vec<Narrative> {
    let mut rng = rng_for(seed, "bm25-corpus");
    let vocab: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
    (0..n_narratives)
        .map(|i| {
            let texts: Vec<String> = (0..per)
                .map(|_| {
                    let len = rng.random_range(3..13);
                    // roughly Zipfian: low ids are far more frequent
                    (0..len)
                        .map(|_| {
                            let u: f64 = rng.random();
                            vocab[((300f64).powf(u) as usize - 1).min(299)].clone()
                        })
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            Narrative::from_texts(format!("r{i:03}"), &texts).unwrap()
        })
        .collect()
}

fn retrieval_oracle() -> Result<String> {
    let mut corpus = random_corpus(80, 10, 3);
    corpus.extend(common::story_corpus(40, 5, 4, 3));
    let idx = bm25_index(&corpus);
    ensure!(idx.n_docs() == 1000, "corpus has {} sentences", idx.n_docs());
    let brute = BruteBm25::new(&corpus);
    let params = Bm25Params::default();
    let all: Vec<&Sentence> = corpus.iter().flat_map(|n| &n.sentences).collect();
    let mut rng = rng_for(3, "queries");
    let mut tied = 0;
    for q in 0..50 {
        let query: Vec<String> = if q % 2 == 0 {
            all[rng.random_range(0..all.len())].tokens.clone()
        } else {
            let pool: Vec<&String> = all.iter().flat_map(|s| &s.tokens).collect();
            (0..rng.random_range(1..7)).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect()
        };
        let excluded: HashSet<usize> = if q % 5 == 0 { (0..40).collect() } else { HashSet::new() };
        let ex_ids = excluded.iter().map(|&i| incoforge_core::retrieval::SentenceId(i as u32)).collect();
        let oracle = brute.ranking(&query, &excluded);
        for k in [10, 100, 1000] {
            let got = idx.top_k(&query, k, &params, &ex_ids);
            let want = &oracle[..k.min(oracle.len())];
            ensure!(got.len() == want.len(), "query {q} k {k}: {} vs {} results", got.len(), want.len());
            for (r, ((gid, gs), (wid, ws))) in got.iter().zip(want).enumerate() {
                ensure!(gid.0 as usize == *wid, "query {q} k {k}: rank {} is {} not {wid}", r + 1, gid.0);
                ensure!((gs - ws).abs() < 1e-9, "query {q}: score {gs} vs {ws}");
            }
        }
        tied += oracle.windows(2).filter(|w| w[0].1 == w[1].1).count();
    }
    Ok(format!("50 queries match at k = 10, 100, 1000 ({tied} tied neighbours ordered by id)"))
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<()> {
    ensure!((got - want).abs() <= tol, "{name}: got {got}, expected {want}");
    Ok(())
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn corpus_of(v: &[&str]) -> Vec<Vec<String>> {
    v.iter().map(|s| toks(s)).collect()
}

fn metric_oracles() -> Result<String> {
    let mut rng = rng_for(4, "auc-sets");
    for set in 0..100 {
        let n = rng.random_range(2..300);
        let levels = [3, 10, 1000][set % 3];
        let mut preds: Vec<Prediction> = (0..n)
            .map(|_| Prediction { score: rng.random_range(0..levels) as f64 / levels as f64, gold: rng.random_bool(0.3) as u8 })
            .collect();
        preds[0].gold = 1;
        preds[1].gold = 0;
        let rank = auc_rank(&preds)?;
        let trap = trapezoid_area(&roc_curve(&preds)?);
        close(&format!("set {set} rank vs trapezoid"), rank, trap, 1e-9)?;
        let (mut num, mut pairs) = (0.0, 0.0);
        for p in preds.iter().filter(|p| p.gold == 1) {
            for q in preds.iter().filter(|q| q.gold == 0) {
                pairs += 1.0;
                num += if p.score > q.score { 1.0 } else if p.score == q.score { 0.5 } else { 0.0 };
            }
        }
        close(&format!("set {set} rank vs pair count"), rank, num / pairs, 1e-12)?;
    }

    let tol = 1e-6;
    let h = corpus_of(&["the cat sat on the mat"]);
    let r = corpus_of(&["the cat is on the mat"]);
    close("bleu2 overlap", bleu(&h, &r, 2)?, 100.0 * (5.0f64 / 6.0 * 3.0 / 5.0).sqrt(), tol)?;
    close("bleu2 brevity", bleu(&corpus_of(&["the cat"]), &corpus_of(&["the cat sat down"]), 2)?, 100.0 * (-1.0f64).exp(), tol)?;
    let h = corpus_of(&["a b c d", "a b c e"]);
    let r = corpus_of(&["a b c d", "a b c d"]);
    close("bleu4 corpus", bleu(&h, &r, 4)?, 100.0 * (7.0f64 / 8.0 * 5.0 / 6.0 * 3.0 / 4.0 * 1.0 / 2.0).powf(0.25), tol)?;
    close("bleu4 disjoint", bleu(&corpus_of(&["x y z w"]), &corpus_of(&["a b c d"]), 4)?, 0.0, tol)?;

    let beta = 0.5f64.ln() / 1.5f64.ln().powi(2);
    close("nist2 repeated", nist(&corpus_of(&["a b a c"]), &corpus_of(&["a b a c"]), 2)?, 1.5 + 2.0 / 3.0, tol)?;
    close("nist1 short", nist(&corpus_of(&["a b"]), &corpus_of(&["a b a c"]), 1)?, 1.5 * (beta * 0.5f64.ln().powi(2)).exp(), tol)?;
    close("nist1 corpus", nist(&corpus_of(&["x y", "z z"]), &corpus_of(&["x y", "x z"]), 1)?, 1.25, tol)?;

    let m = |h: &str, r: &str| meteor_lite(&toks(h), &toks(r)).map(|d| d.score);
    close("meteor identity", m("the cat sat", "the cat sat")?, 1.0 - 0.5 / 27.0, tol)?;
    close("meteor three chunks", m("the cat sat on the mat", "on the mat sat the cat")?, 1.0 - 0.5 * 0.125, tol)?;
    close("meteor stems", m("the cats running", "the cat runs")?, 1.0 - 0.5 / 27.0, tol)?;
    close("meteor partial", m("a b c d", "a b x")?, 75.0 / 124.0, tol)?;

    close("entropy4 two", entropy_n(&corpus_of(&["a b c d e"]), 4).value, 2.0f64.ln(), tol)?;
    close(
        "entropy4 repeat",
        entropy_n(&corpus_of(&["a b c d a b c d"]), 4).value,
        0.4 * 2.5f64.ln() + 0.6 * 5.0f64.ln(),
        tol,
    )?;
    close("entropy4 single", entropy_n(&corpus_of(&["a b c d", "a b c d"]), 4).value, 0.0, tol)?;
    ensure!(entropy_n(&corpus_of(&["a b"]), 4).undefined, "entropy of a too-short corpus is undefined");

    close("dist1 abab", dist_n(&corpus_of(&["a b a b"]), 1).value, 0.5, tol)?;
    close("dist2 abab", dist_n(&corpus_of(&["a b a b"]), 2).value, 2.0 / 3.0, tol)?;
    close("dist1 pooled", dist_n(&corpus_of(&["a b", "b c"]), 1).value, 0.75, tol)?;
    close("dist2 pooled", dist_n(&corpus_of(&["a b", "b c"]), 2).value, 1.0, tol)?;
    close("dist2 aaa", dist_n(&corpus_of(&["a a a"]), 2).value, 0.5, tol)?;

    // identity corpora of distinct tokens reach the closed-form maxima
    for len in [4usize, 7, 12] {
        let s: Vec<String> = (0..len).map(|i| format!("t{i}")).collect();
        let c = vec![s.clone()];
        close("bleu identity", bleu(&c, &c, 4)?, 100.0, 1e-9)?;
        close("nist identity", nist(&c, &c, 4)?, (len as f64).log2(), 1e-9)?;
        close("meteor identity", meteor_corpus(&c, &c)?, 1.0 - 0.5 / (len as f64).powi(3), 1e-9)?;
        close("dist1 identity", dist_n(&c, 1).value, 1.0, 1e-12)?;
        close("entropy4 identity", entropy_n(&c, 4).value, ((len - 3) as f64).ln(), 1e-9)?;
    }
    Ok("100 AUC sets agree, 22 hand fixtures and 15 identity maxima match".into())
}

fn story_instances(n: usize, len: usize, seed: u64) -> Vec<Instance> {
    let corpus = common::story_corpus(n, len, 20, seed);
    let idx = bm25_index(&corpus);
    let tokens = TokenEmbeddingProvider::hash_projection(64, 0);
    let search = ConfounderSearch { index: &idx, provider: &tokens, params: Bm25Params::default() };
    forge_dataset(&corpus, &ForgeConfig::new(Mode::Dsd, len, 1, seed), Some(&search), false).unwrap().instances
}

fn provider() -> EmbeddingProvider {
    ProviderSpec::MeanOfTokens { dim: 64, seed: 0, token_vectors: None }.build().unwrap()
}

fn gradient_check() -> Result<String> {
    let p = provider();
    let feat = Featurizer::sentence(&p, 64);
    let insts: Vec<Instance> = story_instances(60, 5, 5).into_iter().step_by(7).take(5).collect();
    ensure!(insts.len() == 5, "need five instances");
    let cfg = TransformerConfig { n_layers: 1, dropout: 0.0, ..TransformerConfig::desk(InputMode::Sentence, 64, 0) };
    let ex64: Vec<Example<f64>> = feat.prepare_all(&insts)?;
    let m64 = DetectorModel::<f64>::new(cfg.clone())?;
    let r64 = grad_check(&m64, &ex64, GradCheckOptions { samples: 250, seed: 5, ..Default::default() }, None)?;
    ensure!(r64.checked >= 200 && r64.max_rel_error < 1e-6, "f64: {r64:?}");
    let ex32: Vec<Example<f32>> = feat.prepare_all(&insts)?;
    let m32 = DetectorModel::<f32>::new(cfg)?;
    let r32 = grad_check(&m32, &ex32, GradCheckOptions { samples: 250, seed: 5, ..Default::default() }, None)?;
    ensure!(r32.checked >= 200 && r32.max_rel_error < 1e-4, "f32: {r32:?}");
    Ok(format!(
        "max relative error {:.2e} (64-bit), {:.2e} (32-bit) over {} parameters",
        r64.max_rel_error, r32.max_rel_error, r64.checked
    ))
}

struct StorySplits {
    corpus_pool: Vec<Sentence>,
    train: Vec<Instance>,
    dev: Vec<Instance>,
    test: Vec<Instance>,
}

fn story_splits() -> StorySplits {
    let corpus = common::story_corpus(3000, 5, 20, 1);
    let idx = bm25_index(&corpus);
    let tokens = TokenEmbeddingProvider::hash_projection(64, 0);
    let search = ConfounderSearch { index: &idx, provider: &tokens, params: Bm25Params::default() };
    let mut all = forge_dataset(&corpus, &ForgeConfig::new(Mode::Dsd, 5, 1, 0), Some(&search), false).unwrap().instances;
    let test = all.split_off(1800);
    let dev = all.split_off(1600);
    let held: HashSet<&str> = test.iter().map(Instance::source).collect();
    let corpus_pool = corpus.iter().filter(|n| held.contains(n.id.as_str())).flat_map(|n| n.sentences.clone()).collect();
    StorySplits { corpus_pool, train: all, dev, test }
}

fn fit(cfg: &TransformerConfig, init: Option<&DetectorModel<f32>>, train_ex: &[Example<f32>], dev: &[Example<f32>], tc: &TrainConfig) -> Result<(DetectorModel<f32>, f64)> {
    let mut m = match init {
        Some(m) => m.clone(),
        None => DetectorModel::<f32>::new(cfg.clone())?,
    };
    let t = Instant::now();
    train(&mut m, train_ex, Some(dev), tc)?;
    Ok((m, t.elapsed().as_secs_f64()))
}

fn learning_sanity() -> Result<String> {
    let s = story_splits();
    let p = provider();
    let feat = Featurizer::sentence(&p, 64);
    let train_ex: Vec<Example<f32>> = feat.prepare_all(&s.train)?;
    let dev_ex: Vec<Example<f32>> = feat.prepare_all(&s.dev)?;
    let test_ex: Vec<Example<f32>> = feat.prepare_all(&s.test)?;
    let cfg = TransformerConfig::desk(InputMode::Sentence, 64, 0);
    ensure!(cfg.n_layers == 2 && cfg.d_model == 64, "desk model is not 2 x 64");
    let base = TrainConfig { epochs: 30, seed: 1, ..Default::default() };

    let (det, det_secs) = fit(&cfg, None, &train_ex, &dev_ex, &TrainConfig { sm_weight: 0.0, ..base.clone() })?;
    let det_auc = pooled_auc(&det, &test_ex)?;
    ensure!(det_secs < 600.0, "detection-only training took {det_secs:.0}s");
    ensure!(det_auc >= 0.90, "detection-only test AUC {det_auc:.4}");

    let mut rng = rng_for(1, "shuffle-labels");
    let mut label_sets: Vec<Vec<u8>> = train_ex.iter().map(|e| e.labels.clone()).collect();
    label_sets.shuffle(&mut rng);
    let shuffled: Vec<Example<f32>> = train_ex.iter().zip(label_sets).map(|(e, l)| e.with_labels(l)).collect();
    let (shuf, _) = fit(&cfg, None, &shuffled, &dev_ex, &TrainConfig { sm_weight: 0.0, ..base.clone() })?;
    let shuf_auc = pooled_auc(&shuf, &test_ex)?;
    ensure!((shuf_auc - 0.5).abs() <= 0.05, "shuffled-label test AUC {shuf_auc:.4}");

    let (joint, joint_secs) = fit(&cfg, None, &train_ex, &dev_ex, &TrainConfig { sm_weight: 1.0, ..base })?;
    let joint_auc = pooled_auc(&joint, &test_ex)?;
    ensure!(joint_secs < 600.0, "joint training took {joint_secs:.0}s");
    ensure!((joint_auc - det_auc).abs() <= 0.05, "joint AUC {joint_auc:.4} vs detection-only {det_auc:.4}");

    // pool: hidden originals of the first 200 test instances, then other
    // sentences of held-out narratives
    let mut pool: Vec<PoolEntry> = Vec::new();
    let mut seen = HashSet::new();
    let mut queries = Vec::new();
    for (inst, ex) in s.test.iter().zip(&test_ex).take(200) {
        let Instance::Dsd(d) = inst else { bail!("not dsd") };
        for (&p, orig) in &d.originals {
            if seen.insert(orig.text.clone()) {
                pool.push(PoolEntry { id: pool.len() as u32, text: orig.text.clone(), embedding: feat.embed(orig)? });
            }
            queries.push((ex, p, orig.text.clone()));
        }
    }
    for sent in &s.corpus_pool {
        if pool.len() == 500 {
            break;
        }
        if seen.insert(sent.text.clone()) {
            pool.push(PoolEntry { id: pool.len() as u32, text: sent.text.clone(), embedding: feat.embed(sent)? });
        }
    }
    ensure!(pool.len() == 500, "pool has {} sentences", pool.len());
    const THRESHOLD: f64 = 0.5;
    let mut hits = 0;
    for (ex, p, text) in &queries {
        let hhat = &predict(&joint, ex, 0.5)?.hhat[p - 1];
        let got = retrieve_sentence(hhat, &pool)?;
        let cos = |v: &[f64]| {
            let n = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter().zip(hhat).map(|(a, b)| a * b).sum::<f64>() / (n(v) * n(hhat))
        };
        let mut best = (0usize, f64::MIN);
        for (i, e) in pool.iter().enumerate() {
            let c = cos(&e.embedding);
            if c > best.1 {
                best = (i, c);
            }
        }
        ensure!(got.id as usize == best.0, "decoder picked {} but brute-force cosine picks {}", got.id, best.0);
        hits += (got.text == *text) as usize;
    }
    let rate = hits as f64 / queries.len() as f64;
    ensure!(rate >= THRESHOLD, "exact recovery {hits}/{}", queries.len());
    Ok(format!(
        "test AUC {det_auc:.4} ({det_secs:.0}s), shuffled {shuf_auc:.4}, joint {joint_auc:.4} ({joint_secs:.0}s), exact recovery {hits}/{} from 500",
        queries.len()
    ))
}

fn complexity() -> Result<String> {
    use incoforge_detector::bench::{bench_forward, sentence_cells, token_cells, BenchOptions};
    let base = TransformerConfig::desk(InputMode::Sentence, 64, 0);
    let grid = BenchOptions { ns: vec![2, 4, 8, 16], ls: vec![10, 20, 40], warmup: 0, repeats: 1, ..Default::default() };
    let rows = bench_forward(&base, &grid)?;
    ensure!(rows.len() == 24, "{} rows", rows.len());
    for r in &rows {
        let want = match r.mode {
            InputMode::Token => token_cells(r.n, r.l),
            InputMode::Sentence => sentence_cells(r.n),
        };
        let hand = match r.mode {
            InputMode::Token => (r.n * r.l + r.n + 1) * (r.n * r.l + r.n + 1),
            InputMode::Sentence => r.n * r.n,
        };
        ensure!(r.cells_per_layer == want && want == hand, "{:?} N={} L={}: {} cells", r.mode, r.n, r.l, r.cells_per_layer);
    }
    let speed = BenchOptions { ns: vec![8], ls: vec![30], warmup: 2, repeats: 15, ..Default::default() };
    let rows = bench_forward(&base, &speed)?;
    let rate = |m: InputMode| rows.iter().find(|r| r.mode == m).map(|r| r.paragraphs_per_sec).unwrap();
    let ratio = rate(InputMode::Sentence) / rate(InputMode::Token);
    ensure!(ratio >= 5.0, "sentence mode only {ratio:.1}x faster");
    Ok(format!("24 cell counts exact; N=8 L=30 throughput ratio {ratio:.1}x"))
}

fn pretraining() -> Result<String> {
    let docs = common::document_corpus(10_000, 80, 5, 20, 9);
    let n_sent: usize = docs.iter().map(|d| d.sentences.len()).sum();
    ensure!(n_sent == 10_000, "document corpus has {n_sent} sentences");
    let idx = bm25_index(&docs);
    let tokens = TokenEmbeddingProvider::hash_projection(64, 0);
    let search = ConfounderSearch { index: &idx, provider: &tokens, params: Bm25Params::default() };
    let base = ForgeConfig::new(Mode::Dsd, 5, 1, 9);
    let out = make_pretrain_segments(&docs, 16, 0.25, &base, Some(&search), false)?;
    let windows = n_sent / 16;
    // a window is skipped when any of its four positions has no confounder
    ensure!(out.instances.len() * 2 >= windows, "only {} of {windows} windows emitted", out.instances.len());
    for inst in &out.instances {
        ensure!(inst.sentences().len() == 16, "{}: {} sentences", inst.id(), inst.sentences().len());
        ensure!(inst.positive_count() == 4, "{}: {} corruptions", inst.id(), inst.positive_count());
    }

    let p = provider();
    let feat = Featurizer::sentence(&p, 64);
    let cfg = TransformerConfig::desk(InputMode::Sentence, 64, 0);
    let pre_ex: Vec<Example<f32>> = feat.prepare_all(&out.instances)?;
    let mut pre = DetectorModel::<f32>::new(cfg.clone())?;
    train(&mut pre, &pre_ex, None, &TrainConfig { epochs: 8, seed: 2, ..Default::default() })?;
    let dir = tempfile::tempdir()?;
    let ckpt = dir.path().join("pre.ckpt");
    save_checkpoint(&ckpt, &pre, &CheckpointMeta::default())?;
    let (loaded, _) = load_checkpoint::<f32>(&ckpt)?;

    let s = story_splits();
    let train_ex: Vec<Example<f32>> = feat.prepare_all(&s.train)?;
    let dev_ex: Vec<Example<f32>> = feat.prepare_all(&s.dev)?;
    // both arms get the same budget and are compared at their best dev epoch
    let tc = TrainConfig { epochs: 10, seed: 3, ..Default::default() };
    let best = |init: Option<&DetectorModel<f32>>| -> Result<f64> {
        let mut m = match init {
            Some(m) => m.clone(),
            None => DetectorModel::<f32>::new(cfg.clone())?,
        };
        let r = train(&mut m, &train_ex, Some(&dev_ex), &tc)?;
        Ok(r.history.iter().filter_map(|e| e.dev_auc).fold(f64::MIN, f64::max))
    };
    let (a_s, a_t) = (best(None)?, best(Some(&loaded))?);
    ensure!(a_t >= a_s - 0.02, "fine-tuned dev AUC {a_t:.4} vs from-scratch {a_s:.4}");
    Ok(format!(
        "{} of {windows} windows emitted, each 16 sentences with 4 corruptions; dev AUC fine-tuned {a_t:.4} vs scratch {a_s:.4}",
        out.instances.len()
    ))
}

// ---- criterion 9 -------------------------------------------------------

const ADMIN: &str = "acceptance-admin-token";

fn fixture_candidate(i: usize, auto: u8) -> Candidate {
    let seg: Vec<Sentence> = (1..=5).map(|k| Sentence::new(format!("Tale {i} line {k} goes on."))).collect();
    let inst = Instance::Msd(forge_msd(&format!("t{i:02}"), &format!("tale{i}"), &seg, &[3]));
    Candidate::new(&inst, if auto == 1 { 2 } else { 1 }).unwrap()
}

fn judgment(worker: &str, c: &Candidate, label: u8, phase: Phase) -> Judgment {
    Judgment { worker: worker.into(), candidate: c.id.clone(), label, timestamp_ms: 0, phase, idempotency_key: None }
}

/// Precision, recall, F1 and accuracy of one judge, counted by hand.
fn judge_scores(pairs: &[(u8, u8)]) -> [f64; 4] {
    let c = |p: u8, g: u8| pairs.iter().filter(|&&x| x == (p, g)).count() as f64;
    let (tp, fp, fn_, tn) = (c(1, 1), c(1, 0), c(0, 1), c(0, 0));
    let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
    [(tp + tn) / pairs.len() as f64, prec, rec, f1]
}

struct Server {
    child: Child,
    addr: String,
}

impl Server {
    fn start(dir: &Path) -> Result<Self> {
        let mut child = Command::new(common::bin())
            .args(["serve", "--data-dir", "ann", "--addr", "127.0.0.1:0", "--admin-token", ADMIN])
            .args(["--instances", "fixture.jsonl", "--probes", "probes.jsonl", "--snapshot-every", "7"])
            .current_dir(dir)
            .env_remove(incoforge_cli::CONFIG_ENV)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
        let addr = loop {
            let line = lines.next().ok_or_else(|| anyhow!("server exited before listening"))??;
            if let Some(a) = line.strip_prefix("listening on http://") {
                break a.trim().to_string();
            }
        };
        // keep draining so the server never blocks on a full pipe
        std::thread::spawn(move || lines.for_each(drop));
        Ok(Self { child, addr })
    }

    fn request(&self, method: &str, path: &str, token: Option<&str>, body: Option<Value>) -> Result<(u16, Value)> {
        let mut s = TcpStream::connect(&self.addr)?;
        s.set_read_timeout(Some(Duration::from_secs(30)))?;
        let payload = body.map(|b| b.to_string()).unwrap_or_default();
        let mut req = format!("{method} {path} HTTP/1.1\r\nHost: {}\r\nConnection: close\r\n", self.addr);
        if let Some(t) = token {
            req.push_str(&format!("Authorization: Bearer {t}\r\n"));
        }
        req.push_str(&format!("Content-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}", payload.len()));
        s.write_all(req.as_bytes())?;
        let mut raw = Vec::new();
        s.read_to_end(&mut raw)?;
        let text = String::from_utf8(raw)?;
        let (head, body) = text.split_once("\r\n\r\n").ok_or_else(|| anyhow!("malformed response"))?;
        let status: u16 = head.split_whitespace().nth(1).ok_or_else(|| anyhow!("no status"))?.parse()?;
        let body = if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
            let mut out = String::new();
            let mut rest = body;
            while let Some((size, tail)) = rest.split_once("\r\n") {
                let n = usize::from_str_radix(size.trim(), 16)?;
                if n == 0 {
                    break;
                }
                out.push_str(&tail[..n]);
                rest = &tail[n + 2..];
            }
            out
        } else {
            body.to_string()
        };
        let v = if body.trim().is_empty() { Value::Null } else { serde_json::from_str(&body)? };
        Ok((status, v))
    }

    fn digest(&self) -> Result<(String, u64)> {
        let (code, p) = self.request("GET", "/api/progress", Some(ADMIN), None)?;
        ensure!(code == 200, "progress returned {code}");
        Ok((p["state_digest"].as_str().unwrap_or_default().to_string(), p["verification_judgments"].as_u64().unwrap_or(0)))
    }

    fn kill(mut self) -> Result<()> {
        self.child.kill()?;
        self.child.wait()?;
        Ok(())
    }
}

/// Serves tasks to `token` until none remain or `limit` judgments were
/// made, labelling with `label`. Probes are answered from `probes`.
fn work(s: &Server, token: &str, probes: &HashMap<String, u8>, limit: usize, label: &dyn Fn(&str) -> u8) -> Result<usize> {
    let mut done = 0;
    while done < limit {
        let (code, v) = s.request("GET", "/api/tasks/next", Some(token), None)?;
        ensure!(code == 200, "next task returned {code}: {v}");
        let Some(id) = v["task"]["candidate_id"].as_str() else { break };
        let l = probes.get(id).copied().unwrap_or_else(|| label(id));
        let key = format!("{token}/{id}");
        let body = json!({ "candidate_id": id, "label": l, "idempotency_key": key });
        let (code, v) = s.request("POST", "/api/judgments", Some(token), Some(body.clone()))?;
        ensure!(code == 201, "submit returned {code}: {v}");
        let (code, _) = s.request("POST", "/api/judgments", Some(token), Some(body))?;
        ensure!(code == 200, "idempotent replay returned {code}");
        done += 1;
    }
    Ok(done)
}

fn annotation() -> Result<String> {
    // library fixtures: 20 candidates, judge pattern i % 5 agreeing
    let cands: Vec<Candidate> = (0..20).map(|i| fixture_candidate(i, (i % 2) as u8)).collect();
    let mut js = Vec::new();
    for (i, c) in cands.iter().enumerate() {
        for j in 0..4 {
            let l = if j < i % 5 { c.auto_label } else { 1 - c.auto_label };
            js.push(judgment(&format!("w{j}"), c, l, Phase::Verification));
        }
    }
    let out = filter_testset(&cands, &js, AgreementPolicy::default())?;
    let want: Vec<String> = cands.iter().enumerate().filter(|(i, _)| i % 5 >= 3).map(|(_, c)| c.id.clone()).collect();
    ensure!(out.kept == want, "kept {:?}", out.kept);
    let six: Vec<Candidate> = [1u8, 1, 1, 0, 0, 0].iter().enumerate().map(|(i, &a)| fixture_candidate(100 + i, a)).collect();
    let mut bj = Vec::new();
    for (w, ls) in [("a", [1u8, 1, 0, 0, 0, 1]), ("b", [1, 1, 1, 0, 0, 0]), ("c", [0, 0, 1, 1, 0, 0])] {
        for (c, &l) in six.iter().zip(&ls) {
            bj.push(judgment(w, c, l, Phase::Baseline));
        }
    }
    let hb = human_baseline(&six, &bj, 3)?;
    // a: 4/6, 2/3, 2/3, 2/3; b: perfect; c: 1/2, 1/2, 1/3, 2/5
    close("baseline accuracy", hb.accuracy, 13.0 / 18.0, 1e-9)?;
    close("baseline precision", hb.precision, 13.0 / 18.0, 1e-9)?;
    close("baseline recall", hb.recall, 2.0 / 3.0, 1e-9)?;
    close("baseline f1", hb.f1, 31.0 / 45.0, 1e-9)?;

    // the same protocol through the server, killed mid-way
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    let fixture: Vec<Instance> = (0..10)
        .map(|i| {
            let seg: Vec<Sentence> = (1..=4).map(|k| Sentence::new(format!("Fable {i} beat {k} unfolds."))).collect();
            Instance::Msd(forge_msd(&format!("f{i:02}"), &format!("fable{i}"), &seg, &[if i % 2 == 0 { 2 } else { 3 }]))
        })
        .collect();
    let probe_insts: Vec<Instance> = (0..5)
        .map(|i| {
            let seg: Vec<Sentence> = (1..=4).map(|k| Sentence::new(format!("Probe {i} step {k} runs."))).collect();
            Instance::Msd(forge_msd(&format!("p{i}"), &format!("probe{i}"), &seg, &[2]))
        })
        .collect();
    write_instances(std::fs::File::create(d.join("fixture.jsonl"))?, &fixture)?;
    write_instances(std::fs::File::create(d.join("probes.jsonl"))?, &probe_insts)?;
    let mut auto: BTreeMap<String, (usize, u8)> = BTreeMap::new();
    for (i, inst) in fixture.iter().enumerate() {
        for (k, &y) in inst.labels().iter().enumerate() {
            auto.insert(format!("{}@{}", inst.id(), k + 1), (2 * i + k, y));
        }
    }
    ensure!(auto.len() == 20, "fixture has {} candidates", auto.len());
    let probes: HashMap<String, u8> = probe_insts
        .iter()
        .flat_map(|p| p.labels().iter().enumerate().map(move |(k, &y)| (format!("{}@{}", p.id(), k + 1), y)))
        .collect();

    let server = Server::start(d)?;
    let mut tokens = Vec::new();
    for role in ["verification"; 4].into_iter().chain(["baseline"; 3]) {
        let (code, v) = server.request("POST", "/api/workers", Some(ADMIN), Some(json!({ "role": role })))?;
        ensure!(code == 201, "create worker returned {code}");
        tokens.push(v["token"].as_str().unwrap().to_string());
    }
    let verdict = |j: usize| {
        let auto = auto.clone();
        move |id: &str| {
            let (idx, y) = auto[id];
            if j < idx % 5 { y } else { 1 - y }
        }
    };
    work(&server, &tokens[0], &probes, usize::MAX, &verdict(0))?;
    work(&server, &tokens[1], &probes, usize::MAX, &verdict(1))?;
    work(&server, &tokens[2], &probes, 13, &verdict(2))?;
    let before = server.digest()?;
    server.kill()?;

    let server = Server::start(d)?;
    let after = server.digest()?;
    ensure!(before == after, "state after restart {after:?} differs from before the kill {before:?}");
    let offline = incoforge_annotation::service::load_state(&d.join("ann"))?;
    ensure!(incoforge_annotation::service::digest(&offline) == before.0, "offline replay digest differs");
    work(&server, &tokens[2], &probes, usize::MAX, &verdict(2))?;
    work(&server, &tokens[3], &probes, usize::MAX, &verdict(3))?;

    let (code, f) = server.request("POST", "/api/filter", Some(ADMIN), Some(json!({})))?;
    ensure!(code == 200, "filter returned {code}: {f}");
    let kept: Vec<String> = f["kept_ids"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    let mut want: Vec<String> = auto.iter().filter(|(_, (i, _))| i % 5 >= 3).map(|(id, _)| id.clone()).collect();
    let mut got = kept.clone();
    want.sort();
    got.sort();
    ensure!(got == want, "server kept {got:?}, expected {want:?}");

    let baseline_label = |b: usize| {
        let auto = auto.clone();
        move |id: &str| {
            let (idx, y) = auto[id];
            match b {
                0 => y,
                1 => y ^ (idx % 2 == 1) as u8,
                _ => 1,
            }
        }
    };
    for b in 0..3 {
        work(&server, &tokens[4 + b], &probes, usize::MAX, &baseline_label(b))?;
    }
    let (code, r) = server.request("GET", "/api/baseline", Some(ADMIN), None)?;
    ensure!(code == 200, "baseline returned {code}: {r}");
    let mut mean = [0.0; 4];
    for b in 0..3 {
        let f = baseline_label(b);
        let pairs: Vec<(u8, u8)> = kept.iter().map(|id| (f(id), auto[id].1)).collect();
        for (m, s) in mean.iter_mut().zip(judge_scores(&pairs)) {
            *m += s / 3.0;
        }
    }
    for (k, want) in ["accuracy", "precision", "recall", "f1"].iter().zip(mean) {
        close(&format!("server baseline {k}"), r[k].as_f64().unwrap_or(f64::NAN), want, 1e-9)?;
    }
    server.kill()?;
    Ok(format!(
        "kept {} of 20 in both routes; digest stable across kill -9 at {} judgments; baseline F1 {:.4}",
        kept.len(),
        before.1,
        mean[3]
    ))
}
