use std::collections::HashSet;
use std::fs::{self, File};
use std::io::BufWriter;

use anyhow::Context;
use serde_json::json;

use incoforge_core::corpus::{read_corpus, save_corpus, segment_text};
use incoforge_core::forge::{forge_dataset, make_pretrain_segments, write_instances, ConfounderSearch, ForgeConfig, Mode};
use incoforge_core::retrieval::{Bm25Index, Bm25Params, IndexOptions};
use incoforge_core::{forge::corpus_hash, Narrative};

use super::{build_provider, choice, provider_spec, set_threads, token_provider};
use crate::flags::RunConfig;
use crate::manifest::{path_sha256, record};
use crate::UsageError;

fn paragraphs(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.trim().is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            cur.clear();
        } else {
            cur.push_str(line);
            cur.push('\n');
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur);
    }
    out
}

pub fn ingest(cfg: &RunConfig) -> anyhow::Result<()> {
    let input = cfg.path("input")?;
    let output = cfg.path("output")?;
    let split = choice(cfg, "split", &["paragraph", "line"])?;
    let prefix: String = cfg.get("id-prefix")?;
    let min: usize = cfg.get("min-sentences")?;
    let mut chunks: Vec<(String, String)> = Vec::new();
    if input.is_dir() {
        let mut files: Vec<_> = fs::read_dir(&input)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        for f in files {
            let stem = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            chunks.push((format!("{prefix}{stem}"), fs::read_to_string(&f)?));
        }
    } else {
        let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
        let parts = if split == "line" {
            text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect()
        } else {
            paragraphs(&text)
        };
        chunks = parts.into_iter().enumerate().map(|(i, p)| (format!("{prefix}{i:06}"), p)).collect();
    }
    let mut corpus = Vec::new();
    let mut skipped = 0usize;
    for (id, text) in chunks {
        let sents = segment_text(&text);
        if sents.len() < min.max(1) {
            skipped += 1;
            continue;
        }
        corpus.push(Narrative::from_texts(id, &sents)?);
    }
    save_corpus(&output, &corpus)?;
    let n_sent: usize = corpus.iter().map(|n| n.sentences.len()).sum();
    record(
        cfg,
        &output,
        &[&input],
        &[&output],
        json!({ "narratives": corpus.len(), "sentences": n_sent, "skipped": skipped, "corpus_hash": corpus_hash(&corpus) }),
    )?;
    println!("ingested {} narratives ({n_sent} sentences, {skipped} skipped) -> {}", corpus.len(), output.display());
    Ok(())
}

fn load_or_build_index(cfg: &RunConfig, corpus: &[Narrative], hash: &str) -> anyhow::Result<Bm25Index> {
    let options = IndexOptions { remove_stopwords: cfg.flag("stopwords")? };
    if let Some(path) = cfg.opt_path("index") {
        if path.exists() {
            if let Some(idx) = Bm25Index::load_cache(&path, hash)? {
                if idx.options() == options {
                    return Ok(idx);
                }
            }
        }
        let idx = Bm25Index::build_with(corpus, options)?;
        idx.save_cache(&path, hash)?;
        return Ok(idx);
    }
    Ok(Bm25Index::build_with(corpus, options)?)
}

pub fn index(cfg: &RunConfig) -> anyhow::Result<()> {
    let corpus_path = cfg.path("corpus")?;
    let output = cfg.path("output")?;
    let corpus = read_corpus(&corpus_path).with_context(|| format!("reading corpus {}", corpus_path.display()))?;
    let hash = corpus_hash(&corpus);
    let idx = Bm25Index::build_with(&corpus, IndexOptions { remove_stopwords: cfg.flag("stopwords")? })?;
    idx.save_cache(&output, &hash)?;
    let terms = idx.vocabulary().count();
    record(
        cfg,
        &output,
        &[&corpus_path],
        &[&output],
        json!({ "sentences": idx.n_docs(), "terms": terms, "avgdl": idx.avgdl(), "corpus_hash": hash }),
    )?;
    println!("indexed {} sentences, {terms} terms -> {}", idx.n_docs(), output.display());
    Ok(())
}

pub fn forge(cfg: &RunConfig) -> anyhow::Result<()> {
    let corpus_path = cfg.path("corpus")?;
    let output = cfg.path("output")?;
    let mode: Mode = cfg.get("mode")?;
    let mut fc = ForgeConfig::new(mode, cfg.get("segment-len")?, cfg.get("corrupt-count")?, cfg.get("seed")?);
    fc.tau = cfg.get("tau")?;
    fc.bm25_top_k = cfg.get("top-k")?;
    fc.no_boundary_removal = !cfg.flag("allow-boundary")?;
    fc.no_adjacent_removal = !cfg.flag("allow-adjacent")?;
    fc.exclude_self_narrative = !cfg.flag("allow-self-narrative")?;
    fc.constrain_replacements = cfg.flag("constrain-replacements")?;
    let window: usize = cfg.get("pretrain-window")?;
    let rate: f64 = cfg.get("pretrain-rate")?;
    if !(fc.tau > 0.0 && fc.tau <= 1.0) {
        return Err(UsageError::new("--tau", format!("must be in (0, 1], got {}", fc.tau)).into());
    }
    if fc.bm25_top_k == 0 {
        return Err(UsageError::new("--top-k", "must be at least 1").into());
    }
    if window == 0 {
        fc.validate().map_err(|e| UsageError::new("--corrupt-count", e.to_string()))?;
    }
    let params = Bm25Params::new(cfg.get("bm25-k1")?, cfg.get("bm25-b")?)
        .map_err(|e| UsageError::new("--bm25-k1", e.to_string()))?;
    let parallel = set_threads(cfg.get("threads")?)?;

    let corpus = read_corpus(&corpus_path).with_context(|| format!("reading corpus {}", corpus_path.display()))?;
    let hash = corpus_hash(&corpus);
    let (idx, tokens) = if mode == Mode::Dsd {
        (Some(load_or_build_index(cfg, &corpus, &hash)?), Some(token_provider(cfg)?))
    } else {
        (None, None)
    };
    let search = match (&idx, &tokens) {
        (Some(index), Some(provider)) => Some(ConfounderSearch { index, provider, params }),
        _ => None,
    };
    let out = if window > 0 {
        make_pretrain_segments(&corpus, window, rate, &fc, search.as_ref(), parallel)?
    } else {
        forge_dataset(&corpus, &fc, search.as_ref(), parallel)?
    };
    write_instances(BufWriter::new(File::create(&output)?), &out.instances)?;
    let mut inputs = vec![corpus_path.as_path()];
    let index_path = cfg.opt_path("index");
    if let Some(p) = index_path.as_deref() {
        inputs.push(p);
    }
    let digest = path_sha256(&output)?;
    record(cfg, &output, &inputs, &[&output], serde_json::to_value(&out.manifest)?)?;
    let c = &out.manifest.counts;
    println!(
        "forged {} {mode} instances from {} narratives ({} too short, {} without confounder) -> {}",
        c.emitted,
        c.narratives,
        c.skipped_too_short,
        c.skipped_no_confounder,
        output.display()
    );
    println!("sha256 {digest}");
    Ok(())
}

pub fn export_embeddings(cfg: &RunConfig) -> anyhow::Result<()> {
    let corpus_path = cfg.path("corpus")?;
    let output = cfg.path("output")?;
    let spec = provider_spec(cfg)?;
    let provider = build_provider(&spec)?;
    let corpus = read_corpus(&corpus_path).with_context(|| format!("reading corpus {}", corpus_path.display()))?;
    let mut seen = HashSet::new();
    let sentences = corpus.iter().flat_map(|n| n.sentences.iter()).filter(|s| seen.insert(s.text.as_str()));
    let rows = provider.export_table(&output, sentences)?;
    record(cfg, &output, &[&corpus_path], &[&output], json!({ "rows": rows, "dim": provider.dim(), "provider": spec }))?;
    println!("exported {rows} embeddings (dim {}) -> {}", provider.dim(), output.display());
    Ok(())
}
