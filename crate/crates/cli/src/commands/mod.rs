use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;

use incoforge_core::embedder::{EmbeddingProvider, ProviderSpec};
use incoforge_core::similarity::TokenEmbeddingProvider;

use crate::flags::RunConfig;
use crate::UsageError;

mod annotate;
mod bench;
pub use bench::parse_grid;
mod data;
mod eval;
mod model;

pub fn dispatch(cfg: &RunConfig) -> anyhow::Result<()> {
    match cfg.command.as_str() {
        "ingest" => data::ingest(cfg),
        "index" => data::index(cfg),
        "forge" => data::forge(cfg),
        "train" => model::train(cfg),
        "predict" => model::predict(cfg),
        "evaluate" => eval::evaluate(cfg),
        "generate" => model::generate(cfg),
        "bench" => bench::bench(cfg),
        "serve" => annotate::serve(cfg),
        "export" => match cfg.get::<String>("kind")?.as_str() {
            "testset" => annotate::export_testset(cfg),
            "baseline" => annotate::export_baseline(cfg),
            "embeddings" => data::export_embeddings(cfg),
            other => Err(UsageError::new("--kind", format!("unknown export kind {other:?}")).into()),
        },
        other => Err(UsageError::new("command", format!("unknown command {other:?}")).into()),
    }
}

pub(crate) fn choice<'a>(cfg: &RunConfig, name: &str, allowed: &[&'a str]) -> Result<&'a str, UsageError> {
    let v: String = cfg.get(name)?;
    allowed.iter().copied().find(|a| *a == v).ok_or_else(|| {
        UsageError::new(&format!("--{name}"), format!("invalid value {v:?} (expected one of {})", allowed.join(", ")))
    })
}

pub(crate) fn provider_spec(cfg: &RunConfig) -> Result<ProviderSpec, UsageError> {
    let dim: usize = cfg.get("embed-dim")?;
    let seed: u64 = cfg.get("embed-seed")?;
    Ok(match choice(cfg, "provider", &["hash-projection", "mean-of-tokens", "precomputed"])? {
        "hash-projection" => ProviderSpec::HashProjection { dim, seed },
        "mean-of-tokens" => ProviderSpec::MeanOfTokens { dim, seed, token_vectors: cfg.raw("token-vectors").map(str::to_string) },
        _ => ProviderSpec::Precomputed {
            dim,
            seed,
            table: cfg.raw("embed-table").ok_or_else(|| UsageError::missing("embed-table"))?.to_string(),
        },
    })
}

pub(crate) fn build_provider(spec: &ProviderSpec) -> anyhow::Result<EmbeddingProvider> {
    spec.build().context("building the embedding provider")
}

pub(crate) fn token_provider(cfg: &RunConfig) -> anyhow::Result<TokenEmbeddingProvider> {
    let seed: u64 = cfg.get("embed-seed")?;
    Ok(match cfg.opt_path("token-vectors") {
        Some(p) => TokenEmbeddingProvider::load(&p, seed).with_context(|| format!("loading {}", p.display()))?,
        None => TokenEmbeddingProvider::hash_projection(cfg.get("embed-dim")?, seed),
    })
}

pub(crate) fn set_threads(n: usize) -> anyhow::Result<bool> {
    if n == 0 {
        return Err(UsageError::new("--threads", "must be at least 1").into());
    }
    if n > 1 {
        // Fails only when a pool already exists, which is fine to reuse.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(n > 1)
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_instances(path: &Path) -> anyhow::Result<Vec<incoforge_core::forge::Instance>> {
    incoforge_core::forge::read_instances(path).with_context(|| format!("reading instances from {}", path.display()))
}
