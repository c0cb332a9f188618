use std::fs::File;
use std::io::{BufWriter, Write};

use anyhow::bail;
use serde_json::json;

use incoforge_detector::bench::{bench_forward, sentence_cells, token_cells, BenchOptions, BenchRow};
use incoforge_detector::{InputMode, TransformerConfig};

use crate::flags::RunConfig;
use crate::manifest::record;
use crate::UsageError;

/// Parses `N=2,4,8 L=10,20,40`; an omitted axis keeps its default.
pub fn parse_grid(raw: &str) -> Result<(Vec<usize>, Vec<usize>), UsageError> {
    let d = BenchOptions::default();
    let (mut ns, mut ls) = (d.ns, d.ls);
    for part in raw.split_whitespace() {
        let bad = || UsageError::new("--grid", format!("expected N=a,b,... or L=a,b,..., got {part:?}"));
        let (axis, vals) = part.split_once('=').ok_or_else(bad)?;
        let vals: Vec<usize> = vals.split(',').map(|v| v.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
        if vals.is_empty() || vals.contains(&0) {
            return Err(bad());
        }
        match axis.trim() {
            "N" | "n" => ns = vals,
            "L" | "l" => ls = vals,
            _ => return Err(bad()),
        }
    }
    Ok((ns, ls))
}

fn formula(row: &BenchRow) -> usize {
    match row.mode {
        InputMode::Token => token_cells(row.n, row.l),
        InputMode::Sentence => sentence_cells(row.n),
    }
}

pub fn bench(cfg: &RunConfig) -> anyhow::Result<()> {
    let (ns, ls) = parse_grid(cfg.raw("grid").unwrap_or(""))?;
    let mut base = TransformerConfig::desk(InputMode::Sentence, cfg.get("embed-dim")?, 0);
    base.n_layers = cfg.get("layers")?;
    base.n_heads = cfg.get("heads")?;
    base.d_model = cfg.get("d-model")?;
    base.d_ff = cfg.get("d-ff")?;
    let opts = BenchOptions {
        ns,
        ls,
        warmup: cfg.get("warmup")?,
        repeats: cfg.get("repeats")?,
        vocab_size: cfg.get("vocab-size")?,
        seed: cfg.get("seed")?,
    };
    let rows = bench_forward(&base, &opts)?;
    println!(
        "{:<9} {:>3} {:>3} {:>6} {:>10} {:>10} {:>5} {:>11} {:>12}",
        "mode", "N", "L", "seq", "cells", "formula", "ok", "median_ms", "paragraphs/s"
    );
    let mut mismatches = 0;
    for r in &rows {
        let f = formula(r);
        let ok = f == r.cells_per_layer;
        mismatches += usize::from(!ok);
        println!(
            "{:<9} {:>3} {:>3} {:>6} {:>10} {:>10} {:>5} {:>11.4} {:>12.1}",
            r.mode.to_string(),
            r.n,
            r.l,
            r.seq_len,
            r.cells_per_layer,
            f,
            if ok { "yes" } else { "NO" },
            r.median_secs * 1e3,
            r.paragraphs_per_sec
        );
    }
    for &n in &opts.ns {
        for &l in &opts.ls {
            let find = |m: InputMode| rows.iter().find(|r| r.mode == m && r.n == n && r.l == l);
            if let (Some(s), Some(t)) = (find(InputMode::Sentence), find(InputMode::Token)) {
                println!("N={n} L={l}: sentence mode {:.1}x token-mode throughput", s.paragraphs_per_sec / t.paragraphs_per_sec);
            }
        }
    }
    if let Some(out) = cfg.opt_path("output") {
        let mut w = BufWriter::new(File::create(&out)?);
        writeln!(w, "mode,n,l,seq_len,cells_per_layer,formula_cells,layers,median_secs,paragraphs_per_sec")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.mode, r.n, r.l, r.seq_len, r.cells_per_layer, formula(r), r.layers, r.median_secs, r.paragraphs_per_sec
            )?;
        }
        w.flush()?;
        drop(w);
        record(cfg, &out, &[], &[&out], json!({ "rows": rows.len(), "formula_mismatches": mismatches }))?;
    }
    if mismatches > 0 {
        bail!("{mismatches} attention-cell counts differ from the closed form");
    }
    Ok(())
}
