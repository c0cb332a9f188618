//! Forward-pass cost of token mode versus sentence mode.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use incoforge_core::seed::rng_for;

use crate::config::{InputMode, TransformerConfig};
use crate::error::Result;
use crate::model::{DetectorModel, ModelInput};
use crate::vocab::{CLS, N_SPECIAL, SEP};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: InputMode,
    pub n: usize,
    pub l: usize,
    pub seq_len: usize,
    /// Counted during the forward pass, first layer.
    pub cells_per_layer: usize,
    pub layers: usize,
    pub median_secs: f64,
    pub paragraphs_per_sec: f64,
}

pub fn token_cells(n: usize, l: usize) -> usize {
    (n * l + n + 1).pow(2)
}

pub fn sentence_cells(n: usize) -> usize {
    n * n
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub ns: Vec<usize>,
    pub ls: Vec<usize>,
    pub warmup: usize,
    pub repeats: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { ns: vec![2, 4, 8, 16], ls: vec![10, 20, 40], warmup: 1, repeats: 5, vocab_size: 1000, seed: 0 }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) }
}

fn time_forward(model: &DetectorModel<f32>, input: &ModelInput<f32>, warmup: usize, repeats: usize) -> Result<(usize, f64)> {
    let mut cells = 0;
    for _ in 0..warmup {
        cells = model.forward(input, None, None)?.attention_cells[0];
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let tr = model.forward(input, None, None)?;
        times.push(t.elapsed().as_secs_f64());
        cells = tr.attention_cells[0];
    }
    Ok((cells, median(times)))
}

/// Times both modes over the `(N, L)` grid with the architecture of `base`.
/// Position tables are sized to fit the largest token sequence in the grid.
pub fn bench_forward(base: &TransformerConfig, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let max_n = opts.ns.iter().copied().max().unwrap_or(1);
    let max_l = opts.ls.iter().copied().max().unwrap_or(1);
    let sent_cfg = TransformerConfig { mode: InputMode::Sentence, vocab_size: 0, max_positions: max_n.max(1), dropout: 0.0, ..base.clone() };
    let tok_cfg = TransformerConfig {
        mode: InputMode::Token,
        vocab_size: opts.vocab_size.max(N_SPECIAL + 1),
        max_positions: max_n * max_l + max_n + 1,
        dropout: 0.0,
        ..base.clone()
    };
    let sent = DetectorModel::<f32>::new(sent_cfg)?;
    let tok = DetectorModel::<f32>::new(tok_cfg)?;
    let mut rng = rng_for(opts.seed, "bench");
    let mut rows = Vec::new();
    for &n in &opts.ns {
        let data: Vec<f32> = (0..n * base.d_embed).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
        let s_input = ModelInput::Sentences { data, n };
        let (s_cells, s_time) = time_forward(&sent, &s_input, opts.warmup, opts.repeats)?;
        for &l in &opts.ls {
            let mut ids = vec![CLS];
            for _ in 0..n {
                ids.extend((0..l).map(|_| rng.random_range(N_SPECIAL as u32..opts.vocab_size.max(N_SPECIAL + 1) as u32)));
                ids.push(SEP);
            }
            let t_input = ModelInput::Tokens(ids);
            let (t_cells, t_time) = time_forward(&tok, &t_input, opts.warmup, opts.repeats)?;
            rows.push(BenchRow {
                mode: InputMode::Token,
                n,
                l,
                seq_len: t_input.len(),
                cells_per_layer: t_cells,
                layers: base.n_layers,
                median_secs: t_time,
                paragraphs_per_sec: 1.0 / t_time.max(1e-12),
            });
            rows.push(BenchRow {
                mode: InputMode::Sentence,
                n,
                l,
                seq_len: n,
                cells_per_layer: s_cells,
                layers: base.n_layers,
                median_secs: s_time,
                paragraphs_per_sec: 1.0 / s_time.max(1e-12),
            });
        }
    }
    Ok(rows)
}
