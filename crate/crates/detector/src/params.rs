use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{InputMode, TransformerConfig};

/// A named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Span {
    pub off: usize,
    pub len: usize,
}

impl Span {
    #[inline]
    pub fn of<'a, T>(&self, v: &'a [T]) -> &'a [T] {
        &v[self.off..self.off + self.len]
    }

    #[inline]
    pub fn of_mut<'a, T>(&self, v: &'a mut [T]) -> &'a mut [T] {
        &mut v[self.off..self.off + self.len]
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct LayerIdx {
    pub wq: Span,
    pub bq: Span,
    pub wk: Span,
    pub wv: Span,
    pub bv: Span,
    pub wo: Span,
    pub bo: Span,
    pub ln1_g: Span,
    pub ln1_b: Span,
    pub w1: Span,
    pub b1: Span,
    pub w2: Span,
    pub b2: Span,
    pub ln2_g: Span,
    pub ln2_b: Span,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Index {
    /// `d_embed × d_model` projection (sentence mode) or `vocab × d_model` table (token mode).
    pub input_w: Span,
    pub input_b: Span,
    pub pos: Span,
    pub ln_e_g: Span,
    pub ln_e_b: Span,
    pub layers: Vec<LayerIdx>,
    pub det_w1: Span,
    pub det_b1: Span,
    pub det_w2: Span,
    pub det_b2: Span,
    pub sm_w1: Span,
    pub sm_b1: Span,
    pub sm_w2: Span,
    pub sm_b2: Span,
}

struct Builder {
    specs: Vec<ParamSpec>,
    inits: Vec<Init>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Span {
        let len = shape.iter().product();
        let span = Span { off: self.total, len };
        self.specs.push(ParamSpec { name, shape: shape.to_vec(), offset: self.total });
        self.inits.push(init);
        self.total += len;
        span
    }
}

pub(crate) fn build_layout(cfg: &TransformerConfig) -> (Vec<ParamSpec>, Vec<Init>, Index) {
    let d = cfg.d_model;
    let mut b = Builder { specs: Vec::new(), inits: Vec::new(), total: 0 };
    let mut ix = Index::default();
    match cfg.mode {
        InputMode::Sentence => {
            ix.input_w = b.add("input.proj.weight".into(), &[cfg.d_embed, d], Init::Normal);
            ix.input_b = b.add("input.proj.bias".into(), &[d], Init::Zeros);
        }
        InputMode::Token => {
            ix.input_w = b.add("input.tokens".into(), &[cfg.vocab_size, d], Init::Normal);
        }
    }
    ix.pos = b.add("input.positions".into(), &[cfg.max_positions, d], Init::Normal);
    ix.ln_e_g = b.add("input.norm.gamma".into(), &[d], Init::Ones);
    ix.ln_e_b = b.add("input.norm.beta".into(), &[d], Init::Zeros);
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        let li = LayerIdx {
            wq: b.add(p("attn.q.weight"), &[d, d], Init::Normal),
            bq: b.add(p("attn.q.bias"), &[d], Init::Zeros),
            wk: b.add(p("attn.k.weight"), &[d, d], Init::Normal),
            wv: b.add(p("attn.v.weight"), &[d, d], Init::Normal),
            bv: b.add(p("attn.v.bias"), &[d], Init::Zeros),
            wo: b.add(p("attn.out.weight"), &[d, d], Init::Normal),
            bo: b.add(p("attn.out.bias"), &[d], Init::Zeros),
            ln1_g: b.add(p("attn.norm.gamma"), &[d], Init::Ones),
            ln1_b: b.add(p("attn.norm.beta"), &[d], Init::Zeros),
            w1: b.add(p("ffn.in.weight"), &[d, cfg.d_ff], Init::Normal),
            b1: b.add(p("ffn.in.bias"), &[cfg.d_ff], Init::Zeros),
            w2: b.add(p("ffn.out.weight"), &[cfg.d_ff, d], Init::Normal),
            b2: b.add(p("ffn.out.bias"), &[d], Init::Zeros),
            ln2_g: b.add(p("ffn.norm.gamma"), &[d], Init::Ones),
            ln2_b: b.add(p("ffn.norm.beta"), &[d], Init::Zeros),
        };
        ix.layers.push(li);
    }
    ix.det_w1 = b.add("head.detect.hidden.weight".into(), &[d, d], Init::Normal);
    ix.det_b1 = b.add("head.detect.hidden.bias".into(), &[d], Init::Zeros);
    ix.det_w2 = b.add("head.detect.out.weight".into(), &[d, 1], Init::Normal);
    ix.det_b2 = b.add("head.detect.out.bias".into(), &[1], Init::Zeros);
    ix.sm_w1 = b.add("head.match.hidden.weight".into(), &[d, d], Init::Normal);
    ix.sm_b1 = b.add("head.match.hidden.bias".into(), &[d], Init::Zeros);
    ix.sm_w2 = b.add("head.match.out.weight".into(), &[d, cfg.d_embed], Init::Normal);
    ix.sm_b2 = b.add("head.match.out.bias".into(), &[cfg.d_embed], Init::Zeros);
    (b.specs, b.inits, ix)
}

/// Re-derives the index from a stored manifest, checking it matches the config.
pub(crate) fn index_for(cfg: &TransformerConfig, manifest: &[ParamSpec]) -> Option<Index> {
    let (specs, _, ix) = build_layout(cfg);
    (specs == manifest).then_some(ix)
}

pub(crate) fn init_params(cfg: &TransformerConfig, specs: &[ParamSpec], inits: &[Init]) -> Vec<f64> {
    let total = specs.last().map_or(0, |s| s.offset + s.len());
    let mut out = vec![0.0; total];
    let normal = Normal::new(0.0, cfg.init_std).expect("validated init_std");
    for (spec, init) in specs.iter().zip(inits) {
        let mut rng = incoforge_core::seed::rng_for(cfg.init_seed, &spec.name);
        let dst = &mut out[spec.offset..spec.offset + spec.len()];
        match init {
            Init::Normal => dst.iter_mut().for_each(|x| *x = normal.sample(&mut rng)),
            Init::Zeros => {}
            Init::Ones => dst.iter_mut().for_each(|x| *x = 1.0),
        }
    }
    out
}
