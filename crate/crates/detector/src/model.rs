//! Post-LN transformer encoder with a detection head and a matching head.

use rand::Rng as _;

use incoforge_core::seed::Rng;

use crate::config::{InputMode, TransformerConfig};
use crate::error::{DetectorError, Result};
use crate::ops::{
    dot, gelu, gelu_grad, layer_norm, layer_norm_backward, matmul, matmul_backward, sigmoid, softmax_rows,
};
use crate::params::{build_layout, index_for, init_params, Index, ParamSpec, Span};
use crate::scalar::Scalar;

/// One encoder input.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput<T> {
    /// `n × d_embed` row-major sentence embeddings.
    Sentences { data: Vec<T>, n: usize },
    Tokens(Vec<u32>),
}

impl<T: Scalar> ModelInput<T> {
    pub fn len(&self) -> usize {
        match self {
            ModelInput::Sentences { n, .. } => *n,
            ModelInput::Tokens(ids) => ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> InputMode {
        match self {
            ModelInput::Sentences { .. } => InputMode::Sentence,
            ModelInput::Tokens(_) => InputMode::Token,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelInput<U> {
        match self {
            ModelInput::Sentences { data, n } => {
                ModelInput::Sentences { data: data.iter().map(|x| U::of(x.f64())).collect(), n: *n }
            }
            ModelInput::Tokens(ids) => ModelInput::Tokens(ids.clone()),
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    h_in: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `n_heads × n × n` attention probabilities.
    attn: Vec<T>,
    o: Vec<T>,
    drop1: Option<Vec<T>>,
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
    drop2: Option<Vec<T>>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
}

/// Everything a backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub n: usize,
    /// Final contextual vectors, `n × d_model`.
    pub hidden: Vec<T>,
    /// Attention cells (query × key pairs) evaluated per layer.
    pub attention_cells: Vec<usize>,
    input: ModelInput<T>,
    drop0: Option<Vec<T>>,
    xhat0: Vec<T>,
    rstd0: Vec<T>,
    layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> Trace<T> {
    /// Attention probabilities of one head in one layer, `n × n`.
    pub fn attention(&self, layer: usize, head: usize) -> &[T] {
        let n = self.n;
        &self.layers[layer].attn[head * n * n..(head + 1) * n * n]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.hidden.len() / self.n;
        &self.hidden[i * d..(i + 1) * d]
    }
}

/// Head outputs for a set of representative positions.
#[derive(Debug, Clone)]
pub struct HeadOutput<T> {
    pub reps: Vec<usize>,
    pub logits: Vec<T>,
    /// `reps.len() × d_embed`.
    pub hhat: Vec<T>,
    s: Vec<T>,
    det_z: Vec<T>,
    det_g: Vec<T>,
    sm_z: Vec<T>,
    sm_g: Vec<T>,
}

impl<T: Scalar> HeadOutput<T> {
    pub fn probs(&self) -> Vec<T> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }

    pub fn hhat_row(&self, r: usize) -> &[T] {
        let e = self.hhat.len() / self.reps.len().max(1);
        &self.hhat[r * e..(r + 1) * e]
    }
}

#[derive(Debug, Clone)]
pub struct DetectorModel<T> {
    config: TransformerConfig,
    specs: Vec<ParamSpec>,
    ix: Index,
    params: Vec<T>,
}

pub fn param_count(cfg: &TransformerConfig) -> usize {
    let (specs, _, _) = build_layout(cfg);
    specs.last().map_or(0, |s| s.offset + s.len())
}

impl<T: Scalar> DetectorModel<T> {
    pub fn new(config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let (specs, inits, ix) = build_layout(&config);
        let params = init_params(&config, &specs, &inits).into_iter().map(T::of).collect();
        Ok(Self { config, specs, ix, params })
    }

    pub fn from_params(config: TransformerConfig, manifest: &[ParamSpec], params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let ix = index_for(&config, manifest)
            .ok_or_else(|| DetectorError::Checkpoint("parameter manifest does not match the config".into()))?;
        if params.len() != param_count(&config) {
            return Err(DetectorError::Checkpoint(format!(
                "expected {} parameters, found {}",
                param_count(&config),
                params.len()
            )));
        }
        let (specs, _, _) = build_layout(&config);
        Ok(Self { config, specs, ix, params })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn manifest(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn cast<U: Scalar>(&self) -> DetectorModel<U> {
        DetectorModel {
            config: self.config.clone(),
            specs: self.specs.clone(),
            ix: self.ix.clone(),
            params: self.params.iter().map(|x| U::of(x.f64())).collect(),
        }
    }

    fn p(&self, s: Span) -> &[T] {
        s.of(&self.params)
    }

    fn dropout_mask(&self, len: usize, rng: &mut Option<&mut Rng>) -> Option<Vec<T>> {
        let p = self.config.dropout;
        let rng = rng.as_deref_mut()?;
        if p <= 0.0 {
            return None;
        }
        let keep = T::of(1.0 / (1.0 - p));
        Some((0..len).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect())
    }

    /// Runs the encoder. Dropout is active only when `rng` is given.
    /// Keys with `key_mask[j] == false` are ignored by every query.
    pub fn forward(
        &self,
        input: &ModelInput<T>,
        key_mask: Option<&[bool]>,
        mut rng: Option<&mut Rng>,
    ) -> Result<Trace<T>> {
        let cfg = &self.config;
        if input.mode() != cfg.mode {
            return Err(DetectorError::ModeMismatch(format!("model is {}, input is {}", cfg.mode, input.mode())));
        }
        let n = input.len();
        if n == 0 {
            return Err(DetectorError::Invalid("empty input".into()));
        }
        if n > cfg.max_positions {
            return Err(DetectorError::SequenceTooLong { len: n, max: cfg.max_positions });
        }
        if let Some(m) = key_mask {
            if m.len() != n || !m.iter().any(|&b| b) {
                return Err(DetectorError::Invalid("key mask must match the input and keep a position".into()));
            }
        }
        let d = cfg.d_model;
        let ix = &self.ix;
        let mut e = match input {
            ModelInput::Sentences { data, n } => {
                if data.len() != n * cfg.d_embed {
                    return Err(DetectorError::Invalid(format!(
                        "sentence input has {} values, expected {n} × {}",
                        data.len(),
                        cfg.d_embed
                    )));
                }
                matmul(data, self.p(ix.input_w), Some(self.p(ix.input_b)), *n, cfg.d_embed, d)
            }
            ModelInput::Tokens(ids) => {
                let table = self.p(ix.input_w);
                let mut e = Vec::with_capacity(n * d);
                for &id in ids {
                    let id = id as usize;
                    if id >= cfg.vocab_size {
                        return Err(DetectorError::Invalid(format!("token id {id} outside vocabulary")));
                    }
                    e.extend_from_slice(&table[id * d..(id + 1) * d]);
                }
                e
            }
        };
        let pos = self.p(ix.pos);
        for (x, &p) in e.iter_mut().zip(&pos[..n * d]) {
            *x += p;
        }
        let (mut h, xhat0, rstd0) = layer_norm(&e, self.p(ix.ln_e_g), self.p(ix.ln_e_b), d);
        let drop0 = self.dropout_mask(n * d, &mut rng);
        if let Some(m) = &drop0 {
            h.iter_mut().zip(m).for_each(|(x, &k)| *x *= k);
        }

        let heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let mut cells = Vec::with_capacity(cfg.n_layers);
        for li in &ix.layers {
            let q = matmul(&h, self.p(li.wq), Some(self.p(li.bq)), n, d, d);
            let k = matmul(&h, self.p(li.wk), None, n, d, d);
            let v = matmul(&h, self.p(li.wv), Some(self.p(li.bv)), n, d, d);
            let mut attn = vec![T::zero(); heads * n * n];
            let mut o64 = vec![0f64; n * d];
            let mut layer_cells = 0;
            for hd in 0..heads {
                let c0 = hd * dh;
                let a = &mut attn[hd * n * n..(hd + 1) * n * n];
                for i in 0..n {
                    let qi = &q[i * d + c0..i * d + c0 + dh];
                    for j in 0..n {
                        a[i * n + j] = dot(qi, &k[j * d + c0..j * d + c0 + dh]) * scale;
                    }
                }
                layer_cells += n * n;
                softmax_rows(a, n, key_mask);
                for i in 0..n {
                    let oi = &mut o64[i * d + c0..i * d + c0 + dh];
                    for j in 0..n {
                        let w = a[i * n + j];
                        if w == T::zero() {
                            continue;
                        }
                        let w = w.f64();
                        for (x, &vv) in oi.iter_mut().zip(&v[j * d + c0..j * d + c0 + dh]) {
                            *x += w * vv.f64();
                        }
                    }
                }
            }
            let o: Vec<T> = o64.into_iter().map(T::of).collect();
            cells.push(layer_cells / heads);
            let mut att_out = matmul(&o, self.p(li.wo), Some(self.p(li.bo)), n, d, d);
            let drop1 = self.dropout_mask(n * d, &mut rng);
            if let Some(m) = &drop1 {
                att_out.iter_mut().zip(m).for_each(|(x, &k)| *x *= k);
            }
            let r1: Vec<T> = h.iter().zip(&att_out).map(|(&a, &b)| a + b).collect();
            let (h1, xhat1, rstd1) = layer_norm(&r1, self.p(li.ln1_g), self.p(li.ln1_b), d);
            let u = matmul(&h1, self.p(li.w1), Some(self.p(li.b1)), n, d, cfg.d_ff);
            let g: Vec<T> = u.iter().map(|&x| gelu(x)).collect();
            let mut f = matmul(&g, self.p(li.w2), Some(self.p(li.b2)), n, cfg.d_ff, d);
            let drop2 = self.dropout_mask(n * d, &mut rng);
            if let Some(m) = &drop2 {
                f.iter_mut().zip(m).for_each(|(x, &k)| *x *= k);
            }
            let r2: Vec<T> = h1.iter().zip(&f).map(|(&a, &b)| a + b).collect();
            let (h2, xhat2, rstd2) = layer_norm(&r2, self.p(li.ln2_g), self.p(li.ln2_b), d);
            layers.push(LayerCache {
                h_in: std::mem::replace(&mut h, h2),
                q,
                k,
                v,
                attn,
                o,
                drop1,
                xhat1,
                rstd1,
                h1,
                u,
                g,
                drop2,
                xhat2,
                rstd2,
            });
        }
        Ok(Trace {
            n,
            hidden: h,
            attention_cells: cells,
            input: input.clone(),
            drop0,
            xhat0,
            rstd0,
            layers,
        })
    }

    /// Applies both heads to the contextual vectors at `reps`.
    pub fn heads(&self, trace: &Trace<T>, reps: &[usize]) -> Result<HeadOutput<T>> {
        let d = self.config.d_model;
        let de = self.config.d_embed;
        let ix = &self.ix;
        let r = reps.len();
        let mut s = Vec::with_capacity(r * d);
        for &p in reps {
            if p >= trace.n {
                return Err(DetectorError::Invalid(format!("representative {p} outside sequence of {}", trace.n)));
            }
            s.extend_from_slice(trace.row(p));
        }
        let det_z = matmul(&s, self.p(ix.det_w1), Some(self.p(ix.det_b1)), r, d, d);
        let det_g: Vec<T> = det_z.iter().map(|&x| gelu(x)).collect();
        let logits = matmul(&det_g, self.p(ix.det_w2), Some(self.p(ix.det_b2)), r, d, 1);
        let sm_z = matmul(&s, self.p(ix.sm_w1), Some(self.p(ix.sm_b1)), r, d, d);
        let sm_g: Vec<T> = sm_z.iter().map(|&x| gelu(x)).collect();
        let hhat = matmul(&sm_g, self.p(ix.sm_w2), Some(self.p(ix.sm_b2)), r, d, de);
        Ok(HeadOutput { reps: reps.to_vec(), logits, hhat, s, det_z, det_g, sm_z, sm_g })
    }

    /// Back-propagates head gradients (`dlogits`, `dhhat`) through the heads and
    /// the encoder, accumulating into `grad` (same layout as the parameters).
    pub fn backward(&self, trace: &Trace<T>, out: &HeadOutput<T>, dlogits: &[T], dhhat: &[T], grad: &mut [T]) {
        let cfg = &self.config;
        let (d, de, n) = (cfg.d_model, cfg.d_embed, trace.n);
        let ix = &self.ix;
        let r = out.reps.len();

        // detection head
        let dg = matmul_backward(&out.det_g, self.p(ix.det_w2), dlogits, r, d, 1, ix.det_w2.of_mut(grad), None);
        grad[ix.det_b2.off] += dlogits.iter().copied().sum::<T>();
        let dz: Vec<T> = dg.iter().zip(&out.det_z).map(|(&g, &z)| g * gelu_grad(z)).collect();
        let mut ds = matmul_backward(&out.s, self.p(ix.det_w1), &dz, r, d, d, ix.det_w1.of_mut(grad), None);
        accumulate_bias(&dz, d, ix.det_b1.of_mut(grad));

        // matching head
        let dg2 = matmul_backward(&out.sm_g, self.p(ix.sm_w2), dhhat, r, d, de, ix.sm_w2.of_mut(grad), None);
        accumulate_bias(dhhat, de, ix.sm_b2.of_mut(grad));
        let dz2: Vec<T> = dg2.iter().zip(&out.sm_z).map(|(&g, &z)| g * gelu_grad(z)).collect();
        let ds2 = matmul_backward(&out.s, self.p(ix.sm_w1), &dz2, r, d, d, ix.sm_w1.of_mut(grad), None);
        accumulate_bias(&dz2, d, ix.sm_b1.of_mut(grad));
        ds.iter_mut().zip(&ds2).for_each(|(a, &b)| *a += b);

        let mut dh = vec![T::zero(); n * d];
        for (row, &p) in out.reps.iter().enumerate() {
            for c in 0..d {
                dh[p * d + c] += ds[row * d + c];
            }
        }

        let heads = cfg.n_heads;
        let dh_w = cfg.head_dim();
        let scale = T::of(1.0 / (dh_w as f64).sqrt());
        for (li, lc) in ix.layers.iter().zip(&trace.layers).rev() {
            // FFN block
            let (g2, b2) = split_two(grad, li.ln2_g, li.ln2_b);
            let dr2 = layer_norm_backward(&dh, &lc.xhat2, &lc.rstd2, self.p(li.ln2_g), d, g2, b2);
            let mut df = dr2.clone();
            if let Some(m) = &lc.drop2 {
                df.iter_mut().zip(m).for_each(|(x, &k)| *x *= k);
            }
            let dgf = matmul_backward(&lc.g, self.p(li.w2), &df, n, cfg.d_ff, d, li.w2.of_mut(grad), None);
            accumulate_bias(&df, d, li.b2.of_mut(grad));
            let du: Vec<T> = dgf.iter().zip(&lc.u).map(|(&g, &u)| g * gelu_grad(u)).collect();
            let dh1_ffn = matmul_backward(&lc.h1, self.p(li.w1), &du, n, d, cfg.d_ff, li.w1.of_mut(grad), None);
            accumulate_bias(&du, cfg.d_ff, li.b1.of_mut(grad));
            let dh1: Vec<T> = dr2.iter().zip(&dh1_ffn).map(|(&a, &b)| a + b).collect();

            // attention block
            let (g1, b1) = split_two(grad, li.ln1_g, li.ln1_b);
            let dr1 = layer_norm_backward(&dh1, &lc.xhat1, &lc.rstd1, self.p(li.ln1_g), d, g1, b1);
            let mut da = dr1.clone();
            if let Some(m) = &lc.drop1 {
                da.iter_mut().zip(m).for_each(|(x, &k)| *x *= k);
            }
            let d_o = matmul_backward(&lc.o, self.p(li.wo), &da, n, d, d, li.wo.of_mut(grad), None);
            accumulate_bias(&da, d, li.bo.of_mut(grad));

            let mut dq = vec![0f64; n * d];
            let mut dk = vec![0f64; n * d];
            let mut dv = vec![0f64; n * d];
            let mut dscore = vec![0f64; n * n];
            for hd in 0..heads {
                let c0 = hd * dh_w;
                let a = &lc.attn[hd * n * n..(hd + 1) * n * n];
                for i in 0..n {
                    let doi = &d_o[i * d + c0..i * d + c0 + dh_w];
                    let mut rowdot = 0f64;
                    for j in 0..n {
                        let aij = a[i * n + j].f64();
                        let da_ij = dot64(doi, &lc.v[j * d + c0..j * d + c0 + dh_w]);
                        dscore[i * n + j] = da_ij;
                        rowdot += aij * da_ij;
                        if aij != 0.0 {
                            for (x, &g) in dv[j * d + c0..j * d + c0 + dh_w].iter_mut().zip(doi) {
                                *x += aij * g.f64();
                            }
                        }
                    }
                    for j in 0..n {
                        let aij = a[i * n + j].f64();
                        dscore[i * n + j] = aij * (dscore[i * n + j] - rowdot) * scale.f64();
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        let s = dscore[i * n + j];
                        if s == 0.0 {
                            continue;
                        }
                        for c in 0..dh_w {
                            dq[i * d + c0 + c] += s * lc.k[j * d + c0 + c].f64();
                            dk[j * d + c0 + c] += s * lc.q[i * d + c0 + c].f64();
                        }
                    }
                }
            }
            let (dq, dk, dv): (Vec<T>, Vec<T>, Vec<T>) = (
                dq.into_iter().map(T::of).collect(),
                dk.into_iter().map(T::of).collect(),
                dv.into_iter().map(T::of).collect(),
            );
            let dhq = matmul_backward(&lc.h_in, self.p(li.wq), &dq, n, d, d, li.wq.of_mut(grad), None);
            accumulate_bias(&dq, d, li.bq.of_mut(grad));
            let dhk = matmul_backward(&lc.h_in, self.p(li.wk), &dk, n, d, d, li.wk.of_mut(grad), None);
            let dhv = matmul_backward(&lc.h_in, self.p(li.wv), &dv, n, d, d, li.wv.of_mut(grad), None);
            accumulate_bias(&dv, d, li.bv.of_mut(grad));
            for i in 0..n * d {
                dh[i] = dr1[i] + dhq[i] + dhk[i] + dhv[i];
            }
        }

        // embeddings
        if let Some(m) = &trace.drop0 {
            dh.iter_mut().zip(m).for_each(|(x, &k)| *x *= k);
        }
        let (ge, be) = split_two(grad, ix.ln_e_g, ix.ln_e_b);
        let de_in = layer_norm_backward(&dh, &trace.xhat0, &trace.rstd0, self.p(ix.ln_e_g), d, ge, be);
        let gpos = ix.pos.of_mut(grad);
        for (g, &x) in gpos[..n * d].iter_mut().zip(&de_in) {
            *g += x;
        }
        match &trace.input {
            ModelInput::Sentences { data: x, .. } => {
                let _ = matmul_backward(x, self.p(ix.input_w), &de_in, n, cfg.d_embed, d, ix.input_w.of_mut(grad), None);
                accumulate_bias(&de_in, d, ix.input_b.of_mut(grad));
            }
            ModelInput::Tokens(ids) => {
                let table = ix.input_w.of_mut(grad);
                for (i, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    for c in 0..d {
                        table[id * d + c] += de_in[i * d + c];
                    }
                }
            }
        }
    }

}

fn accumulate_bias<T: Scalar>(dy: &[T], m: usize, db: &mut [T]) {
    let mut s = vec![0f64; m];
    for row in dy.chunks(m) {
        for (g, &x) in s.iter_mut().zip(row) {
            *g += x.f64();
        }
    }
    db.iter_mut().zip(&s).for_each(|(g, &x)| *g += T::of(x));
}

fn dot64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum()
}

/// Two disjoint mutable parameter slices; `a` must precede `b`.
fn split_two<T>(grad: &mut [T], a: Span, b: Span) -> (&mut [T], &mut [T]) {
    debug_assert!(a.off + a.len <= b.off);
    let (lo, hi) = grad.split_at_mut(b.off);
    (&mut lo[a.off..a.off + a.len], &mut hi[..b.len])
}
