//! Joint objective: mean BCE over labeled positions plus `λ_sm` times the
//! mean cosine distance at corrupted positions.

use rayon::prelude::*;

use incoforge_core::seed::Rng;

use crate::data::Example;
use crate::error::Result;
use crate::model::DetectorModel;
use crate::ops::{dot, sigmoid, softplus};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub bce_sum: f64,
    pub n_labels: usize,
    pub sm_sum: f64,
    pub n_sm: usize,
    /// Matching outputs that were exactly zero, scored as cosine 0.
    pub zero_hhat: usize,
}

impl LossStats {
    pub fn bce(&self) -> f64 {
        if self.n_labels == 0 { 0.0 } else { self.bce_sum / self.n_labels as f64 }
    }

    pub fn sm(&self) -> f64 {
        if self.n_sm == 0 { 0.0 } else { self.sm_sum / self.n_sm as f64 }
    }

    pub fn total(&self, sm_weight: f64) -> f64 {
        self.bce() + sm_weight * self.sm()
    }

    pub fn merge(&mut self, o: &LossStats) {
        self.bce_sum += o.bce_sum;
        self.n_labels += o.n_labels;
        self.sm_sum += o.sm_sum;
        self.n_sm += o.n_sm;
        self.zero_hhat += o.zero_hhat;
    }
}

/// Normalizers shared by every example of a batch.
#[derive(Debug, Clone, Copy)]
pub struct Scale {
    pub bce: f64,
    pub sm: f64,
}

impl Scale {
    pub fn for_batch<T>(batch: &[&Example<T>], sm_weight: f64) -> Self {
        let n_labels: usize = batch.iter().map(|e| e.labels.len()).sum();
        let n_sm: usize = batch.iter().map(|e| e.sm_targets.len()).sum();
        Self {
            bce: if n_labels == 0 { 0.0 } else { 1.0 / n_labels as f64 },
            sm: if n_sm == 0 { 0.0 } else { sm_weight / n_sm as f64 },
        }
    }
}

/// Loss of one example; when `grad` is given, adds the scaled gradient.
pub fn example_loss<T: Scalar>(
    model: &DetectorModel<T>,
    ex: &Example<T>,
    scale: Scale,
    rng: Option<&mut Rng>,
    grad: Option<&mut [T]>,
) -> Result<LossStats> {
    let trace = model.forward(&ex.input, None, rng)?;
    let out = model.heads(&trace, &ex.reps)?;
    let mut stats = LossStats { n_labels: ex.labels.len(), n_sm: ex.sm_targets.len(), ..Default::default() };
    let mut dlogits = vec![T::zero(); ex.labels.len()];
    for (k, (&z, &y)) in out.logits.iter().zip(&ex.labels).enumerate() {
        let y_t = T::of(y as f64);
        stats.bce_sum += (softplus(z) - y_t * z).f64();
        dlogits[k] = (sigmoid(z) - y_t) * T::of(scale.bce);
    }
    let de = model.config().d_embed;
    let mut dhhat = vec![T::zero(); out.hhat.len()];
    for (k, target) in &ex.sm_targets {
        let h = out.hhat_row(*k);
        let hn = dot(h, h).sqrt();
        let tn = dot(target, target).sqrt();
        if hn == T::zero() || tn == T::zero() {
            stats.zero_hhat += 1;
            stats.sm_sum += 1.0;
            continue;
        }
        let cos = dot(h, target) / (hn * tn);
        stats.sm_sum += (T::one() - cos).f64();
        let w = T::of(scale.sm);
        for c in 0..de {
            dhhat[k * de + c] = -w * (target[c] / (hn * tn) - cos * h[c] / (hn * hn));
        }
    }
    if let Some(grad) = grad {
        model.backward(&trace, &out, &dlogits, &dhhat, grad);
    }
    Ok(stats)
}

/// Loss and gradient of a batch. Per-example gradients are summed in batch
/// order, so the result does not depend on `parallel`.
pub fn batch_grad<T: Scalar>(
    model: &DetectorModel<T>,
    batch: &[&Example<T>],
    sm_weight: f64,
    mut rngs: Option<Vec<Rng>>,
    parallel: bool,
) -> Result<(LossStats, Vec<T>)> {
    let scale = Scale::for_batch(batch, sm_weight);
    let np = model.num_params();
    let mut total = LossStats::default();
    let mut grad = vec![T::zero(); np];
    if parallel && batch.len() > 1 {
        let rngs: Vec<Option<Rng>> = match rngs.take() {
            Some(r) => r.into_iter().map(Some).collect(),
            None => vec![None; batch.len()],
        };
        let parts: Vec<Result<(LossStats, Vec<T>)>> = batch
            .par_iter()
            .zip(rngs)
            .map(|(ex, mut rng)| {
                let mut g = vec![T::zero(); np];
                let s = example_loss(model, ex, scale, rng.as_mut(), Some(&mut g))?;
                Ok((s, g))
            })
            .collect();
        for part in parts {
            let (s, g) = part?;
            total.merge(&s);
            grad.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
        }
    } else {
        let mut g = vec![T::zero(); np];
        for (i, ex) in batch.iter().enumerate() {
            g.iter_mut().for_each(|x| *x = T::zero());
            let rng = rngs.as_mut().map(|r| &mut r[i]);
            let s = example_loss(model, ex, scale, rng, Some(&mut g))?;
            total.merge(&s);
            grad.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
        }
    }
    Ok((total, grad))
}

/// Eval-mode loss over a dataset, no gradients.
pub fn dataset_loss<T: Scalar>(model: &DetectorModel<T>, examples: &[Example<T>]) -> Result<LossStats> {
    let mut total = LossStats::default();
    let unit = Scale { bce: 0.0, sm: 0.0 };
    for ex in examples {
        total.merge(&example_loss(model, ex, unit, None, None)?);
    }
    Ok(total)
}
