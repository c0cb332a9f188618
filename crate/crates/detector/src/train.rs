use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use incoforge_core::evalkit::{auc, Prediction, PredictionRecord};
use incoforge_core::seed::{rng_for, Rng};

use crate::data::Example;
use crate::error::{DetectorError, Result};
use crate::loss::{batch_grad, LossStats};
use crate::model::DetectorModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub sm_weight: f64,
    pub threshold: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Data-parallel gradient computation across a batch.
    pub parallel: bool,
    /// Stop once the dev AUC reaches this value.
    pub target_dev_auc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            epochs: 10,
            sm_weight: 1.0,
            threshold: 0.5,
            seed: 0,
            optimizer: Optimizer::default(),
            weight_decay: 0.0,
            grad_clip: Some(1.0),
            parallel: false,
            target_dev_auc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DetectorError::Invalid(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.sm_weight >= 0.0 && self.sm_weight.is_finite()) {
            return bad("sm_weight must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]");
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bce: f64,
    pub sm: f64,
    pub total: f64,
    pub dev_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub zero_hhat: usize,
    pub stopped_early: bool,
}

pub fn write_history_csv<W: Write>(mut w: W, history: &[EpochRecord]) -> Result<()> {
    writeln!(w, "epoch,bce,sm,total,dev_auc")?;
    for r in history {
        let dev = r.dev_auc.map(|a| format!("{a:.6}")).unwrap_or_default();
        writeln!(w, "{},{:.6},{:.6},{:.6},{}", r.epoch, r.bce, r.sm, r.total, dev)?;
    }
    Ok(())
}

struct OptState<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> OptState<T> {
    fn step(&mut self, opt: &Optimizer, lr: f64, wd: f64, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let lr_t = T::of(lr);
        let wd_t = T::of(wd);
        match *opt {
            Optimizer::Adam { beta1, beta2, eps } => {
                let (b1, b2) = (T::of(beta1), T::of(beta2));
                let c1 = T::of(1.0 - beta1.powi(self.t));
                let c2 = T::of(1.0 - beta2.powi(self.t));
                let eps = T::of(eps);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
                    self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr_t * (mh / (vh.sqrt() + eps) + wd_t * params[i]);
                }
            }
            Optimizer::Sgd { momentum } => {
                let mu = T::of(momentum);
                for i in 0..params.len() {
                    self.m[i] = mu * self.m[i] + grad[i] + wd_t * params[i];
                    params[i] -= lr_t * self.m[i];
                }
            }
        }
    }
}

/// Seeded training. Identical inputs and config give bit-identical parameters.
pub fn train<T: Scalar>(
    model: &mut DetectorModel<T>,
    train_set: &[Example<T>],
    dev_set: Option<&[Example<T>]>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(DetectorError::Invalid("empty training set".into()));
    }
    if let Some(bad) = train_set.iter().find(|e| e.input.mode() != model.config().mode) {
        return Err(DetectorError::ModeMismatch(format!("example {} does not match the model mode", bad.id)));
    }
    let task = train_set[0].task;
    if train_set.iter().any(|e| e.task != task) {
        return Err(DetectorError::ModeMismatch("training set mixes msd and dsd instances".into()));
    }
    let np = model.num_params();
    let mut state = OptState { m: vec![T::zero(); np], v: vec![T::zero(); np], t: 0 };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut zero_hhat = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng = rng_for(cfg.seed, &format!("shuffle/{epoch}"));
        order.shuffle(&mut shuffle_rng);
        let mut epoch_stats = LossStats::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example<T>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let rngs: Option<Vec<Rng>> = (model.config().dropout > 0.0)
                .then(|| chunk.iter().map(|&i| rng_for(cfg.seed, &format!("dropout/{epoch}/{i}"))).collect());
            let (stats, mut grad) = batch_grad(model, &batch, cfg.sm_weight, rngs, cfg.parallel)?;
            let (bce, sm) = (stats.bce(), stats.sm());
            if !bce.is_finite() || !sm.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(DetectorError::Divergence { epoch, batch: b, bce, sm });
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grad.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
                if norm > clip {
                    let s = T::of(clip / norm);
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            state.step(&cfg.optimizer, cfg.lr, cfg.weight_decay, model.params_mut(), &grad);
            epoch_stats.merge(&stats);
        }
        zero_hhat += epoch_stats.zero_hhat;
        let dev_auc = match dev_set {
            Some(dev) if !dev.is_empty() => Some(pooled_auc(model, dev)?),
            _ => None,
        };
        history.push(EpochRecord {
            epoch,
            bce: epoch_stats.bce(),
            sm: epoch_stats.sm(),
            total: epoch_stats.total(cfg.sm_weight),
            dev_auc,
        });
        if let (Some(target), Some(a)) = (cfg.target_dev_auc, dev_auc) {
            if a >= target {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    Ok(TrainReport { history, zero_hhat, stopped_early })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// Matching-head outputs, one per position.
    pub hhat: Vec<Vec<f64>>,
}

pub fn predict<T: Scalar>(model: &DetectorModel<T>, ex: &Example<T>, threshold: f64) -> Result<PredictionOutput> {
    let trace = model.forward(&ex.input, None, None)?;
    let out = model.heads(&trace, &ex.reps)?;
    let scores: Vec<f64> = out.probs().into_iter().map(Scalar::f64).collect();
    let labels = scores.iter().map(|&p| (p >= threshold) as u8).collect();
    let hhat = (0..ex.reps.len()).map(|r| out.hhat_row(r).iter().map(|x| x.f64()).collect()).collect();
    Ok(PredictionOutput { scores, labels, hhat })
}

/// One record per labeled position (1-based), for prediction files and AUC.
pub fn score_examples<T: Scalar>(model: &DetectorModel<T>, examples: &[Example<T>]) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for ex in examples {
        let p = predict(model, ex, 0.5)?;
        for (k, (&score, &gold)) in p.scores.iter().zip(&ex.labels).enumerate() {
            out.push(PredictionRecord { instance: ex.id.clone(), position: k + 1, score, gold });
        }
    }
    Ok(out)
}

pub fn pooled_auc<T: Scalar>(model: &DetectorModel<T>, examples: &[Example<T>]) -> Result<f64> {
    let preds: Vec<Prediction> = score_examples(model, examples)?
        .into_iter()
        .map(|r| Prediction { score: r.score, gold: r.gold })
        .collect();
    Ok(auc(&preds)?.auc)
}
