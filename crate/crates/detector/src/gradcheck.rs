//! Finite-difference verification of the analytic gradient.

use rand::seq::index;

use incoforge_core::seed::rng_for;

use crate::data::Example;
use crate::error::Result;
use crate::loss::{batch_grad, dataset_loss};
use crate::model::DetectorModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub checked: usize,
    /// Parameter index and name with the largest error.
    pub worst: Option<(usize, String)>,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub samples: usize,
    pub epsilon: f64,
    pub sm_weight: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { samples: 200, epsilon: 3e-2, sm_weight: 1.0, seed: 0 }
    }
}

/// Central difference refined by Ridders' polynomial extrapolation, starting
/// from step `h0` and shrinking by 1.4 per level. Returns the estimate and
/// its error bound.
pub fn ridders_derivative(mut central: impl FnMut(f64) -> f64, h0: f64) -> (f64, f64) {
    const CON: f64 = 1.4;
    const CON2: f64 = CON * CON;
    const NTAB: usize = 10;
    let mut a = [[0.0f64; NTAB]; NTAB];
    let mut h = h0;
    a[0][0] = central(h);
    let (mut err, mut ans) = (f64::MAX, a[0][0]);
    for i in 1..NTAB {
        h /= CON;
        a[0][i] = central(h);
        let mut fac = CON2;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON2;
            let e = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                ans = a[j][i];
            }
        }
        // higher orders started to lose precision
        if (a[i][i] - a[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    (ans, err)
}

/// Compares the analytic gradient (computed in `T`, dropout off) against
/// extrapolated central differences of the loss evaluated in 64-bit on the
/// same parameter values. `perturb` lets a caller tamper with the analytic
/// gradient before comparison.
pub fn grad_check<T: Scalar>(
    model: &DetectorModel<T>,
    examples: &[Example<T>],
    opts: GradCheckOptions,
    perturb: Option<&dyn Fn(&mut [T])>,
) -> Result<GradCheckReport> {
    let batch: Vec<&Example<T>> = examples.iter().collect();
    let (_, mut analytic) = batch_grad(model, &batch, opts.sm_weight, None, false)?;
    if let Some(f) = perturb {
        f(&mut analytic);
    }
    let mut wide = model.cast::<f64>();
    let ex64: Vec<Example<f64>> = examples.iter().map(|e| e.cast()).collect();
    let np = wide.num_params();
    let mut rng = rng_for(opts.seed, "gradcheck");
    let picks = index::sample(&mut rng, np, opts.samples.min(np)).into_vec();
    let h = opts.epsilon;
    let mut errs = Vec::with_capacity(picks.len());
    let mut worst = (0.0, None);
    for &i in &picks {
        let orig = wide.params()[i];
        let mut failure = None;
        let mut central = |step: f64| {
            let mut at = |x: f64| {
                wide.params_mut()[i] = x;
                dataset_loss(&wide, &ex64).map(|s| s.total(opts.sm_weight)).unwrap_or_else(|e| {
                    failure = Some(e);
                    f64::NAN
                })
            };
            let d = (at(orig + step) - at(orig - step)) / (2.0 * step);
            wide.params_mut()[i] = orig;
            d
        };
        // several starting steps; keep the estimate with the tightest bound
        let mut numeric = (f64::NAN, f64::INFINITY);
        for h0 in [h, h / 3.0, h / 10.0] {
            let est = ridders_derivative(&mut central, h0);
            if est.1 < numeric.1 {
                numeric = est;
            }
        }
        let numeric = numeric.0;
        if let Some(e) = failure {
            return Err(e);
        }
        let e = relative_error(analytic[i].f64(), numeric);
        if e > worst.0 || worst.1.is_none() {
            worst = (e, Some(i));
        }
        errs.push(e);
    }
    let name_of = |i: usize| {
        model
            .manifest()
            .iter()
            .find(|s| i >= s.offset && i < s.offset + s.len())
            .map(|s| s.name.clone())
            .unwrap_or_default()
    };
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        mean_rel_error: errs.iter().sum::<f64>() / errs.len().max(1) as f64,
        checked: errs.len(),
        worst: worst.1.map(|i| (i, name_of(i))),
    })
}
