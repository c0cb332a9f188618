//! Dense row-major kernels and their backward passes. Sums accumulate in
//! f64 whatever the storage type.

use crate::scalar::Scalar;

/// `out = a · b (+ bias)`, with `a: n×k`, `b: k×m`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], bias: Option<&[T]>, n: usize, k: usize, m: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut out = match bias {
        Some(bias) => {
            let mut o = Vec::with_capacity(n * m);
            for _ in 0..n {
                o.extend_from_slice(bias);
            }
            o
        }
        None => vec![T::zero(); n * m],
    };
    let mut acc = vec![0f64; m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        acc.iter_mut().zip(row.iter()).for_each(|(a, r)| *a = r.f64());
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let av = av.f64();
            for (o, &bv) in acc.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv.f64();
            }
        }
        row.iter_mut().zip(&acc).for_each(|(r, &a)| *r = T::of(a));
    }
    out
}

/// Backward of `c = a · b + bias`: accumulates `db += aᵀ·dc`, `dbias += Σ dc`
/// and returns `da = dc · bᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    dc: &[T],
    n: usize,
    k: usize,
    m: usize,
    db: &mut [T],
    dbias: Option<&mut [T]>,
) -> Vec<T> {
    let mut da = vec![T::zero(); n * k];
    let mut dbw = vec![0f64; k * m];
    for i in 0..n {
        let dci = &dc[i * m..(i + 1) * m];
        let ai = &a[i * k..(i + 1) * k];
        let dai = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let mut s = 0f64;
            for (&g, &bv) in dci.iter().zip(brow) {
                s += g.f64() * bv.f64();
            }
            dai[p] = T::of(s);
            let av = ai[p].f64();
            if av != 0.0 {
                for (d, &g) in dbw[p * m..(p + 1) * m].iter_mut().zip(dci) {
                    *d += av * g.f64();
                }
            }
        }
    }
    for (d, &w) in db.iter_mut().zip(&dbw) {
        *d += T::of(w);
    }
    if let Some(dbias) = dbias {
        let mut s = vec![0f64; m];
        for i in 0..n {
            for (d, &g) in s.iter_mut().zip(&dc[i * m..(i + 1) * m]) {
                *d += g.f64();
            }
        }
        dbias.iter_mut().zip(&s).for_each(|(d, &v)| *d += T::of(v));
    }
    da
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(u: T) -> T {
    let half = T::of(0.5);
    let t = (T::of(GELU_C) * (u + T::of(GELU_A) * u * u * u)).tanh();
    half * u * (T::one() + t)
}

#[inline]
pub fn gelu_grad<T: Scalar>(u: T) -> T {
    let half = T::of(0.5);
    let t = (T::of(GELU_C) * (u + T::of(GELU_A) * u * u * u)).tanh();
    half * (T::one() + t)
        + half * u * (T::one() - t * t) * T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * u * u)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Per-row layer norm. Returns `(y, xhat, rstd)`.
pub fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], d: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n];
    let inv_d = 1.0 / d as f64;
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() * inv_d;
        let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() * inv_d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = T::of(r);
        for j in 0..d {
            let xh = (row[j].f64() - mean) * r;
            xhat[i * d + j] = T::of(xh);
            y[i * d + j] = T::of(xh * gamma[j].f64() + beta[j].f64());
        }
    }
    (y, xhat, rstd)
}

/// Backward of [`layer_norm`]; accumulates into `dgamma`/`dbeta`, returns `dx`.
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    d: usize,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let n = dy.len() / d;
    let inv_d = 1.0 / d as f64;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxh = vec![0f64; d];
    let (mut dg, mut db) = (vec![0f64; d], vec![0f64; d]);
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xr = &xhat[i * d..(i + 1) * d];
        let (mut m1, mut m2) = (0f64, 0f64);
        for j in 0..d {
            let (g, xh) = (dyr[j].f64(), xr[j].f64());
            dg[j] += g * xh;
            db[j] += g;
            dxh[j] = g * gamma[j].f64();
            m1 += dxh[j];
            m2 += dxh[j] * xh;
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let r = rstd[i].f64();
        for j in 0..d {
            dx[i * d + j] = T::of(r * (dxh[j] - m1 - xr[j].f64() * m2));
        }
    }
    for j in 0..d {
        dgamma[j] += T::of(dg[j]);
        dbeta[j] += T::of(db[j]);
    }
    dx
}

/// In-place softmax over each row of length `m`, ignoring masked columns.
pub fn softmax_rows<T: Scalar>(x: &mut [T], m: usize, key_mask: Option<&[bool]>) {
    let mut e = vec![0f64; m];
    for row in x.chunks_mut(m) {
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if key_mask.is_none_or(|mk| mk[j]) && v.f64() > max {
                max = v.f64();
            }
        }
        let mut sum = 0f64;
        for (j, v) in row.iter().enumerate() {
            e[j] = if key_mask.is_none_or(|mk| mk[j]) { (v.f64() - max).exp() } else { 0.0 };
            sum += e[j];
        }
        row.iter_mut().zip(&e).for_each(|(v, &x)| *v = T::of(x / sum));
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = 0f64;
    for (&x, &y) in a.iter().zip(b) {
        s += x.f64() * y.f64();
    }
    T::of(s)
}
