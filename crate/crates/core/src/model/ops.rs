//! Dense building blocks with hand-written backward passes. Activations are
//! row-major `rows x cols` buffers.

use super::scalar::{gemm, Scalar, View, ViewMut};
use super::ModelError;
use crate::maskgen::MASKED;

/// `y = x w`, `x: rows x din`, `w: din x dout`.
pub(crate) fn matmul<T: Scalar>(x: &[T], rows: usize, din: usize, w: &[T], dout: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * dout];
    gemm(
        T::one(),
        View::new(x, rows, din),
        View::new(w, din, dout),
        T::zero(),
        ViewMut::new(&mut y, rows, dout),
    );
    y
}

/// Backward of `y = x w`: `dw += x^T dy`, `dx += dy w^T`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_bwd<T: Scalar>(
    x: &[T],
    dy: &[T],
    rows: usize,
    din: usize,
    dout: usize,
    w: &[T],
    dw: &mut [T],
    dx: &mut [T],
) {
    gemm(
        T::one(),
        View::new(x, rows, din).t(),
        View::new(dy, rows, dout),
        T::one(),
        ViewMut::new(dw, din, dout),
    );
    gemm(
        T::one(),
        View::new(dy, rows, dout),
        View::new(w, din, dout).t(),
        T::one(),
        ViewMut::new(dx, rows, din),
    );
}

pub(crate) fn add_row_bias<T: Scalar>(y: &mut [T], b: &[T]) {
    for row in y.chunks_mut(b.len()) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

pub(crate) fn bias_bwd<T: Scalar>(dy: &[T], db: &mut [T]) {
    for row in dy.chunks(db.len()) {
        for (g, &d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
}

pub(crate) struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &[T],
    d: usize,
    g: &[T],
    b: &[T],
    eps: f64,
) -> (Vec<T>, LnCache<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = T::one() / T::of(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::of(eps)).sqrt();
        rstd.push(rs);
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * g[c] + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates into `dg`, `db` and `dx`.
pub(crate) fn layer_norm_bwd<T: Scalar>(
    dy: &[T],
    cache: &LnCache<T>,
    d: usize,
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
    dx: &mut [T],
) {
    let inv_d = T::one() / T::of(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..d {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for c in 0..d {
            dx[r * d + c] += rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Where a head's keys come from and how they are masked.
#[derive(Clone, Copy)]
pub(crate) enum KeyMask<'a, T> {
    None,
    /// Query `i` may only see keys `0..=i`.
    Causal,
    /// Additive `lq x lk` matrix.
    Additive(&'a [T]),
    /// One additive row shared by every query.
    Row(&'a [T]),
}

impl<T: Scalar> KeyMask<'_, T> {
    fn value(&self, i: usize, j: usize, lk: usize) -> T {
        match self {
            KeyMask::None => T::zero(),
            KeyMask::Causal => {
                if j > i {
                    T::of(MASKED)
                } else {
                    T::zero()
                }
            }
            KeyMask::Additive(m) => m[i * lk + j],
            KeyMask::Row(r) => r[j],
        }
    }
}

/// Single-head masked attention kernel.
///
/// `probs` (lq x lk) receives `softmax(q k^T * scale + M)`, `out` receives
/// `probs v`. The mask is added after scaling; with a 0 / [`MASKED`] mask
/// this equals adding it before scaling.
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_forward<T: Scalar>(
    q: View<'_, T>,
    k: View<'_, T>,
    v: View<'_, T>,
    mask: KeyMask<'_, T>,
    scale: T,
    lq: usize,
    lk: usize,
    probs: &mut [T],
    out: ViewMut<'_, T>,
) {
    gemm(scale, q, k.t(), T::zero(), ViewMut::new(probs, lq, lk));
    for i in 0..lq {
        let row = &mut probs[i * lk..(i + 1) * lk];
        if !matches!(mask, KeyMask::None) {
            for (j, s) in row.iter_mut().enumerate() {
                *s += mask.value(i, j, lk);
            }
        }
        softmax_in_place(row);
    }
    gemm(T::one(), View::new(probs, lq, lk), v, T::zero(), out);
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for s in row.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    let inv = T::one() / sum;
    for s in row.iter_mut() {
        *s *= inv;
    }
}

pub(crate) fn log_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&s| (s - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&s| s - lse).collect()
}

/// Backward of [`head_forward`]. Writes (not accumulates) `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_backward<T: Scalar>(
    q: View<'_, T>,
    k: View<'_, T>,
    v: View<'_, T>,
    probs: &[T],
    dout: View<'_, T>,
    scale: T,
    lq: usize,
    lk: usize,
    dq: ViewMut<'_, T>,
    dk: ViewMut<'_, T>,
    dv: ViewMut<'_, T>,
) {
    let mut ds = vec![T::zero(); lq * lk];
    gemm(
        T::one(),
        dout,
        v.t(),
        T::zero(),
        ViewMut::new(&mut ds, lq, lk),
    );
    for i in 0..lq {
        let p = &probs[i * lk..(i + 1) * lk];
        let row = &mut ds[i * lk..(i + 1) * lk];
        let dot: T = p.iter().zip(row.iter()).map(|(&a, &b)| a * b).sum();
        for (s, &pp) in row.iter_mut().zip(p) {
            *s = pp * (*s - dot);
        }
    }
    gemm(scale, View::new(&ds, lq, lk), k, T::zero(), dq);
    gemm(scale, View::new(&ds, lq, lk).t(), q, T::zero(), dk);
    gemm(T::one(), View::new(probs, lq, lk).t(), dout, T::zero(), dv);
}

/// Output of the standalone single-head [`attention`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<T> {
    /// `lq x dv`
    pub out: Vec<T>,
    /// `lq x lk`, rows sum to one.
    pub weights: Vec<T>,
}

/// `softmax(q k^T / sqrt(dk) + M) v` for one head.
///
/// `q: lq x dk`, `k: lk x dk`, `v: lk x dv`, `mask: lq x lk` additive
/// (0 or [`MASKED`]); `None` means no mask.
pub fn attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    mask: Option<&[T]>,
    lq: usize,
    lk: usize,
    dk: usize,
) -> Result<AttentionOutput<T>, ModelError> {
    if dk == 0 || q.len() != lq * dk || k.len() != lk * dk || lk == 0 || !v.len().is_multiple_of(lk)
    {
        return Err(ModelError::Shape(format!(
            "attention: q {} / k {} / v {} do not fit lq={lq}, lk={lk}, dk={dk}",
            q.len(),
            k.len(),
            v.len()
        )));
    }
    if let Some(m) = mask {
        if m.len() != lq * lk {
            return Err(ModelError::Shape(format!(
                "attention: mask has {} entries, expected {lq}x{lk}",
                m.len()
            )));
        }
    }
    let dv = v.len() / lk;
    let mut weights = vec![T::zero(); lq * lk];
    let mut out = vec![T::zero(); lq * dv];
    let scale = T::one() / T::of(dk as f64).sqrt();
    head_forward(
        View::new(q, lq, dk),
        View::new(k, lk, dk),
        View::new(v, lk, dv),
        mask.map_or(KeyMask::None, KeyMask::Additive),
        scale,
        lq,
        lk,
        &mut weights,
        ViewMut::new(&mut out, lq, dv),
    );
    Ok(AttentionOutput { out, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_visible_key_takes_all_weight() {
        let q = [1.0f64, 0.0];
        let k = [0.5, 0.5, 0.5, 0.5];
        let v = [1.0, 2.0, 3.0, 4.0];
        let a = attention(&q, &k, &v, Some(&[0.0, MASKED]), 1, 2, 2).unwrap();
        assert_eq!(a.weights, vec![1.0, 0.0]);
        assert_eq!(a.out, vec![1.0, 2.0]);
    }

    #[test]
    fn equal_scores_split_evenly() {
        let q = [0.0f32, 0.0];
        let k = [1.0, 2.0, 3.0, 4.0];
        let v = [2.0, 4.0];
        let a = attention(&q, &k, &v, Some(&[0.0, 0.0]), 1, 2, 2).unwrap();
        assert_eq!(a.weights, vec![0.5, 0.5]);
        assert_eq!(a.out, vec![3.0]);
    }

    #[test]
    fn shape_errors() {
        assert!(attention::<f32>(&[1.0], &[1.0, 2.0], &[1.0], None, 1, 1, 2).is_err());
        assert!(attention::<f32>(&[1.0], &[1.0], &[1.0], Some(&[0.0, 0.0]), 1, 1, 1).is_err());
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let d = 4;
        let x = [0.3f64, -1.2, 2.0, 0.1, 1.0, 1.5, -0.5, 0.25];
        let g = [1.0, 0.5, -0.3, 2.0];
        let b = [0.1, 0.0, 0.2, -0.1];
        let w = [0.7, -0.2, 0.4, 1.1, -0.6, 0.3, 0.9, -1.3];
        let loss = |x: &[f64]| -> f64 {
            let (y, _) = layer_norm(x, d, &g, &b, 1e-5);
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = layer_norm(&x, d, &g, &b, 1e-5);
        let (mut dg, mut db, mut dx) = (vec![0.0; d], vec![0.0; d], vec![0.0; x.len()]);
        layer_norm_bwd(&w, &cache, d, &g, &mut dg, &mut db, &mut dx);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x;
            xp[i] += eps;
            let mut xm = x;
            xm[i] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() < 1e-7, "{i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn masked_keys_get_zero_gradient() {
        let (lq, lk, dk) = (2, 3, 2);
        let q = [0.3f64, -0.1, 0.8, 0.5];
        let k = [1.0, 0.2, -0.4, 0.6, 0.9, -1.0];
        let v = [0.5, 1.5, -0.5, 2.0, 1.0, 0.0];
        // Key 2 is invisible to both queries.
        let mask = [0.0, 0.0, MASKED, 0.0, 0.0, MASKED];
        let mut probs = vec![0.0; lq * lk];
        let mut out = vec![0.0; lq * dk];
        head_forward(
            View::new(&q, lq, dk),
            View::new(&k, lk, dk),
            View::new(&v, lk, dk),
            KeyMask::Additive(&mask),
            0.5,
            lq,
            lk,
            &mut probs,
            ViewMut::new(&mut out, lq, dk),
        );
        assert_eq!(probs[2], 0.0);
        assert_eq!(probs[5], 0.0);
        let dout = [1.0, -2.0, 0.5, 0.25];
        let (mut dq, mut dkk, mut dv) = (vec![0.0; 4], vec![0.0; 6], vec![0.0; 6]);
        head_backward(
            View::new(&q, lq, dk),
            View::new(&k, lk, dk),
            View::new(&v, lk, dk),
            &probs,
            View::new(&dout, lq, dk),
            0.5,
            lq,
            lk,
            ViewMut::new(&mut dq, lq, dk),
            ViewMut::new(&mut dkk, lk, dk),
            ViewMut::new(&mut dv, lk, dk),
        );
        assert_eq!(&dkk[4..], &[0.0, 0.0]);
        assert_eq!(&dv[4..], &[0.0, 0.0]);
        assert!(dkk[..4].iter().any(|&g| g != 0.0));
    }
}
