//! Row-wise building blocks shared by the batched and incremental paths,
//! each paired with its exact backward.

use rand::Rng;

use super::tensor::{matmul, Tensor};
use crate::scalar::Scalar;

pub(crate) const NORM_EPS: f64 = 1e-6;

/// Scale-only RMS normalization: `y = x / rms(x) * gain`. Returns `y` and `1/rms` per row.
pub(crate) fn rms_norm<T: Scalar>(x: &[T], gain: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    let eps = T::of(NORM_EPS);
    let dn = T::of(d as f64);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let ms = xr.iter().fold(T::zero(), |acc, &v| acc + v * v) / dn;
        let r = T::one() / (ms + eps).sqrt();
        for ((yv, &xv), &g) in yr.iter_mut().zip(xr).zip(gain) {
            *yv = xv * r * g;
        }
        inv.push(r);
    }
    (y, inv)
}

/// Accumulates into `dx` and `dgain`.
pub(crate) fn rms_norm_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    gain: &[T],
    inv: &[T],
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
) {
    let dn = T::of(d as f64);
    for (row, ((dyr, xr), dxr)) in dy
        .chunks_exact(d)
        .zip(x.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let r = inv[row];
        let mut dot = T::zero();
        for i in 0..d {
            let gdy = gain[i] * dyr[i];
            dot = dot + gdy * xr[i];
            dgain[i] = dgain[i] + dyr[i] * xr[i] * r;
        }
        let coef = r * r * r * dot / dn;
        for i in 0..d {
            dxr[i] = dxr[i] + r * gain[i] * dyr[i] - coef * xr[i];
        }
    }
}

/// `x * w` for `x: [rows x in]`, `w: [in x out]`.
pub(crate) fn linear<T: Scalar>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / din;
    let mut y = vec![T::zero(); rows * dout];
    matmul(&mut y, x, w.data(), rows, din, dout, false, false, false);
    y
}

/// Accumulates `dx += dy * w^T` (when given) and `dw += x^T * dy`.
pub(crate) fn linear_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    w: &Tensor<T>,
    dx: Option<&mut [T]>,
    dw: &mut Tensor<T>,
) {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / din;
    if let Some(dx) = dx {
        matmul(dx, dy, w.data(), rows, dout, din, false, true, true);
    }
    matmul(dw.data_mut(), x, dy, din, rows, dout, true, false, true);
}

/// Inverted dropout in place; returns the per-element multipliers when active.
pub(crate) fn dropout<T: Scalar, R: Rng>(x: &mut [T], p: f64, rng: Option<&mut R>) -> Option<Vec<T>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = T::of(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    for (v, &m) in x.iter_mut().zip(&mask) {
        *v = *v * m;
    }
    Some(mask)
}

pub(crate) fn apply_mask<T: Scalar>(dx: &mut [T], mask: Option<&Vec<T>>) {
    if let Some(mask) = mask {
        for (v, &m) in dx.iter_mut().zip(mask) {
            *v = *v * m;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnShape {
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub q_len: usize,
    pub k_len: usize,
}

impl AttnShape {
    fn d(&self) -> usize {
        self.heads * self.head_dim
    }

    fn prob_index(&self, b: usize, h: usize, i: usize) -> usize {
        ((b * self.heads + h) * self.q_len + i) * self.k_len
    }

    /// Keys visible to query `i` of an item with `key_len` valid keys.
    #[inline]
    pub fn visible(&self, i: usize, key_len: usize, causal: bool) -> usize {
        if causal {
            key_len.min(i + 1)
        } else {
            key_len
        }
    }
}

/// Relative-position bias: `[buckets x heads]` table plus the bucket of every `(i, j)` pair.
pub(crate) struct Bias<'a, T> {
    pub table: &'a [T],
    pub buckets: &'a [usize],
}

/// Multi-head scaled dot-product attention over `[batch * len x d]` row blocks.
/// Returns the context rows and the `[batch x heads x q_len x k_len]` weights
/// (zero where masked).
pub(crate) fn attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    shape: AttnShape,
    key_lens: &[usize],
    causal: bool,
    bias: Option<Bias<'_, T>>,
) -> (Vec<T>, Vec<T>) {
    let d = shape.d();
    let dh = shape.head_dim;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); shape.batch * shape.q_len * d];
    let mut probs = vec![T::zero(); shape.batch * shape.heads * shape.q_len * shape.k_len];
    let mut scores = vec![T::zero(); shape.k_len];
    for b in 0..shape.batch {
        for h in 0..shape.heads {
            let col = h * dh;
            for i in 0..shape.q_len {
                let nk = shape.visible(i, key_lens[b], causal);
                let qrow = &q[(b * shape.q_len + i) * d + col..][..dh];
                let mut max = T::neg_infinity();
                for (j, s) in scores[..nk].iter_mut().enumerate() {
                    let krow = &k[(b * shape.k_len + j) * d + col..][..dh];
                    let mut dot = T::zero();
                    for t in 0..dh {
                        dot = dot + qrow[t] * krow[t];
                    }
                    let mut val = dot * scale;
                    if let Some(bias) = &bias {
                        val = val + bias.table[bias.buckets[i * shape.k_len + j] * shape.heads + h];
                    }
                    *s = val;
                    if val > max {
                        max = val;
                    }
                }
                let mut sum = T::zero();
                for s in scores[..nk].iter_mut() {
                    *s = (*s - max).exp();
                    sum = sum + *s;
                }
                let p_off = shape.prob_index(b, h, i);
                let orow = &mut out[(b * shape.q_len + i) * d + col..][..dh];
                for (j, &s) in scores[..nk].iter().enumerate() {
                    let p = s / sum;
                    probs[p_off + j] = p;
                    let vrow = &v[(b * shape.k_len + j) * d + col..][..dh];
                    for t in 0..dh {
                        orow[t] = orow[t] + p * vrow[t];
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention`]. Writes (accumulates) `dq`, `dk`, `dv` and the bias table.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    shape: AttnShape,
    key_lens: &[usize],
    causal: bool,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
    mut dbias: Option<(&mut [T], &[usize])>,
) {
    let d = shape.d();
    let dh = shape.head_dim;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dp = vec![T::zero(); shape.k_len];
    for b in 0..shape.batch {
        for h in 0..shape.heads {
            let col = h * dh;
            for i in 0..shape.q_len {
                let nk = shape.visible(i, key_lens[b], causal);
                let qi = (b * shape.q_len + i) * d + col;
                let p_off = shape.prob_index(b, h, i);
                let do_row = &dout[qi..qi + dh];
                let mut weighted = T::zero();
                for j in 0..nk {
                    let vj = (b * shape.k_len + j) * d + col;
                    let p = probs[p_off + j];
                    let mut dot = T::zero();
                    for t in 0..dh {
                        dot = dot + do_row[t] * v[vj + t];
                        dv[vj + t] = dv[vj + t] + p * do_row[t];
                    }
                    dp[j] = dot;
                    weighted = weighted + p * dot;
                }
                for j in 0..nk {
                    let ds = probs[p_off + j] * (dp[j] - weighted);
                    if let Some((table, buckets)) = dbias.as_mut() {
                        let idx = buckets[i * shape.k_len + j] * shape.heads + h;
                        table[idx] = table[idx] + ds;
                    }
                    let g = ds * scale;
                    let kj = (b * shape.k_len + j) * d + col;
                    for t in 0..dh {
                        dq[qi + t] = dq[qi + t] + g * k[kj + t];
                        dk[kj + t] = dk[kj + t] + g * q[qi + t];
                    }
                }
            }
        }
    }
}
