//! Row-major slice kernels with hand-written backward passes.

use crate::scalar::Scalar;
use crate::tensor::{dot, softmax_in_place};

/// `y[r, o] = Σ_i x[r, i] · w[o, i] + b[o]`, with `w` stored `[out, in]`.
pub(crate) fn linear<T: Scalar>(
    x: &[T],
    rows: usize,
    w: &[T],
    out_f: usize,
    in_f: usize,
    b: Option<&[T]>,
) -> Vec<T> {
    let mut y = vec![T::zero(); rows * out_f];
    for r in 0..rows {
        let xr = &x[r * in_f..(r + 1) * in_f];
        for o in 0..out_f {
            let bias = b.map_or(T::zero(), |b| b[o]);
            y[r * out_f + o] = dot(xr, &w[o * in_f..(o + 1) * in_f]) + bias;
        }
    }
    y
}

/// Accumulates `dw += dyᵀ x` and `db += Σ_r dy`; returns `dx = dy · w`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    rows: usize,
    w: &[T],
    out_f: usize,
    in_f: usize,
    dw: &mut [T],
    mut db: Option<&mut [T]>,
) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * in_f];
    for r in 0..rows {
        let xr = &x[r * in_f..(r + 1) * in_f];
        let dxr = &mut dx[r * in_f..(r + 1) * in_f];
        for o in 0..out_f {
            let g = dy[r * out_f + o];
            if let Some(db) = db.as_deref_mut() {
                db[o] = db[o] + g;
            }
            let wrow = &w[o * in_f..(o + 1) * in_f];
            let dwrow = &mut dw[o * in_f..(o + 1) * in_f];
            for i in 0..in_f {
                dwrow[i] = dwrow[i] + g * xr[i];
                dxr[i] = dxr[i] + g * wrow[i];
            }
        }
    }
    dx
}

pub(crate) struct LayerNormOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &[T],
    rows: usize,
    width: usize,
    g: &[T],
    b: &[T],
    eps: T,
) -> LayerNormOut<T> {
    let mut y = vec![T::zero(); rows * width];
    let mut xhat = vec![T::zero(); rows * width];
    let mut rstd = vec![T::zero(); rows];
    let n = T::of_usize(width);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..width {
            let h = (row[j] - mean) * rs;
            xhat[r * width + j] = h;
            y[r * width + j] = h * g[j] + b[j];
        }
    }
    LayerNormOut { y, xhat, rstd }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    out: &LayerNormOut<T>,
    rows: usize,
    width: usize,
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let n = T::of_usize(width);
    let mut dx = vec![T::zero(); rows * width];
    let mut dxhat = vec![T::zero(); width];
    for r in 0..rows {
        let off = r * width;
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for j in 0..width {
            let d = dy[off + j];
            dg[j] = dg[j] + d * out.xhat[off + j];
            db[j] = db[j] + d;
            dxhat[j] = d * g[j];
            mean_d = mean_d + dxhat[j];
            mean_dx = mean_dx + dxhat[j] * out.xhat[off + j];
        }
        mean_d = mean_d / n;
        mean_dx = mean_dx / n;
        for j in 0..width {
            dx[off + j] = out.rstd[r] * (dxhat[j] - mean_d - out.xhat[off + j] * mean_dx);
        }
    }
    dx
}

const GELU_CUBIC: f64 = 0.044_715;

fn gelu_inner<T: Scalar>(z: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    c * (z + T::lit(GELU_CUBIC) * z * z * z)
}

/// Tanh-approximated GELU.
pub(crate) fn gelu<T: Scalar>(z: T) -> T {
    T::lit(0.5) * z * (T::one() + gelu_inner(z).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(z: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let t = gelu_inner(z).tanh();
    let du = c * (T::one() + T::lit(3.0 * GELU_CUBIC) * z * z);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * z * (T::one() - t * t) * du
}

/// Multi-head self-attention core. `q`, `k`, `v` are `[seq, heads·d_k]`;
/// returns the concatenated head outputs and the per-head probabilities
/// `[heads][seq][seq]`.
pub(crate) fn attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    seq: usize,
    heads: usize,
    d_k: usize,
) -> (Vec<T>, Vec<T>) {
    let d = heads * d_k;
    let inv_sqrt = T::one() / T::of_usize(d_k).sqrt();
    let mut out = vec![T::zero(); seq * d];
    let mut probs = vec![T::zero(); heads * seq * seq];
    for h in 0..heads {
        let c0 = h * d_k;
        for s in 0..seq {
            let p = &mut probs[(h * seq + s) * seq..(h * seq + s + 1) * seq];
            let qs = &q[s * d + c0..s * d + c0 + d_k];
            for (t, pt) in p.iter_mut().enumerate() {
                *pt = dot(qs, &k[t * d + c0..t * d + c0 + d_k]) * inv_sqrt;
            }
            softmax_in_place(p);
            let os = &mut out[s * d + c0..s * d + c0 + d_k];
            for (t, &pt) in p.iter().enumerate() {
                let vt = &v[t * d + c0..t * d + c0 + d_k];
                for c in 0..d_k {
                    os[c] = os[c] + pt * vt[c];
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    seq: usize,
    heads: usize,
    d_k: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = heads * d_k;
    let inv_sqrt = T::one() / T::of_usize(d_k).sqrt();
    let mut dq = vec![T::zero(); seq * d];
    let mut dk = vec![T::zero(); seq * d];
    let mut dv = vec![T::zero(); seq * d];
    let mut dp = vec![T::zero(); seq];
    for h in 0..heads {
        let c0 = h * d_k;
        for s in 0..seq {
            let p = &probs[(h * seq + s) * seq..(h * seq + s + 1) * seq];
            let dos = &dout[s * d + c0..s * d + c0 + d_k];
            let mut weighted = T::zero();
            for t in 0..seq {
                let vt = &v[t * d + c0..t * d + c0 + d_k];
                dp[t] = dot(dos, vt);
                weighted = weighted + p[t] * dp[t];
                let dvt = &mut dv[t * d + c0..t * d + c0 + d_k];
                for c in 0..d_k {
                    dvt[c] = dvt[c] + p[t] * dos[c];
                }
            }
            for t in 0..seq {
                let ds = p[t] * (dp[t] - weighted) * inv_sqrt;
                for c in 0..d_k {
                    dq[s * d + c0 + c] = dq[s * d + c0 + c] + ds * k[t * d + c0 + c];
                    dk[t * d + c0 + c] = dk[t * d + c0 + c] + ds * q[s * d + c0 + c];
                }
            }
        }
    }
    (dq, dk, dv)
}
