//! A pre-LN residual transformer classifier.
//!
//! Per sample `x ∈ R^{seq × d_model}`:
//!
//! ```text
//! x ← x · embedᵀ
//! for each block:
//!     x ← x + Attn(LN(x))        Attn = concat_h softmax(Q_h K_hᵀ / √d_k) V_h · W_Oᵀ
//!     x ← x + W2 · gelu(W1 · LN(x) + b1) + b2
//! logits = head.w · mean_seq(LN(x)) + head.b
//! ```
//!
//! No masking, no positional encoding. GELU is the tanh approximation.

mod data;
mod kernels;
pub(crate) mod params;
mod train;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

pub use data::{generate_task, Batch, TaskSpec};
pub use train::{train, train_on, TrainConfig};

use crate::arch::ToyArchSpec;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use kernels::LayerNormOut;
use params::Params;

pub const LN_EPS: f64 = 1e-5;

/// Samples per parallel work unit. Fixed so reductions happen in the same
/// order regardless of thread count.
const CHUNK: usize = 8;

/// Block outputs (post-residual), one `[batch, seq, d_model]` tensor per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T> {
    pub per_layer: Vec<Tensor<T>>,
}

/// Random initialization: weights ~ N(0, 1/fan_in), biases zero, layer-norm
/// gains one.
pub fn init_checkpoint<T: Scalar>(arch: &ToyArchSpec, seed: u64) -> Result<Checkpoint<T>> {
    arch.validate()?;
    let tensors = arch
        .tensor_shapes()
        .into_iter()
        .enumerate()
        .map(|(idx, (name, shape))| {
            let t = if shape.len() == 2 {
                let std = 1.0 / (shape[1] as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut r = rng::stream(seed, &[rng::TAG_INIT, idx as u64]);
                Tensor::from_fn(&shape, |_| T::lit(normal.sample(&mut r)))
            } else if name.ends_with(".g") {
                Tensor::from_fn(&shape, |_| T::one())
            } else {
                Tensor::zeros(&shape)
            };
            (name, t)
        })
        .collect();
    Checkpoint::new(*arch, tensors, format!("init seed={seed}"))
}

struct BlockCache<T> {
    x_in: Vec<T>,
    ln1: LayerNormOut<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    ln2: LayerNormOut<T>,
    z: Vec<T>,
    act: Vec<T>,
}

struct SampleCache<T> {
    blocks: Vec<BlockCache<T>>,
    x_out: Vec<T>,
    lnf: LayerNormOut<T>,
    pooled: Vec<T>,
    logits: Vec<T>,
}

fn sample_forward<T: Scalar>(p: &Params<&[T]>, a: &ToyArchSpec, input: &[T]) -> SampleCache<T> {
    use kernels::*;
    let (s, d, hd) = (a.seq_len, a.d_model, a.d_hidden);
    let eps = T::lit(LN_EPS);
    let mut x = linear(input, s, p.embed, d, d, None);
    let mut blocks = Vec::with_capacity(a.n_layers);
    for bp in &p.blocks {
        let ln1 = layer_norm(&x, s, d, bp.ln1_g, bp.ln1_b, eps);
        let q = linear(&ln1.y, s, bp.wq, d, d, None);
        let k = linear(&ln1.y, s, bp.wk, d, d, None);
        let v = linear(&ln1.y, s, bp.wv, d, d, None);
        let (att, probs) = attention(&q, &k, &v, s, a.n_heads, a.d_k);
        let proj = linear(&att, s, bp.wo, d, d, None);
        let x_mid: Vec<T> = x.iter().zip(&proj).map(|(&a, &b)| a + b).collect();
        let ln2 = layer_norm(&x_mid, s, d, bp.ln2_g, bp.ln2_b, eps);
        let z = linear(&ln2.y, s, bp.w1, hd, d, Some(bp.b1));
        let act: Vec<T> = z.iter().map(|&v| gelu(v)).collect();
        let m = linear(&act, s, bp.w2, d, hd, Some(bp.b2));
        let x_out: Vec<T> = x_mid.iter().zip(&m).map(|(&a, &b)| a + b).collect();
        let x_in = std::mem::replace(&mut x, x_out);
        blocks.push(BlockCache {
            x_in,
            ln1,
            q,
            k,
            v,
            probs,
            att,
            ln2,
            z,
            act,
        });
    }
    let lnf = layer_norm(&x, s, d, p.lnf_g, p.lnf_b, eps);
    let inv_s = T::one() / T::of_usize(s);
    let pooled: Vec<T> = (0..d)
        .map(|j| (0..s).map(|t| lnf.y[t * d + j]).sum::<T>() * inv_s)
        .collect();
    let logits = linear(&pooled, 1, p.head_w, a.n_classes, d, Some(p.head_b));
    SampleCache {
        blocks,
        x_out: x,
        lnf,
        pooled,
        logits,
    }
}

/// Accumulates parameter gradients of `dlogits · logits` into `g`.
fn sample_backward<T: Scalar>(
    p: &Params<&[T]>,
    a: &ToyArchSpec,
    input: &[T],
    cache: &SampleCache<T>,
    dlogits: &[T],
    g: &mut Params<Vec<T>>,
) {
    use kernels::*;
    let (s, d, hd) = (a.seq_len, a.d_model, a.d_hidden);
    let dpooled = linear_backward(
        dlogits,
        &cache.pooled,
        1,
        p.head_w,
        a.n_classes,
        d,
        &mut g.head_w,
        Some(&mut g.head_b),
    );
    let inv_s = T::one() / T::of_usize(s);
    let dlnf: Vec<T> = (0..s * d).map(|i| dpooled[i % d] * inv_s).collect();
    let mut dx = layer_norm_backward(&dlnf, &cache.lnf, s, d, p.lnf_g, &mut g.lnf_g, &mut g.lnf_b);

    for (li, bc) in cache.blocks.iter().enumerate().rev() {
        let bp = &p.blocks[li];
        let gb = &mut g.blocks[li];
        // MLP branch: x_out = x_mid + W2 gelu(W1 LN(x_mid) + b1) + b2
        let dact = linear_backward(&dx, &bc.act, s, bp.w2, d, hd, &mut gb.w2, Some(&mut gb.b2));
        let dz: Vec<T> = dact.iter().zip(&bc.z).map(|(&da, &z)| da * gelu_grad(z)).collect();
        let dln2 = linear_backward(&dz, &bc.ln2.y, s, bp.w1, hd, d, &mut gb.w1, Some(&mut gb.b1));
        let dmid_ln = layer_norm_backward(&dln2, &bc.ln2, s, d, bp.ln2_g, &mut gb.ln2_g, &mut gb.ln2_b);
        let dmid: Vec<T> = dx.iter().zip(&dmid_ln).map(|(&a, &b)| a + b).collect();
        // Attention branch: x_mid = x_in + W_O · attn(...)
        let datt = linear_backward(&dmid, &bc.att, s, bp.wo, d, d, &mut gb.wo, None);
        let (dq, dk, dv) =
            attention_backward(&datt, &bc.q, &bc.k, &bc.v, &bc.probs, s, a.n_heads, a.d_k);
        let mut dln1 = linear_backward(&dq, &bc.ln1.y, s, bp.wq, d, d, &mut gb.wq, None);
        let dk_in = linear_backward(&dk, &bc.ln1.y, s, bp.wk, d, d, &mut gb.wk, None);
        let dv_in = linear_backward(&dv, &bc.ln1.y, s, bp.wv, d, d, &mut gb.wv, None);
        for i in 0..dln1.len() {
            dln1[i] = dln1[i] + dk_in[i] + dv_in[i];
        }
        let din_ln = layer_norm_backward(&dln1, &bc.ln1, s, d, bp.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b);
        dx = dmid.iter().zip(&din_ln).map(|(&a, &b)| a + b).collect();
    }
    linear_backward(&dx, input, s, p.embed, d, d, &mut g.embed, None);
}

fn check_batch<T: Scalar>(ckpt: &Checkpoint<T>, batch: &Batch<T>) -> Result<()> {
    let a = ckpt.arch();
    let shape = batch.inputs.shape();
    if shape.len() != 3 || shape[1] != a.seq_len || shape[2] != a.d_model {
        return Err(Error::Shape(format!(
            "batch inputs {:?} do not fit seq_len={} d_model={}",
            shape, a.seq_len, a.d_model
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= a.n_classes) {
        return Err(Error::Shape(format!(
            "label {bad} out of range for {} classes",
            a.n_classes
        )));
    }
    Ok(())
}

/// Logits `[batch, n_classes]` and, when `capture` is set, every block output.
pub fn forward<T: Scalar>(
    ckpt: &Checkpoint<T>,
    batch: &Batch<T>,
    capture: bool,
) -> Result<(Tensor<T>, Option<ActivationTrace<T>>)> {
    check_batch(ckpt, batch)?;
    let a = *ckpt.arch();
    let p = Params::view(ckpt);
    let per = a.seq_len * a.d_model;
    let caches: Vec<SampleCache<T>> = batch
        .inputs
        .data()
        .par_chunks(per)
        .map(|x| sample_forward(&p, &a, x))
        .collect();
    let n = caches.len();
    let logits = Tensor::new(
        vec![n, a.n_classes],
        caches.iter().flat_map(|c| c.logits.iter().copied()).collect(),
    )
    .map_err(|_| Error::NonFinite("logits".into()))?;
    let trace = if capture {
        let per_layer = (0..a.n_layers)
            .map(|l| {
                let data = caches
                    .iter()
                    .flat_map(|c| {
                        c.blocks
                            .get(l + 1)
                            .map_or(&c.x_out, |next| &next.x_in)
                            .iter()
                            .copied()
                    })
                    .collect();
                Tensor::new(vec![n, a.seq_len, a.d_model], data)
                    .map_err(|_| Error::NonFinite(format!("activation of layer {l}")))
            })
            .collect::<Result<_>>()?;
        Some(ActivationTrace { per_layer })
    } else {
        None
    };
    Ok((logits, trace))
}

fn log_softmax_grad<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[label];
    let grad = logits
        .iter()
        .enumerate()
        .map(|(c, &l)| (l - lse).exp() - if c == label { T::one() } else { T::zero() })
        .collect();
    (loss, grad)
}

/// Mean cross-entropy and its gradient with respect to every tensor.
pub fn loss_and_grads<T: Scalar>(
    ckpt: &Checkpoint<T>,
    batch: &Batch<T>,
) -> Result<(T, Checkpoint<T>)> {
    check_batch(ckpt, batch)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let a = *ckpt.arch();
    let p = Params::view(ckpt);
    let per = a.seq_len * a.d_model;
    let inputs = batch.inputs.data();
    let partials: Vec<(T, Params<Vec<T>>)> = (0..batch.len())
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|idx| {
            let mut g = Params::zeros(&a);
            let mut loss = T::zero();
            for &i in idx {
                let x = &inputs[i * per..(i + 1) * per];
                let cache = sample_forward(&p, &a, x);
                let (l, dlogits) = log_softmax_grad(&cache.logits, batch.labels[i]);
                loss = loss + l;
                sample_backward(&p, &a, x, &cache, &dlogits, &mut g);
            }
            (loss, g)
        })
        .collect();
    let mut parts = partials.into_iter();
    let (mut loss, mut grads) = parts.next().expect("non-empty batch");
    for (l, g) in parts {
        loss = loss + l;
        grads.add_assign(&g);
    }
    let inv_n = T::one() / T::of_usize(batch.len());
    loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    grads.scale(inv_n);
    let grads = grads
        .into_checkpoint(&a, "gradient")
        .map_err(|_| Error::NonFinite("gradient".into()))?;
    Ok((loss, grads))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

pub fn predict<T: Scalar>(ckpt: &Checkpoint<T>, batch: &Batch<T>) -> Result<Vec<usize>> {
    let (logits, _) = forward(ckpt, batch, false)?;
    let c = ckpt.arch().n_classes;
    Ok(logits.data().chunks(c).map(argmax).collect())
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate<T: Scalar>(ckpt: &Checkpoint<T>, test: &Batch<T>) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test batch".into()));
    }
    let preds = predict(ckpt, test)?;
    let correct = preds.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / test.len() as f64)
}
