//! A straight-line re-implementation of the toy transformer built only from
//! `Tensor` operations, compared against the kernel-based forward pass.

mod common;

use common::{random_batch, random_checkpoint};
use mergeguard::arch::{attn, ln, mlp, ToyArchSpec};
use mergeguard::checkpoint::Checkpoint;
use mergeguard::model::{forward, Batch, LN_EPS};
use mergeguard::tensor::Tensor;

fn gelu(z: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * z * (1.0 + (c * (z + 0.044715 * z.powi(3))).tanh())
}

fn affine(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let y = x.matmul(&w.transpose().unwrap()).unwrap();
    match b {
        None => y,
        Some(b) => {
            let c = b.numel();
            Tensor::from_fn(y.shape(), |i| y.data()[i] + b.data()[i % c])
        }
    }
}

fn columns(x: &Tensor<f64>, from: usize, to: usize) -> Tensor<f64> {
    let rows = x.shape()[0];
    let w = to - from;
    Tensor::from_fn(&[rows, w], |i| x.at(i / w, from + i % w))
}

/// Returns the logits row and every block output.
fn oracle_sample(c: &Checkpoint<f64>, x: Tensor<f64>) -> (Vec<f64>, Vec<Tensor<f64>>) {
    let a = *c.arch();
    let g = |n: &str| c.get(n);
    let mut h = affine(&x, g("embed.w"), None);
    let mut outs = Vec::new();
    for l in 0..a.n_layers {
        let z = h
            .layer_norm(g(&ln(l, "attn", "g")), g(&ln(l, "attn", "b")), LN_EPS)
            .unwrap();
        let q = affine(&z, g(&attn(l, "wq")), None);
        let k = affine(&z, g(&attn(l, "wk")), None);
        let v = affine(&z, g(&attn(l, "wv")), None);
        let mut concat = vec![Vec::new(); a.seq_len];
        for head in 0..a.n_heads {
            let (lo, hi) = (head * a.d_k, (head + 1) * a.d_k);
            let (qh, kh, vh) = (columns(&q, lo, hi), columns(&k, lo, hi), columns(&v, lo, hi));
            let scores = qh
                .matmul(&kh.transpose().unwrap())
                .unwrap()
                .scale(1.0 / (a.d_k as f64).sqrt())
                .unwrap();
            let o = scores.row_softmax().unwrap().matmul(&vh).unwrap();
            for (s, row) in concat.iter_mut().enumerate() {
                row.extend_from_slice(o.row(s));
            }
        }
        let heads = Tensor::matrix(&concat).unwrap();
        h = h.add(&affine(&heads, g(&attn(l, "wo")), None)).unwrap();
        let z = h
            .layer_norm(g(&ln(l, "mlp", "g")), g(&ln(l, "mlp", "b")), LN_EPS)
            .unwrap();
        let hidden = affine(&z, g(&mlp(l, "w1")), Some(g(&mlp(l, "b1"))))
            .map(gelu)
            .unwrap();
        h = h
            .add(&affine(&hidden, g(&mlp(l, "w2")), Some(g(&mlp(l, "b2")))))
            .unwrap();
        outs.push(h.clone());
    }
    let z = h.layer_norm(g("ln.final.g"), g("ln.final.b"), LN_EPS).unwrap();
    let pooled = Tensor::from_fn(&[1, a.d_model], |j| {
        (0..a.seq_len).map(|s| z.at(s, j)).sum::<f64>() / a.seq_len as f64
    });
    let logits = affine(&pooled, g("head.w"), Some(g("head.b")));
    (logits.into_data(), outs)
}

fn sample_tensor(b: &Batch<f64>, i: usize, arch: &ToyArchSpec) -> Tensor<f64> {
    Tensor::new(vec![arch.seq_len, arch.d_model], b.sample(i).to_vec()).unwrap()
}

#[test]
fn logits_and_trace_match_oracle() {
    for (k, arch) in [ToyArchSpec::TINY, ToyArchSpec::TOY, common::mlp_arch(6, 5)]
        .into_iter()
        .enumerate()
    {
        for seed in 0..5u64 {
            let c = random_checkpoint(&arch, 100 * k as u64 + seed);
            let b = random_batch(&arch, 11, seed);
            let (logits, trace) = forward(&c, &b, true).unwrap();
            let trace = trace.unwrap();
            assert_eq!(trace.per_layer.len(), arch.n_layers);
            for i in 0..b.len() {
                let (want, outs) = oracle_sample(&c, sample_tensor(&b, i, &arch));
                for (got, w) in logits.row(i).iter().zip(&want) {
                    assert!((got - w).abs() < 1e-12, "logit {got} vs {w}");
                }
                let per = arch.seq_len * arch.d_model;
                for (l, o) in outs.iter().enumerate() {
                    let got = &trace.per_layer[l].data()[i * per..(i + 1) * per];
                    for (g, w) in got.iter().zip(o.data()) {
                        assert!((g - w).abs() < 1e-12, "layer {l}");
                    }
                }
            }
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let arch = ToyArchSpec::TOY;
    let c = random_checkpoint(&arch, 9);
    let b = random_batch(&arch, 37, 9);
    let (l1, t1) = forward(&c, &b, true).unwrap();
    let (l2, t2) = forward(&c, &b, true).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(t1.unwrap().per_layer, t2.unwrap().per_layer);
}

#[test]
fn f32_tracks_f64() {
    let arch = ToyArchSpec::TINY;
    let c = random_checkpoint(&arch, 4);
    let b = random_batch(&arch, 8, 4);
    let (l64, _) = forward(&c, &b, false).unwrap();
    let (l32, _) = forward(&c.cast::<f32>().unwrap(), &b_cast(&b), false).unwrap();
    for (x, y) in l64.data().iter().zip(l32.data()) {
        assert!((x - *y as f64).abs() < 1e-3);
    }
}

fn b_cast(b: &Batch<f64>) -> Batch<f32> {
    Batch::new(b.inputs.cast::<f32>().unwrap(), b.labels.clone()).unwrap()
}
