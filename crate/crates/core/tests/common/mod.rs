#![allow(dead_code)]

use mergeguard::arch::{mlp, ToyArchSpec};
use mergeguard::checkpoint::Checkpoint;
use mergeguard::model::{init_checkpoint, Batch};
use mergeguard::rng;
use mergeguard::tensor::Tensor;
use rand_distr::{Distribution, Normal, StandardNormal};

/// A freshly initialized model with every tensor (biases and layer-norm
/// parameters included) jittered so no parameter group is trivially constant.
pub fn random_checkpoint(arch: &ToyArchSpec, seed: u64) -> Checkpoint<f64> {
    let base = init_checkpoint::<f64>(arch, seed).unwrap();
    let mut r = rng::stream(seed, &[0xC0FFEE]);
    let jitter = Normal::new(0.0, 0.2).unwrap();
    base.try_map(|_, t| {
        let data = t.data().iter().map(|v| v + jitter.sample(&mut r)).collect();
        Tensor::new(t.shape().to_vec(), data)
    })
    .unwrap()
}

pub fn random_batch(arch: &ToyArchSpec, n: usize, seed: u64) -> Batch<f64> {
    let mut r = rng::stream(seed, &[0xBA7C]);
    let data = (0..n * arch.seq_len * arch.d_model)
        .map(|_| StandardNormal.sample(&mut r))
        .collect();
    let labels = (0..n).map(|i| i % arch.n_classes).collect();
    Batch::new(Tensor::new(vec![n, arch.seq_len, arch.d_model], data).unwrap(), labels).unwrap()
}

pub fn random_matrix(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, &[0x3A7]);
    (0..n)
        .map(|_| (0..n).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect()
}

/// Every permutation of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

pub fn mlp_arch(d_model: usize, d_hidden: usize) -> ToyArchSpec {
    ToyArchSpec {
        n_layers: 2,
        d_model,
        d_hidden,
        n_heads: 2,
        d_k: d_model / 2,
        n_classes: 3,
        seq_len: 3,
    }
}

pub fn max_abs(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b).unwrap()
}

/// Worst relative error between analytic gradients and central differences
/// over `n_coords` coordinates drawn uniformly from all parameters.
/// Relative error is `|g − fd| / max(|g|, |fd|, floor)`.
pub fn gradient_check(
    c: &Checkpoint<f64>,
    b: &Batch<f64>,
    n_coords: usize,
    step: f64,
    floor: f64,
    seed: u64,
) -> f64 {
    use rand::Rng;
    let (_, grads) = mergeguard::model::loss_and_grads(c, b).unwrap();
    let names: Vec<&String> = c.tensors().keys().collect();
    let total: usize = c.tensors().values().map(|t| t.numel()).sum();
    let mut r = rng::stream(seed, &[0x6AD]);
    let mut worst: f64 = 0.0;
    for _ in 0..n_coords {
        let mut k = r.random_range(0..total);
        let mut name = names[0];
        for n in &names {
            let len = c.get(n).numel();
            if k < len {
                name = n;
                break;
            }
            k -= len;
        }
        let loss_at = |delta: f64| {
            let mut p = c.clone();
            let mut t = p.get(name).clone();
            t.data_mut()[k] += delta;
            p.set(name, t).unwrap();
            mergeguard::model::loss_and_grads(&p, b).unwrap().0
        };
        let fd = (loss_at(step) - loss_at(-step)) / (2.0 * step);
        let g = grads.get(name).data()[k];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

/// Squared distance between `pre`'s layer-`l` MLP and `def`'s with hidden
/// units reordered by `perm`, computed entry by entry.
#[allow(clippy::needless_range_loop)]
pub fn layer_distance(pre: &Checkpoint<f64>, def: &Checkpoint<f64>, l: usize, perm: &[usize]) -> f64 {
    let a = pre.arch();
    let (w1p, w1d) = (pre.get(&mlp(l, "w1")), def.get(&mlp(l, "w1")));
    let (b1p, b1d) = (pre.get(&mlp(l, "b1")), def.get(&mlp(l, "b1")));
    let (w2p, w2d) = (pre.get(&mlp(l, "w2")), def.get(&mlp(l, "w2")));
    let mut s = 0.0;
    for j in 0..a.d_hidden {
        for i in 0..a.d_model {
            s += (w1p.at(j, i) - w1d.at(perm[j], i)).powi(2);
            s += (w2p.at(i, j) - w2d.at(i, perm[j])).powi(2);
        }
        s += (b1p.data()[j] - b1d.data()[perm[j]]).powi(2);
    }
    s
}
