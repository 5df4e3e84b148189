//! Exact-count random pruning of weight-matrix entries.

use rand::seq::index;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Names of the tensors eligible for pruning: every rank-2 tensor. Biases and
/// layer-norm parameters are rank 1 and never touched.
pub fn prunable_tensors<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<&str> {
    ckpt.tensors()
        .iter()
        .filter(|(_, t)| t.rank() == 2)
        .map(|(n, _)| n.as_str())
        .collect()
}

pub fn prunable_count<T: Scalar>(ckpt: &Checkpoint<T>) -> usize {
    prunable_tensors(ckpt)
        .into_iter()
        .map(|n| ckpt.get(n).numel())
        .sum()
}

/// Zero exactly `round(rate · N)` entries, chosen uniformly without
/// replacement over the `N` weight-matrix entries (flattened in name order).
pub fn dropout_prune<T: Scalar>(ckpt: &Checkpoint<T>, rate: f64, seed: u64) -> Result<Checkpoint<T>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must lie in [0, 1], got {rate}"
        )));
    }
    let names: Vec<String> = prunable_tensors(ckpt).into_iter().map(String::from).collect();
    let sizes: Vec<usize> = names.iter().map(|n| ckpt.get(n).numel()).collect();
    let total: usize = sizes.iter().sum();
    let k = (rate * total as f64).round() as usize;
    let mut chosen = index::sample(&mut rng::stream(seed, &[rng::TAG_DROPOUT]), total, k).into_vec();
    chosen.sort_unstable();

    let mut out = ckpt.clone();
    let mut it = chosen.into_iter().peekable();
    let mut base = 0;
    for (name, size) in names.iter().zip(sizes) {
        let data = out.data_mut(name);
        while let Some(&i) = it.peek() {
            if i >= base + size {
                break;
            }
            data[i - base] = T::zero();
            it.next();
        }
        base += size;
    }
    Ok(out)
}
