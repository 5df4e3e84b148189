//! Hidden-unit permutation of every block's MLP.
//!
//! For a permutation `p` of the hidden units, row `j` of `w1` and entry `j` of
//! `b1` become the old row/entry `p[j]`, and column `j` of `w2` becomes the
//! old column `p[j]`. The elementwise activation commutes with the reorder,
//! so the MLP computes the same function.

use std::collections::BTreeMap;

use crate::arch::mlp;
use crate::assignment::{check_permutation, solve_min, CostMatrix};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, Tensor};

pub type LayerPermutations = BTreeMap<usize, Vec<usize>>;

/// `C[j, k] = ⟨w1_ref[j,:], w1_other[k,:]⟩ + ⟨w2_ref[:,j], w2_other[:,k]⟩ + b1_ref[j]·b1_other[k]`.
///
/// Picking `perm[j] = k` puts `other`'s hidden unit `k` in slot `j`, so
/// `Σ_j C[j, perm[j]]` is the inner product between `reference`'s MLP and the
/// permuted `other`'s MLP (the `b2` term does not depend on the permutation).
pub(crate) fn mlp_cross_cost<T: Scalar>(
    reference: &Checkpoint<T>,
    other: &Checkpoint<T>,
    layer: usize,
) -> Result<CostMatrix<T>> {
    let a = reference.arch();
    let (h, d) = (a.d_hidden, a.d_model);
    let (w1r, w1o) = (reference.get(&mlp(layer, "w1")), other.get(&mlp(layer, "w1")));
    let (b1r, b1o) = (reference.get(&mlp(layer, "b1")), other.get(&mlp(layer, "b1")));
    let w2r = reference.get(&mlp(layer, "w2")).transpose()?;
    let w2o = other.get(&mlp(layer, "w2")).transpose()?;
    let mut cost = vec![T::zero(); h * h];
    for j in 0..h {
        for k in 0..h {
            cost[j * h + k] = dot(w1r.row(j), w1o.row(k))
                + dot(w2r.row(j), w2o.row(k))
                + b1r.data()[j] * b1o.data()[k];
        }
    }
    debug_assert_eq!(w2r.shape(), &[h, d]);
    CostMatrix::new(Tensor::new(vec![h, h], cost)?)
}

/// Per block, the hidden-unit permutation of `def` that maximizes its MLP's
/// squared distance to `pre`'s MLP (equivalently minimizes the cross inner
/// product).
pub fn plan_permutation<T: Scalar>(
    def: &Checkpoint<T>,
    pre: &Checkpoint<T>,
) -> Result<LayerPermutations> {
    def.require_same_arch(pre)?;
    (0..def.arch().n_layers)
        .map(|l| Ok((l, solve_min(&mlp_cross_cost(pre, def, l)?).perm)))
        .collect()
}

pub fn apply_permutation<T: Scalar>(
    ckpt: &Checkpoint<T>,
    perms: &LayerPermutations,
) -> Result<Checkpoint<T>> {
    let a = *ckpt.arch();
    let mut out = ckpt.clone();
    for (&layer, perm) in perms {
        if layer >= a.n_layers {
            return Err(Error::InvalidPermutation(format!(
                "layer {layer} does not exist ({} layers)",
                a.n_layers
            )));
        }
        check_permutation(perm, a.d_hidden, &format!("layer {layer}"))?;
        let (h, d) = (a.d_hidden, a.d_model);

        let w1 = ckpt.get(&mlp(layer, "w1"));
        let w1p: Vec<T> = perm.iter().flat_map(|&p| w1.row(p).iter().copied()).collect();
        out.set(&mlp(layer, "w1"), Tensor::new(vec![h, d], w1p)?)?;

        let b1 = ckpt.get(&mlp(layer, "b1")).data();
        out.set(
            &mlp(layer, "b1"),
            Tensor::vector(perm.iter().map(|&p| b1[p]).collect())?,
        )?;

        let w2 = ckpt.get(&mlp(layer, "w2"));
        out.set(
            &mlp(layer, "w2"),
            Tensor::from_fn(&[d, h], |i| w2.at(i / h, perm[i % h])),
        )?;
    }
    Ok(out)
}

/// Squared Euclidean distance between two checkpoints restricted to MLP tensors.
pub fn mlp_sq_distance<T: Scalar>(a: &Checkpoint<T>, b: &Checkpoint<T>) -> Result<T> {
    a.require_same_arch(b)?;
    let mut acc = T::zero();
    for (name, t) in a.tensors() {
        if crate::arch::Scope::Mlp.contains(name) {
            for (&x, &y) in t.data().iter().zip(b.get(name).data()) {
                acc = acc + (x - y) * (x - y);
            }
        }
    }
    Ok(acc)
}
