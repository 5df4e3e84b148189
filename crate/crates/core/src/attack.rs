//! An adaptive free-rider who knows the pretrained checkpoint and tries to
//! undo the permutation and scaling before merging.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::arch::{attn, Scope};
use crate::assignment::solve_max;
use crate::checkpoint::Checkpoint;
use crate::defense::{apply_permutation, apply_scaling, HeadScale, LayerPermutations, LayerScalings};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::dot;

/// Per block, the permutation that maximizes the MLP inner product with
/// `pre` (equivalently minimizes the distance), applied to `protected`.
pub fn recover_permutation<T: Scalar>(
    protected: &Checkpoint<T>,
    pre: &Checkpoint<T>,
) -> Result<(Checkpoint<T>, LayerPermutations)> {
    protected.require_same_arch(pre)?;
    let perms: LayerPermutations = (0..protected.arch().n_layers)
        .map(|l| Ok((l, solve_max(&crate::defense::mlp_cross_cost(pre, protected, l)?).perm)))
        .collect::<Result<_>>()?;
    Ok((apply_permutation(protected, &perms)?, perms))
}

/// Row-wise 1-D least squares: the factor `c` minimizing `‖c·w − target‖²`.
fn row_fit<T: Scalar>(
    w: &[T],
    target: &[T],
    tensor: &'static str,
    layer: usize,
    head: usize,
    coord: usize,
) -> Result<f64> {
    let nn = dot(w, w).as_f64();
    if nn == 0.0 {
        return Err(Error::ZeroNormRow {
            tensor,
            layer,
            head,
            coord,
        });
    }
    Ok(dot(w, target).as_f64() / nn)
}

/// Per head and coordinate, fit `a'` from query rows and `b'` from value rows
/// against `pre`, then rescale keys by `1/a'` and the output columns by `1/b'`.
pub fn recover_scaling<T: Scalar>(
    protected: &Checkpoint<T>,
    pre: &Checkpoint<T>,
) -> Result<(Checkpoint<T>, LayerScalings)> {
    protected.require_same_arch(pre)?;
    let a = *protected.arch();
    let mut scales = LayerScalings::new();
    for layer in 0..a.n_layers {
        let (wq, wq_pre) = (protected.get(&attn(layer, "wq")), pre.get(&attn(layer, "wq")));
        let (wv, wv_pre) = (protected.get(&attn(layer, "wv")), pre.get(&attn(layer, "wv")));
        let mut heads = BTreeMap::new();
        for head in 0..a.n_heads {
            let mut hs = HeadScale {
                a: Vec::with_capacity(a.d_k),
                b: Vec::with_capacity(a.d_k),
            };
            for c in 0..a.d_k {
                let r = head * a.d_k + c;
                hs.a.push(row_fit(wq.row(r), wq_pre.row(r), "wq", layer, head, c)?);
                hs.b.push(row_fit(wv.row(r), wv_pre.row(r), "wv", layer, head, c)?);
            }
            heads.insert(head, hs);
        }
        scales.insert(layer, heads);
    }
    Ok((apply_scaling(protected, &scales)?, scales))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport<T> {
    #[serde(skip)]
    pub recovered: Option<Checkpoint<T>>,
    pub perm_used: LayerPermutations,
    pub scales_used: LayerScalings,
    /// `‖θ_pre − recovered‖` over the MLP and attention tensors.
    pub residual: f64,
}

impl<T: Scalar> RecoveryReport<T> {
    pub fn recovered(&self) -> &Checkpoint<T> {
        self.recovered.as_ref().expect("report built by adaptive_recover")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Euclidean distance over the tensors an adaptive attack touches.
pub fn attacked_residual<T: Scalar>(a: &Checkpoint<T>, b: &Checkpoint<T>) -> Result<f64> {
    a.require_same_arch(b)?;
    let mut acc = 0.0;
    for (name, t) in a.tensors() {
        if Scope::Mlp.contains(name) || Scope::Attn.contains(name) {
            for (&x, &y) in t.data().iter().zip(b.get(name).data()) {
                let e = (x - y).as_f64();
                acc += e * e;
            }
        }
    }
    Ok(acc.sqrt())
}

/// Scaling recovery, then permutation recovery.
pub fn adaptive_recover<T: Scalar>(protected: &Checkpoint<T>, pre: &Checkpoint<T>) -> Result<RecoveryReport<T>> {
    let (scaled, scales_used) = recover_scaling(protected, pre)?;
    let (mut recovered, perm_used) = recover_permutation(&scaled, pre)?;
    recovered.note("adaptive recovery");
    let residual = attacked_residual(pre, &recovered)?;
    Ok(RecoveryReport {
        recovered: Some(recovered),
        perm_used,
        scales_used,
        residual,
    })
}
