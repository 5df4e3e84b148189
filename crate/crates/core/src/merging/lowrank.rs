//! Merging low-rank adapters `ΔW = B·A` into a base checkpoint.

use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `b` is `[d_out, r]`, `a` is `[r, d_in]`, and `target` names a `[d_out, d_in]`
/// tensor of the base checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter<T> {
    pub b: Tensor<T>,
    pub a: Tensor<T>,
    pub target: String,
}

impl<T: Scalar> LowRankAdapter<T> {
    pub fn rank(&self) -> Result<usize> {
        match (self.b.shape(), self.a.shape()) {
            ([_, r1], [r2, _]) if r1 == r2 && *r1 >= 1 => Ok(*r1),
            (b, a) => Err(Error::Shape(format!("adapter B {b:?} and A {a:?} do not compose"))),
        }
    }

    pub fn product(&self) -> Result<Tensor<T>> {
        self.rank()?;
        self.b.matmul(&self.a)
    }
}

/// `target += λ · Σ_i B_i·A_i` for each named target; other tensors are kept.
pub fn merge_lowrank<T: Scalar>(
    base: &Checkpoint<T>,
    adapters: &[LowRankAdapter<T>],
    lambda: f64,
) -> Result<Checkpoint<T>> {
    let mut sums: BTreeMap<&str, Tensor<T>> = BTreeMap::new();
    for ad in adapters {
        let target = base
            .tensors()
            .get(&ad.target)
            .ok_or_else(|| Error::Shape(format!("no tensor named {}", ad.target)))?;
        let p = ad.product()?;
        if p.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "adapter product {:?} vs target {} {:?}",
                p.shape(),
                ad.target,
                target.shape()
            )));
        }
        let acc = match sums.remove(ad.target.as_str()) {
            Some(s) => s.add(&p)?,
            None => p,
        };
        sums.insert(&ad.target, acc);
    }
    let mut out = base.clone();
    for (name, s) in sums {
        out.set(name, base.get(name).add(&s.scale(T::lit(lambda))?)?)?;
    }
    out.note(format!("merge lowrank n={} lambda={lambda}", adapters.len()));
    Ok(out)
}
