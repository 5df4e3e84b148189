//! Scaling-only protection of a low-rank adapter `B·A`.

use crate::error::{Error, Result};
use crate::merging::LowRankAdapter;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::scaling::ScaleRange;

/// Draws `s` of length `r` and returns `(B·diag(s), diag(s)⁻¹·A)`; the
/// product `B·A` is unchanged up to rounding.
pub fn protect_lowrank<T: Scalar>(
    adapter: &LowRankAdapter<T>,
    range: ScaleRange,
    seed: u64,
) -> Result<LowRankAdapter<T>> {
    range.validate()?;
    let r = adapter.rank()?;
    let s = range.sample(r, &mut rng::stream(seed, &[rng::TAG_LOWRANK]));
    scale_adapter(adapter, &s)
}

pub fn scale_adapter<T: Scalar>(adapter: &LowRankAdapter<T>, s: &[f64]) -> Result<LowRankAdapter<T>> {
    let r = adapter.rank()?;
    if s.len() != r {
        return Err(Error::Shape(format!("{} factors for rank {r}", s.len())));
    }
    if let Some(i) = s.iter().position(|&f| f == 0.0 || !f.is_finite()) {
        return Err(Error::ZeroScale(format!("adapter factor {i}")));
    }
    let (b, a) = (&adapter.b, &adapter.a);
    let d_in = a.shape()[1];
    let b2 = Tensor::from_fn(b.shape(), |i| b.data()[i] * T::lit(s[i % r]));
    let a2 = Tensor::from_fn(a.shape(), |i| a.data()[i] / T::lit(s[i / d_in]));
    b2.ensure_finite("adapter B")?;
    a2.ensure_finite("adapter A")?;
    Ok(LowRankAdapter {
        b: b2,
        a: a2,
        target: adapter.target.clone(),
    })
}
