//! Per-head diagonal rescaling of attention projections.
//!
//! Head `h` owns output rows `h·d_k .. (h+1)·d_k` of `wq`, `wk`, `wv` and the
//! matching input columns of `wo`. Scaling query rows by `a` and key rows by
//! `1/a` leaves every `q·k` score unchanged; scaling value rows by `b` and the
//! `wo` columns that read them by `1/b` leaves the projected output unchanged.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::arch::{attn, ToyArchSpec};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Query/key factors `a` and value/output factors `b`, each of length `d_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScale {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// layer → head → factors.
pub type LayerScalings = BTreeMap<usize, BTreeMap<usize, HeadScale>>;

/// Serialized as `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct ScaleRange {
    pub min: f64,
    pub max: f64,
}

impl ScaleRange {
    pub const DEFAULT: ScaleRange = ScaleRange { min: 0.5, max: 2.0 };

    pub fn new(min: f64, max: f64) -> Result<Self> {
        let r = Self { min, max };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min > 0.0 && self.min <= self.max && self.max.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidRange {
                min: self.min,
                max: self.max,
            })
        }
    }

    /// `n` i.i.d. draws from U(min, max).
    pub(crate) fn sample(&self, n: usize, r: &mut rng::Rng) -> Vec<f64> {
        if self.min == self.max {
            return vec![self.min; n];
        }
        let u = Uniform::new_inclusive(self.min, self.max).expect("validated range");
        (0..n).map(|_| u.sample(r)).collect()
    }
}

impl From<[f64; 2]> for ScaleRange {
    fn from([min, max]: [f64; 2]) -> Self {
        Self { min, max }
    }
}

impl From<ScaleRange> for [f64; 2] {
    fn from(r: ScaleRange) -> Self {
        [r.min, r.max]
    }
}

/// Independent draws for every (layer, head), each from its own stream keyed
/// by the master seed.
pub fn plan_scaling(arch: &ToyArchSpec, range: ScaleRange, seed: u64) -> Result<LayerScalings> {
    range.validate()?;
    arch.validate()?;
    Ok((0..arch.n_layers)
        .map(|l| {
            let heads = (0..arch.n_heads)
                .map(|h| {
                    let mut r = rng::stream(seed, &[rng::TAG_SCALING, l as u64, h as u64]);
                    let a = range.sample(arch.d_k, &mut r);
                    let b = range.sample(arch.d_k, &mut r);
                    (h, HeadScale { a, b })
                })
                .collect();
            (l, heads)
        })
        .collect())
}

fn check_factors(fs: &[f64], d_k: usize, what: &str) -> Result<()> {
    if fs.len() != d_k {
        return Err(Error::Shape(format!("{what}: {} factors for d_k={d_k}", fs.len())));
    }
    if let Some(i) = fs.iter().position(|&f| f == 0.0 || !f.is_finite()) {
        return Err(Error::ZeroScale(format!("{what}[{i}]")));
    }
    Ok(())
}

/// Multiply rows of `wq` by `a`, divide rows of `wk` by `a`, multiply rows of
/// `wv` by `b`, divide the matching columns of `wo` by `b`.
pub fn apply_scaling<T: Scalar>(ckpt: &Checkpoint<T>, scalings: &LayerScalings) -> Result<Checkpoint<T>> {
    let a = *ckpt.arch();
    let d = a.d_model;
    let mut out = ckpt.clone();
    for (&layer, heads) in scalings {
        if layer >= a.n_layers {
            return Err(Error::Shape(format!("scaling for missing layer {layer}")));
        }
        for (&head, s) in heads {
            if head >= a.n_heads {
                return Err(Error::Shape(format!("scaling for missing head {head}")));
            }
            check_factors(&s.a, a.d_k, &format!("layer {layer} head {head} a"))?;
            check_factors(&s.b, a.d_k, &format!("layer {layer} head {head} b"))?;
            for c in 0..a.d_k {
                let r = head * a.d_k + c;
                let (fa, fb) = (T::lit(s.a[c]), T::lit(s.b[c]));
                for v in &mut out.data_mut(&attn(layer, "wq"))[r * d..(r + 1) * d] {
                    *v = *v * fa;
                }
                for v in &mut out.data_mut(&attn(layer, "wk"))[r * d..(r + 1) * d] {
                    *v = *v / fa;
                }
                for v in &mut out.data_mut(&attn(layer, "wv"))[r * d..(r + 1) * d] {
                    *v = *v * fb;
                }
                let wo = out.data_mut(&attn(layer, "wo"));
                for o in 0..d {
                    wo[o * d + r] = wo[o * d + r] / fb;
                }
            }
        }
    }
    for layer in scalings.keys() {
        for w in ["wq", "wk", "wv", "wo"] {
            out.get(&attn(*layer, w)).ensure_finite(&attn(*layer, w))?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{dot, Tensor};

    #[test]
    fn degenerate_range_gives_ones() {
        let s = plan_scaling(&ToyArchSpec::TINY, ScaleRange::new(1.0, 1.0).unwrap(), 3).unwrap();
        assert!(s.values().flat_map(|h| h.values()).all(|hs| hs
            .a
            .iter()
            .chain(&hs.b)
            .all(|&v| v == 1.0)));
    }

    #[test]
    fn deterministic_and_in_range() {
        let r = ScaleRange::DEFAULT;
        let p1 = plan_scaling(&ToyArchSpec::TOY, r, 9).unwrap();
        assert_eq!(p1, plan_scaling(&ToyArchSpec::TOY, r, 9).unwrap());
        assert_ne!(p1, plan_scaling(&ToyArchSpec::TOY, r, 10).unwrap());
        for hs in p1.values().flat_map(|h| h.values()) {
            assert!(hs.a.iter().chain(&hs.b).all(|&v| (0.5..=2.0).contains(&v)));
        }
    }

    #[test]
    fn invalid_ranges() {
        assert!(ScaleRange::new(0.0, 1.0).is_err());
        assert!(ScaleRange::new(2.0, 1.0).is_err());
        assert!(ScaleRange::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn uniform_mean() {
        let range = ScaleRange::DEFAULT;
        let mut r = rng::stream(42, &[]);
        let xs = range.sample(10_000, &mut r);
        let mean = xs.iter().sum::<f64>() / 1e4;
        // σ of the mean of U(0.5, 2): (1.5 / √12) / √10⁴
        let sigma = 1.5 / 12f64.sqrt() / 100.0;
        assert!((mean - 1.25).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn single_head_score_invariant() {
        let arch = ToyArchSpec {
            n_layers: 1,
            d_model: 1,
            d_hidden: 1,
            n_heads: 1,
            d_k: 1,
            n_classes: 2,
            seq_len: 1,
        };
        let mut c = Checkpoint::<f64>::zeros(arch).unwrap();
        c.set("block.0.attn.wq", Tensor::matrix(&[vec![3.0]]).unwrap()).unwrap();
        c.set("block.0.attn.wk", Tensor::matrix(&[vec![5.0]]).unwrap()).unwrap();
        let mut s = LayerScalings::new();
        s.insert(0, [(0, HeadScale { a: vec![2.0], b: vec![1.0] })].into());
        let p = apply_scaling(&c, &s).unwrap();
        assert_eq!(p.get("block.0.attn.wq").data(), &[6.0]);
        assert_eq!(p.get("block.0.attn.wk").data(), &[2.5]);
        for x in [-1.5, 0.3, 7.0] {
            let q = [p.get("block.0.attn.wq").data()[0] * x];
            let k = [p.get("block.0.attn.wk").data()[0] * x];
            assert_eq!(dot(&q, &k), 3.0 * x * 5.0 * x);
        }
    }

    #[test]
    fn ones_are_noop_and_zero_rejected() {
        let arch = ToyArchSpec::TINY;
        let c = crate::model::init_checkpoint::<f64>(&arch, 4).unwrap();
        let ones = plan_scaling(&arch, ScaleRange::new(1.0, 1.0).unwrap(), 0).unwrap();
        assert_eq!(apply_scaling(&c, &ones).unwrap(), c);
        let mut zero = ones;
        zero.get_mut(&1).unwrap().get_mut(&0).unwrap().b[3] = 0.0;
        assert!(matches!(apply_scaling(&c, &zero), Err(Error::ZeroScale(_))));
    }
}
