//! Function-preserving reparameterization that pushes a model away from its
//! pretrained starting point: an MLP hidden-unit permutation chosen to
//! maximize distance, followed by random per-head attention scaling and
//! optional random pruning.

mod dropout;
mod lowrank;
mod permutation;
mod scaling;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use dropout::{dropout_prune, prunable_count, prunable_tensors};
pub use lowrank::{protect_lowrank, scale_adapter};
pub(crate) use permutation::mlp_cross_cost;
pub use permutation::{apply_permutation, mlp_sq_distance, plan_permutation, LayerPermutations};
pub use scaling::{apply_scaling, plan_scaling, HeadScale, LayerScalings, ScaleRange};

pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub rate: f64,
    pub seed: u64,
}

/// Everything needed to replay a protection bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionPlan {
    pub version: u32,
    pub s_range: ScaleRange,
    pub seed: u64,
    pub permutations: LayerPermutations,
    pub scalings: LayerScalings,
    pub dropout: Option<DropoutSpec>,
}

impl ProtectionPlan {
    /// Identity permutations, unit scales, no pruning.
    pub fn identity(arch: &crate::arch::ToyArchSpec) -> Result<Self> {
        let range = ScaleRange::new(1.0, 1.0)?;
        Ok(Self {
            version: PLAN_VERSION,
            s_range: range,
            seed: 0,
            permutations: (0..arch.n_layers)
                .map(|l| (l, (0..arch.d_hidden).collect()))
                .collect(),
            scalings: plan_scaling(arch, range, 0)?,
            dropout: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(s)?;
        if plan.version != PLAN_VERSION {
            return Err(Error::Format(format!(
                "unsupported plan version {}",
                plan.version
            )));
        }
        Ok(plan)
    }

    /// Structural checks against an architecture: bijections, scale counts
    /// and range membership.
    pub fn validate(&self, arch: &crate::arch::ToyArchSpec) -> Result<()> {
        self.s_range.validate()?;
        for (l, p) in &self.permutations {
            if *l >= arch.n_layers {
                return Err(Error::InvalidPermutation(format!("layer {l} does not exist")));
            }
            crate::assignment::check_permutation(p, arch.d_hidden, &format!("layer {l}"))?;
        }
        for (l, heads) in &self.scalings {
            for (h, s) in heads {
                let ok = |v: &f64| (self.s_range.min..=self.s_range.max).contains(v);
                if !s.a.iter().chain(&s.b).all(ok) {
                    return Err(Error::InvalidArgument(format!(
                        "layer {l} head {h}: scale outside [{}, {}]",
                        self.s_range.min, self.s_range.max
                    )));
                }
            }
        }
        if let Some(d) = self.dropout {
            if !(0.0..=1.0).contains(&d.rate) {
                return Err(Error::InvalidArgument(format!("dropout rate {}", d.rate)));
            }
        }
        Ok(())
    }
}

/// Permutation, then scaling, then optional pruning.
pub fn apply_plan<T: Scalar>(ckpt: &Checkpoint<T>, plan: &ProtectionPlan) -> Result<Checkpoint<T>> {
    plan.validate(ckpt.arch())?;
    let permuted = apply_permutation(ckpt, &plan.permutations)?;
    let mut out = apply_scaling(&permuted, &plan.scalings)?;
    if let Some(d) = plan.dropout {
        out = dropout_prune(&out, d.rate, d.seed)?;
    }
    out.note(format!("protect seed={}", plan.seed));
    Ok(out)
}

pub fn protect<T: Scalar>(
    def: &Checkpoint<T>,
    pre: &Checkpoint<T>,
    s_range: ScaleRange,
    seed: u64,
    dropout: Option<DropoutSpec>,
) -> Result<(Checkpoint<T>, ProtectionPlan)> {
    def.require_same_arch(pre)?;
    let plan = ProtectionPlan {
        version: PLAN_VERSION,
        s_range,
        seed,
        permutations: plan_permutation(def, pre)?,
        scalings: plan_scaling(def.arch(), s_range, seed)?,
        dropout,
    };
    let out = apply_plan(def, &plan)?;
    Ok((out, plan))
}
