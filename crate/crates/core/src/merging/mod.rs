//! Model-merging methods over task vectors `τ = θ − θ_pre`.

mod lowrank;
mod ties;

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::arch::ToyArchSpec;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use lowrank::{merge_lowrank, LowRankAdapter};
pub use ties::{merge_ties, merge_ties_with, TiesTrim};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector<T> {
    arch: ToyArchSpec,
    pub deltas: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> TaskVector<T> {
    pub fn arch(&self) -> &ToyArchSpec {
        &self.arch
    }

    pub fn numel(&self) -> usize {
        self.deltas.values().map(Tensor::numel).sum()
    }

    /// Elementwise sum of two task vectors.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.require_same_arch(other)?;
        let deltas = self
            .deltas
            .iter()
            .map(|(n, t)| Ok((n.clone(), t.add(&other.deltas[n])?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            arch: self.arch,
            deltas,
        })
    }

    fn require_same_arch(&self, other: &Self) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::ArchMismatch(format!("{:?} vs {:?}", self.arch, other.arch)));
        }
        Ok(())
    }

    fn map_values(&self, mut f: impl FnMut(&str, &[T]) -> Vec<T>) -> Result<Self> {
        let deltas = self
            .deltas
            .iter()
            .map(|(n, t)| Ok((n.clone(), Tensor::new(t.shape().to_vec(), f(n, t.data()))?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            arch: self.arch,
            deltas,
        })
    }
}

pub fn task_vector<T: Scalar>(ckpt: &Checkpoint<T>, pre: &Checkpoint<T>) -> Result<TaskVector<T>> {
    ckpt.require_same_arch(pre)?;
    let deltas = ckpt
        .tensors()
        .iter()
        .map(|(n, t)| Ok((n.clone(), t.sub(pre.get(n))?)))
        .collect::<Result<_>>()?;
    Ok(TaskVector {
        arch: *ckpt.arch(),
        deltas,
    })
}

fn check_taus<T: Scalar>(pre: &Checkpoint<T>, taus: &[TaskVector<T>]) -> Result<()> {
    if taus.is_empty() {
        return Err(Error::InvalidArgument("no task vectors to merge".into()));
    }
    for t in taus {
        if t.arch != *pre.arch() {
            return Err(Error::ArchMismatch(format!(
                "task vector {:?} vs pretrained {:?}",
                t.arch,
                pre.arch()
            )));
        }
    }
    Ok(())
}

/// `pre[name][i] + update(name, i)` for every entry, rejecting non-finite results.
fn add_to_pre<T: Scalar>(
    pre: &Checkpoint<T>,
    label: String,
    mut update: impl FnMut(&str, usize) -> T,
) -> Result<Checkpoint<T>> {
    let mut out = pre.try_map(|name, t| {
        Ok(Tensor::from_fn(t.shape(), |i| t.data()[i] + update(name, i)))
    })?;
    for (name, t) in out.tensors() {
        t.ensure_finite(name)?;
    }
    out.note(label);
    Ok(out)
}

/// `θ_pre + λ · Σ_i τ_i`, accumulating the sum before scaling.
pub fn merge_ta<T: Scalar>(pre: &Checkpoint<T>, taus: &[TaskVector<T>], lambda: f64) -> Result<Checkpoint<T>> {
    check_taus(pre, taus)?;
    let l = T::lit(lambda);
    add_to_pre(pre, format!("merge ta n={} lambda={lambda}", taus.len()), |name, i| {
        taus.iter().fold(T::zero(), |acc, t| acc + t.deltas[name].data()[i]) * l
    })
}

/// Task arithmetic with `λ = 1/n`.
pub fn merge_wa<T: Scalar>(pre: &Checkpoint<T>, taus: &[TaskVector<T>]) -> Result<Checkpoint<T>> {
    check_taus(pre, taus)?;
    merge_ta(pre, taus, 1.0 / taus.len() as f64)
}

/// Drop each entry independently with probability `p`; scale survivors by
/// `1/(1−p)`. Entries are visited in tensor-name order from one stream.
pub fn dare_transform<T: Scalar>(tau: &TaskVector<T>, p: f64, seed: u64) -> Result<TaskVector<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("DARE drop rate must lie in [0, 1), got {p}")));
    }
    if p == 0.0 {
        return Ok(tau.clone());
    }
    let mut r = rng::stream(seed, &[rng::TAG_DARE]);
    let keep = T::lit(1.0 / (1.0 - p));
    tau.map_values(|_, v| {
        v.iter()
            .map(|&x| if r.random_bool(p) { T::zero() } else { x * keep })
            .collect()
    })
}

/// `coeffs[task][layer]`, with layer `n_layers` covering the tensors outside
/// the blocks.
pub type LayerCoeffs = BTreeMap<usize, BTreeMap<usize, f64>>;

/// `θ_pre,ℓ + Σ_i λ_iℓ · τ_iℓ` for every layer slot `ℓ`.
pub fn merge_layerwise<T: Scalar>(
    pre: &Checkpoint<T>,
    taus: &[TaskVector<T>],
    coeffs: &LayerCoeffs,
) -> Result<Checkpoint<T>> {
    check_taus(pre, taus)?;
    let arch = *pre.arch();
    let mut table = vec![vec![T::zero(); arch.n_layers + 1]; taus.len()];
    for (task, row) in table.iter_mut().enumerate() {
        for (layer, c) in row.iter_mut().enumerate() {
            let v = coeffs
                .get(&task)
                .and_then(|m| m.get(&layer))
                .ok_or(Error::MissingCoefficient { task, layer })?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("coefficient task {task} layer {layer}")));
            }
            *c = T::lit(*v);
        }
    }
    add_to_pre(pre, format!("merge layerwise n={}", taus.len()), |name, i| {
        let layer = arch.layer_of(name);
        taus.iter()
            .zip(&table)
            .fold(T::zero(), |acc, (t, row)| acc + row[layer] * t.deltas[name].data()[i])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MergeMethod {
    Ta,
    Wa,
    Ties,
    Layerwise,
}

impl std::str::FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ta" => Ok(Self::Ta),
            "wa" => Ok(Self::Wa),
            "ties" => Ok(Self::Ties),
            "layerwise" => Ok(Self::Layerwise),
            _ => Err(Error::InvalidArgument(format!("unknown merge method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DareSpec {
    pub p: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub method: MergeMethod,
    pub lambda: f64,
    #[serde(default)]
    pub dare: Option<DareSpec>,
    #[serde(default = "MergeConfig::default_ties_k")]
    pub ties_k: f64,
    #[serde(default)]
    pub ties_trim: TiesTrim,
    #[serde(default)]
    pub layer_coeffs: Option<LayerCoeffs>,
}

impl MergeConfig {
    pub const DEFAULT_TIES_K: f64 = 0.2;

    fn default_ties_k() -> f64 {
        Self::DEFAULT_TIES_K
    }

    /// 0.8 when merging two models, 0.3 for three or more.
    pub fn default_lambda(n_models: usize) -> f64 {
        if n_models <= 2 {
            0.8
        } else {
            0.3
        }
    }

    pub fn new(method: MergeMethod, lambda: f64) -> Self {
        Self {
            method,
            lambda,
            dare: None,
            ties_k: Self::DEFAULT_TIES_K,
            ties_trim: TiesTrim::Global,
            layer_coeffs: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be finite, got {}", self.lambda)));
        }
        if let Some(d) = self.dare {
            if !(0.0..1.0).contains(&d.p) {
                return Err(Error::InvalidArgument(format!("DARE p must lie in [0, 1), got {}", d.p)));
            }
        }
        if !(self.ties_k > 0.0 && self.ties_k <= 1.0) {
            return Err(Error::InvalidArgument(format!("ties_k must lie in (0, 1], got {}", self.ties_k)));
        }
        if self.method == MergeMethod::Layerwise && self.layer_coeffs.is_none() {
            return Err(Error::InvalidArgument("layer-wise merging needs layer_coeffs".into()));
        }
        Ok(())
    }
}

/// Builds task vectors from `models`, applies DARE to each (task `i` uses the
/// stream seeded by `derive_seed(dare.seed, [i])`), then aggregates.
pub fn merge<T: Scalar>(pre: &Checkpoint<T>, models: &[Checkpoint<T>], cfg: &MergeConfig) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    let mut taus = models
        .iter()
        .map(|m| task_vector(m, pre))
        .collect::<Result<Vec<_>>>()?;
    if let Some(d) = cfg.dare {
        taus = taus
            .iter()
            .enumerate()
            .map(|(i, t)| dare_transform(t, d.p, rng::derive_seed(d.seed, &[i as u64])))
            .collect::<Result<_>>()?;
    }
    match cfg.method {
        MergeMethod::Ta => merge_ta(pre, &taus, cfg.lambda),
        MergeMethod::Wa => merge_wa(pre, &taus),
        MergeMethod::Ties => merge_ties_with(pre, &taus, cfg.ties_k, cfg.lambda, cfg.ties_trim),
        MergeMethod::Layerwise => merge_layerwise(pre, &taus, cfg.layer_coeffs.as_ref().expect("validated")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_checkpoint;

    fn scalar_arch() -> ToyArchSpec {
        ToyArchSpec {
            n_layers: 1,
            d_model: 2,
            d_hidden: 2,
            n_heads: 1,
            d_k: 2,
            n_classes: 2,
            seq_len: 1,
        }
    }

    fn with_head_b(v: [f64; 2]) -> Checkpoint<f64> {
        let mut c = Checkpoint::zeros(scalar_arch()).unwrap();
        c.set("head.b", Tensor::vector(v.to_vec()).unwrap()).unwrap();
        c
    }

    #[test]
    fn ta_arithmetic() {
        let pre = with_head_b([0.0, 0.0]);
        let t1 = task_vector(&with_head_b([1.0, 0.0]), &pre).unwrap();
        let t2 = task_vector(&with_head_b([0.0, 2.0]), &pre).unwrap();
        let m = merge_ta(&pre, &[t1, t2], 0.5).unwrap();
        assert_eq!(m.get("head.b").data(), &[0.5, 1.0]);
    }

    #[test]
    fn task_vector_difference() {
        let pre = with_head_b([1.0, 0.0]);
        let t = task_vector(&with_head_b([3.0, 0.0]), &pre).unwrap();
        assert_eq!(t.deltas["head.b"].data(), &[2.0, 0.0]);
        assert!(task_vector(&pre, &pre).unwrap().deltas.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn wa_average() {
        let pre = with_head_b([0.0, 0.0]);
        let t1 = task_vector(&with_head_b([2.0, 0.0]), &pre).unwrap();
        let t2 = task_vector(&with_head_b([0.0, 0.0]), &pre).unwrap();
        assert_eq!(merge_wa(&pre, &[t1, t2]).unwrap().get("head.b").data(), &[1.0, 0.0]);
        assert!(merge_wa(&pre, &[]).is_err());
    }

    #[test]
    fn dare_edges() {
        let arch = ToyArchSpec::TINY;
        let pre = init_checkpoint::<f64>(&arch, 1).unwrap();
        let tau = task_vector(&init_checkpoint(&arch, 2).unwrap(), &pre).unwrap();
        assert_eq!(dare_transform(&tau, 0.0, 3).unwrap(), tau);
        assert!(dare_transform(&tau, 1.0, 3).is_err());
        let d = dare_transform(&tau, 0.9, 3).unwrap();
        for (n, t) in &d.deltas {
            for (&x, &y) in t.data().iter().zip(tau.deltas[n].data()) {
                assert!(x == 0.0 || x == y * (1.0 / (1.0 - 0.9)));
            }
        }
        assert_eq!(d, dare_transform(&tau, 0.9, 3).unwrap());
    }

    #[test]
    fn layerwise_missing_and_zero() {
        let arch = ToyArchSpec::TINY;
        let pre = init_checkpoint::<f64>(&arch, 1).unwrap();
        let tau = task_vector(&init_checkpoint(&arch, 2).unwrap(), &pre).unwrap();
        let mut coeffs: LayerCoeffs = [(0, (0..=2).map(|l| (l, 0.0)).collect())].into();
        assert_eq!(
            merge_layerwise(&pre, std::slice::from_ref(&tau), &coeffs).unwrap().tensors(),
            pre.tensors()
        );
        coeffs.get_mut(&0).unwrap().remove(&2);
        assert!(matches!(
            merge_layerwise(&pre, &[tau], &coeffs),
            Err(Error::MissingCoefficient { task: 0, layer: 2 })
        ));
    }

    #[test]
    fn config_json_and_validation() {
        let json = r#"{"method":"TIES","lambda":0.3,"dare":{"p":0.5,"seed":1},"ties_k":0.2,
                       "layer_coeffs":{"0":{"0":0.1,"1":0.2}}}"#;
        let cfg: MergeConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.method, MergeMethod::Ties);
        assert_eq!(cfg.layer_coeffs.as_ref().unwrap()[&0][&1], 0.2);
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.ties_k = 0.0;
        assert!(bad.validate().is_err());
        bad = cfg.clone();
        bad.dare = Some(DareSpec { p: 1.0, seed: 0 });
        assert!(bad.validate().is_err());
        assert!(MergeConfig::new(MergeMethod::Layerwise, 1.0).validate().is_err());
        assert!("bogus".parse::<MergeMethod>().is_err());
        assert_eq!(MergeConfig::default_lambda(2), 0.8);
        assert_eq!(MergeConfig::default_lambda(3), 0.3);
    }
}
