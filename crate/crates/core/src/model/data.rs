//! Synthetic classification tasks: Gaussian clusters of token sequences.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::arch::ToyArchSpec;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// `[batch, seq_len, d_model]`
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        match inputs.shape() {
            [b, _, _] if *b == labels.len() => Ok(Self { inputs, labels }),
            s => Err(Error::Shape(format!(
                "batch inputs {s:?} with {} labels",
                labels.len()
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn per_sample(&self) -> usize {
        self.inputs.shape()[1] * self.inputs.shape()[2]
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let per = self.per_sample();
        &self.inputs.data()[i * per..(i + 1) * per]
    }

    /// Samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let s = self.inputs.shape();
        let data: Vec<T> = idx.iter().flat_map(|&i| self.sample(i).iter().copied()).collect();
        Self {
            inputs: Tensor::from_fn(&[idx.len(), s[1], s[2]], |i| data[i]),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn take(&self, n: usize) -> Self {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        let (a, b) = (self.inputs.shape(), other.inputs.shape());
        if a[1..] != b[1..] {
            return Err(Error::Shape(format!("concat {a:?} with {b:?}")));
        }
        let mut data = self.inputs.data().to_vec();
        data.extend_from_slice(other.inputs.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self::new(Tensor::new(vec![labels.len(), a[1], a[2]], data)?, labels)
    }
}

/// A task is fully determined by its seed; data is regenerated, never stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub seed: u64,
    pub n_classes: usize,
    /// Cluster separation; token noise has standard deviation `1 / difficulty`.
    pub difficulty: f64,
}

impl TaskSpec {
    pub fn new(seed: u64, n_classes: usize, difficulty: f64) -> Self {
        Self {
            seed,
            n_classes,
            difficulty,
        }
    }

    /// One unit-norm mean direction per class, `[n_classes][d_model]`.
    pub fn class_means(&self, d_model: usize) -> Vec<Vec<f64>> {
        let mut r = rng::stream(self.seed, &[rng::TAG_TASK_MEANS]);
        (0..self.n_classes)
            .map(|_| {
                let v: Vec<f64> = (0..d_model).map(|_| StandardNormal.sample(&mut r)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    }
}

/// Labels cycle through the classes, every token is `mean[label] + noise`,
/// the samples are shuffled by seed, and the first 80% become the train split.
pub fn generate_task<T: Scalar>(
    spec: &TaskSpec,
    arch: &ToyArchSpec,
    n_samples: usize,
) -> Result<(Batch<T>, Batch<T>)> {
    if spec.n_classes == 0 || spec.n_classes > arch.n_classes {
        return Err(Error::InvalidArgument(format!(
            "task has {} classes, architecture supports {}",
            spec.n_classes, arch.n_classes
        )));
    }
    if n_samples < 2 * spec.n_classes {
        return Err(Error::InvalidArgument(format!(
            "need at least {} samples, got {n_samples}",
            2 * spec.n_classes
        )));
    }
    if !(spec.difficulty > 0.0 && spec.difficulty.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "difficulty must be positive, got {}",
            spec.difficulty
        )));
    }
    let (s, d) = (arch.seq_len, arch.d_model);
    let means = spec.class_means(d);
    let noise = 1.0 / spec.difficulty;
    let mut r = rng::stream(spec.seed, &[rng::TAG_TASK_SAMPLES]);
    let mut labels: Vec<usize> = (0..n_samples).map(|i| i % spec.n_classes).collect();
    labels.shuffle(&mut r);
    let mut data = Vec::with_capacity(n_samples * s * d);
    for &l in &labels {
        for _ in 0..s {
            for &m in &means[l] {
                let e: f64 = StandardNormal.sample(&mut r);
                data.push(T::lit(m + noise * e));
            }
        }
    }
    let all = Batch::new(Tensor::new(vec![n_samples, s, d], data)?, labels)?;
    let n_train = n_samples - n_samples / 5;
    let train = all.subset(&(0..n_train).collect::<Vec<_>>());
    let test = all.subset(&(n_train..n_samples).collect::<Vec<_>>());
    Ok((train, test))
}
