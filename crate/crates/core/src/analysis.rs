//! Diagnostics: activation similarity of a merged model and parameter distances.

use serde::{Deserialize, Serialize};

use crate::arch::Scope;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::merging::{merge_ta, task_vector};
use crate::model::{forward, Batch};
use crate::scalar::Scalar;
use crate::tensor::dot;

pub const SIMILARITY_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub lambda: f64,
    pub per_layer: Vec<f64>,
    pub batch_size: usize,
    pub zero_norm_samples: usize,
}

impl SimilarityReport {
    pub fn mean(&self) -> f64 {
        self.per_layer.iter().sum::<f64>() / self.per_layer.len() as f64
    }
}

/// For each block output, the cosine between the activation of the
/// `λ = 0.5` task-arithmetic merge and the midpoint of the two endpoint
/// activations, computed per sample and averaged over the batch. A sample
/// whose vectors have zero norm contributes 0 and is counted.
pub fn layer_similarity<T: Scalar>(
    pre: &Checkpoint<T>,
    def: &Checkpoint<T>,
    fr: &Checkpoint<T>,
    batch: &Batch<T>,
) -> Result<SimilarityReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("similarity needs a non-empty batch".into()));
    }
    let taus = [task_vector(def, pre)?, task_vector(fr, pre)?];
    let merged = merge_ta(pre, &taus, SIMILARITY_LAMBDA)?;
    let trace = |c: &Checkpoint<T>| forward(c, batch, true).map(|(_, t)| t.expect("captured"));
    let (tm, td, tf) = (trace(&merged)?, trace(def)?, trace(fr)?);

    let n = batch.len();
    let mut zero = 0;
    let per_layer = (0..def.arch().n_layers)
        .map(|l| {
            let (m, a, b) = (&tm.per_layer[l], &td.per_layer[l], &tf.per_layer[l]);
            let per = m.numel() / n;
            let mut total = 0.0;
            for s in 0..n {
                let r = s * per..(s + 1) * per;
                let mv: Vec<f64> = m.data()[r.clone()].iter().map(|v| v.as_f64()).collect();
                let mid: Vec<f64> = a.data()[r.clone()]
                    .iter()
                    .zip(&b.data()[r])
                    .map(|(x, y)| 0.5 * x.as_f64() + 0.5 * y.as_f64())
                    .collect();
                let denom = (dot(&mv, &mv) * dot(&mid, &mid)).sqrt();
                if denom == 0.0 {
                    zero += 1;
                } else {
                    total += (dot(&mv, &mid) / denom).clamp(-1.0, 1.0);
                }
            }
            total / n as f64
        })
        .collect();
    Ok(SimilarityReport {
        lambda: SIMILARITY_LAMBDA,
        per_layer,
        batch_size: n,
        zero_norm_samples: zero,
    })
}

/// Euclidean norm of the difference over the tensors in `scope`.
pub fn param_distance<T: Scalar>(a: &Checkpoint<T>, b: &Checkpoint<T>, scope: Scope) -> Result<f64> {
    a.require_same_arch(b)?;
    let mut acc = 0.0;
    for (name, t) in a.tensors().iter().filter(|(n, _)| scope.contains(n)) {
        for (&x, &y) in t.data().iter().zip(b.get(name).data()) {
            let e = x.as_f64() - y.as_f64();
            acc += e * e;
        }
    }
    Ok(acc.sqrt())
}
