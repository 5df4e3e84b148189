use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{generate_task, loss_and_grads, Batch, TaskSpec};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Plain minibatch SGD settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Samples generated per task (train split is 80% of these).
    pub n_samples: usize,
    /// Drives the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            batch_size: 16,
            n_samples: 1000,
            seed: 0,
        }
    }
}

/// Train on the train split of a generated task.
pub fn train<T: Scalar>(
    init: &Checkpoint<T>,
    task: &TaskSpec,
    cfg: &TrainConfig,
) -> Result<Checkpoint<T>> {
    let (data, _) = generate_task(task, init.arch(), cfg.n_samples)?;
    train_on(init, &data, cfg)
}

/// SGD over `data`, reshuffled every epoch from `cfg.seed`. Sequential and
/// bit-reproducible.
pub fn train_on<T: Scalar>(
    init: &Checkpoint<T>,
    data: &Batch<T>,
    cfg: &TrainConfig,
) -> Result<Checkpoint<T>> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {}", cfg.lr)));
    }
    let mut ckpt = init.clone();
    if cfg.epochs == 0 {
        return Ok(ckpt);
    }
    let lr = T::lit(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::TAG_SHUFFLE, epoch as u64]));
        for idx in order.chunks(cfg.batch_size) {
            let batch = data.subset(idx);
            let (_, grads) = loss_and_grads(&ckpt, &batch).map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence { epoch },
                other => other,
            })?;
            ckpt = ckpt
                .try_map(|name, t| {
                    let g = grads.get(name).data();
                    let mut t = t.clone();
                    for (w, &gw) in t.data_mut().iter_mut().zip(g) {
                        *w = *w - lr * gw;
                    }
                    Ok(t)
                })
                .map_err(|_| Error::Divergence { epoch })?;
        }
    }
    ckpt.provenance = format!(
        "{} | sgd epochs={} lr={} batch={} seed={}",
        init.provenance, cfg.epochs, cfg.lr, cfg.batch_size, cfg.seed
    );
    Ok(ckpt)
}
