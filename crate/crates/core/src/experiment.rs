//! The shared-pretrain workflow used by the end-to-end checks and the CLI:
//! pretrain one model on an even mixture of two tasks, then finetune a
//! defender copy on the first task and a free-rider copy on the second.

use serde::{Deserialize, Serialize};

use crate::arch::ToyArchSpec;
use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::model::{evaluate, generate_task, init_checkpoint, train_on, Batch, TaskSpec, TrainConfig};
use crate::rng::derive_seed;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub arch: ToyArchSpec,
    pub difficulty: f64,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub init_seed: u64,
    pub def_task_seed: u64,
    pub fr_task_seed: u64,
}

impl ExperimentConfig {
    /// All seeds derived from one master seed; the two task seeds differ.
    pub fn from_master(arch: ToyArchSpec, master: u64) -> Self {
        let pretrain = TrainConfig {
            epochs: 20,
            lr: 0.05,
            batch_size: 16,
            n_samples: 600,
            seed: derive_seed(master, &[0x70]),
        };
        let finetune = TrainConfig {
            epochs: 10,
            seed: derive_seed(master, &[0x71]),
            ..pretrain
        };
        Self {
            arch,
            difficulty: 2.0,
            pretrain,
            finetune,
            init_seed: derive_seed(master, &[0x72]),
            def_task_seed: derive_seed(master, &[0x73]),
            fr_task_seed: derive_seed(master, &[0x74]),
        }
    }

    pub fn def_task(&self) -> TaskSpec {
        TaskSpec::new(self.def_task_seed, self.arch.n_classes, self.difficulty)
    }

    pub fn fr_task(&self) -> TaskSpec {
        TaskSpec::new(self.fr_task_seed, self.arch.n_classes, self.difficulty)
    }
}

#[derive(Debug, Clone)]
pub struct Split<T> {
    pub train: Batch<T>,
    pub test: Batch<T>,
}

impl<T: Scalar> Split<T> {
    pub fn generate(task: &TaskSpec, arch: &ToyArchSpec, n_samples: usize) -> Result<Self> {
        let (train, test) = generate_task(task, arch, n_samples)?;
        Ok(Self { train, test })
    }
}

#[derive(Debug, Clone)]
pub struct TrainedTrio<T> {
    pub pre: Checkpoint<T>,
    pub def: Checkpoint<T>,
    pub fr: Checkpoint<T>,
    pub def_data: Split<T>,
    pub fr_data: Split<T>,
}

impl<T: Scalar> TrainedTrio<T> {
    pub fn def_accuracy(&self, ckpt: &Checkpoint<T>) -> Result<f64> {
        evaluate(ckpt, &self.def_data.test)
    }

    pub fn fr_accuracy(&self, ckpt: &Checkpoint<T>) -> Result<f64> {
        evaluate(ckpt, &self.fr_data.test)
    }
}

/// SGD on the concatenated train splits of `tasks`, each generated with
/// `cfg.n_samples` samples.
pub fn pretrain_mixture<T: Scalar>(
    init: &Checkpoint<T>,
    tasks: &[TaskSpec],
    cfg: &TrainConfig,
) -> Result<Checkpoint<T>> {
    let mut data: Option<Batch<T>> = None;
    for t in tasks {
        let (train, _) = generate_task(t, init.arch(), cfg.n_samples)?;
        data = Some(match data {
            Some(d) => d.concat(&train)?,
            None => train,
        });
    }
    let data = data.ok_or_else(|| crate::error::Error::InvalidArgument("no pretraining tasks".into()))?;
    train_on(init, &data, cfg)
}

pub fn run_trio<T: Scalar>(cfg: &ExperimentConfig) -> Result<TrainedTrio<T>> {
    let (dt, ft) = (cfg.def_task(), cfg.fr_task());
    let init = init_checkpoint::<T>(&cfg.arch, cfg.init_seed)?;
    let pre = pretrain_mixture(&init, &[dt, ft], &cfg.pretrain)?;
    let def_data = Split::generate(&dt, &cfg.arch, cfg.finetune.n_samples)?;
    let fr_data = Split::generate(&ft, &cfg.arch, cfg.finetune.n_samples)?;
    let def = train_on(&pre, &def_data.train, &cfg.finetune)?;
    let fr = train_on(&pre, &fr_data.train, &cfg.finetune)?;
    Ok(TrainedTrio {
        pre,
        def,
        fr,
        def_data,
        fr_data,
    })
}
