//! One argument struct per subcommand. Each struct is also the manifest's
//! `args` payload, so every field that affects the output must live here.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};

use mergeguard::analysis::{layer_similarity, SimilarityReport};
use mergeguard::arch::ToyArchSpec;
use mergeguard::attack::adaptive_recover;
use mergeguard::checkpoint::Checkpoint;
use mergeguard::defense::{apply_plan, protect, DropoutSpec, ProtectionPlan, ScaleRange};
use mergeguard::experiment::pretrain_mixture;
use mergeguard::merging::{merge, DareSpec, LayerCoeffs, MergeConfig, MergeMethod, TiesTrim};
use mergeguard::model::{evaluate, forward, generate_task, init_checkpoint, train_on, Batch, TaskSpec, TrainConfig};
use mergeguard::pmck::{load_checkpoint_as, save_checkpoint};
use mergeguard::rng::derive_seed;

use crate::CliError;

pub const SEED_ENV: &str = "PARAMS_SEED";
pub const EQUIV_TOLERANCE: f64 = 1e-9;

/// Explicit flag, then `PARAMS_SEED`, then 0.
pub fn resolve_seed(flag: &mut Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = *flag {
        return Ok(s);
    }
    let seed = match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
        Err(_) => {
            log(format!("no --seed and no {SEED_ENV}; using seed 0"));
            0
        }
    };
    *flag = Some(seed);
    Ok(seed)
}

pub fn log(msg: impl AsRef<str>) {
    eprintln!("[mergeguard] {}", msg.as_ref());
}

/// What a subcommand needs to be run, recorded and replayed.
pub trait Runnable: Serialize + Clone {
    const NAME: &'static str;

    /// Fill every optional seed and return them by name.
    fn resolve_seeds(&mut self) -> Result<BTreeMap<String, u64>, CliError>;

    fn inputs(&self) -> Vec<PathBuf>;

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf>;

    /// Runs the command and returns what it prints on stdout.
    fn execute(&self) -> Result<String, CliError>;

    fn outputs(&self) -> Vec<PathBuf> {
        let mut c = self.clone();
        c.outputs_mut().into_iter().map(|p| p.clone()).collect()
    }
}

fn arch_of(name: &str) -> Result<ToyArchSpec, CliError> {
    ToyArchSpec::preset(name).ok_or_else(|| CliError::Usage(format!("unknown architecture {name:?}")))
}

fn load(path: &Path) -> Result<Checkpoint<f64>, CliError> {
    load_checkpoint_as::<f64>(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(CliError::Runtime)
}

fn save(ckpt: &Checkpoint<f64>, path: &Path) -> Result<(), CliError> {
    save_checkpoint(ckpt, path)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::Runtime)?;
    log(format!("wrote {}", path.display()));
    Ok(())
}

fn test_split(arch: &ToyArchSpec, task_seed: u64, difficulty: f64, n_samples: usize) -> Result<Batch<f64>, CliError> {
    let task = TaskSpec::new(task_seed, arch.n_classes, difficulty);
    Ok(generate_task::<f64>(&task, arch, n_samples)?.1)
}

fn json_line<S: Serialize>(v: &S) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(anyhow::Error::from)?;
    s.push('\n');
    Ok(s)
}

fn check_positive(what: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} must be positive, got {v}")))
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Samples generated per task; 80% train, 20% test.
    #[arg(long, default_value_t = 600)]
    pub n_samples: usize,
    /// Class separation of the synthetic tasks.
    #[arg(long, default_value_t = 2.0)]
    pub difficulty: f64,
}

impl TrainFlags {
    fn config(&self, default_epochs: usize, seed: u64) -> Result<TrainConfig, CliError> {
        check_positive("--lr", self.lr)?;
        check_positive("--difficulty", self.difficulty)?;
        if self.batch_size == 0 {
            return Err(CliError::Usage("--batch-size must be at least 1".into()));
        }
        Ok(TrainConfig {
            epochs: self.epochs.unwrap_or(default_epochs),
            lr: self.lr,
            batch_size: self.batch_size,
            n_samples: self.n_samples,
            seed,
        })
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenToyArgs {
    #[arg(long, default_value = "tiny", value_parser = ["tiny", "toy"])]
    pub arch: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "init.pmck")]
    pub out: PathBuf,
}

impl Runnable for GenToyArgs {
    const NAME: &'static str = "gen-toy";

    fn resolve_seeds(&mut self) -> Result<BTreeMap<String, u64>, CliError> {
        Ok(BTreeMap::from([("seed".into(), resolve_seed(&mut self.seed)?)]))
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![]
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.out]
    }

    fn execute(&self) -> Result<String, CliError> {
        let arch = arch_of(&self.arch)?;
        let ckpt = init_checkpoint::<f64>(&arch, self.seed.unwrap_or_default())?;
        save(&ckpt, &self.out)?;
        Ok(String::new())
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct PretrainArgs {
    #[arg(long, default_value = "tiny", value_parser = ["tiny", "toy"])]
    pub arch: String,
    /// Drives initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Tasks mixed evenly into the pretraining set.
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    pub task_seeds: Vec<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, default_value = "pre.pmck")]
    pub out: PathBuf,
}

impl Runnable for PretrainArgs {
    const NAME: &'static str = "pretrain";

    fn resolve_seeds(&mut self) -> Result<BTreeMap<String, u64>, CliError> {
        let mut seeds = BTreeMap::from([("seed".to_string(), resolve_seed(&mut self.seed)?)]);
        for (i, &t) in self.task_seeds.iter().enumerate() {
            seeds.insert(format!("task_seed.{i}"), t);
        }
        Ok(seeds)
    }

    fn inputs(&self) -> Vec<PathBuf> {
        self.init.iter().cloned().collect()
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.out]
    }

    fn execute(&self) -> Result<String, CliError> {
        let arch = arch_of(&self.arch)?;
        let seed = self.seed.unwrap_or_default();
        if self.task_seeds.is_empty() {
            return Err(CliError::Usage("--task-seeds must name at least one task".into()));
        }
        let cfg = self.train.config(20, derive_seed(seed, &[0x70]))?;
        let init = match &self.init {
            Some(p) => {
                let c = load(p)?;
                if *c.arch() != arch {
                    return Err(CliError::Runtime(anyhow::anyhow!(
                        "{} does not have the {} architecture",
                        p.display(),
                        self.arch
                    )));
                }
                c
            }
            None => init_checkpoint::<f64>(&arch, derive_seed(seed, &[0x72]))?,
        };
        let tasks: Vec<TaskSpec> = self
            .task_seeds
            .iter()
            .map(|&s| TaskSpec::new(s, arch.n_classes, self.train.difficulty))
            .collect();
        log(format!("pretraining on {} tasks for {} epochs", tasks.len(), cfg.epochs));
        let pre = pretrain_mixture(&init, &tasks, &cfg)?;
        for t in &tasks {
            let acc = evaluate(&pre, &generate_task::<f64>(t, &arch, cfg.n_samples)?.1)?;
            log(format!("task {} accuracy {acc}", t.seed));
        }
        save(&pre, &self.out)?;
        Ok(String::new())
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub task_seed: u64,
    /// Drives shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, default_value = "finetuned.pmck")]
    pub out: PathBuf,
}

impl Runnable for FinetuneArgs {
    const NAME: &'static str = "finetune";

    fn resolve_seeds(&mut self) -> Result<BTreeMap<String, u64>, CliError> {
        Ok(BTreeMap::from([
            ("seed".into(), resolve_seed(&mut self.seed)?),
            ("task_seed".into(), self.task_seed),
        ]))
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.init.clone()]
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.out]
    }

    fn execute(&self) -> Result<String, CliError> {
        let cfg = self.train.config(10, derive_seed(self.seed.unwrap_or_default(), &[0x71]))?;
        let init = load(&self.init)?;
        let task = TaskSpec::new(self.task_seed, init.arch().n_classes, self.train.difficulty);
        let (train, test) = generate_task::<f64>(&task, init.arch(), cfg.n_samples)?;
        log(format!("finetuning on task {} for {} epochs", self.task_seed, cfg.epochs));
        let ft = train_on(&init, &train, &cfg)?;
        let acc = evaluate(&ft, &test)?;
        save(&ft, &self.out)?;
        Ok(format!("accuracy={acc}\n"))
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ProtectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, required_unless_present = "apply_plan")]
    pub pretrained: Option<PathBuf>,
    #[arg(long, default_value_t = ScaleRange::DEFAULT.min)]
    pub s_min: f64,
    #[arg(long, default_value_t = ScaleRange::DEFAULT.max)]
    pub s_max: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of weight-matrix entries to zero after the rewrite.
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    #[arg(long, default_value = "protected.pmck")]
    pub out: PathBuf,
    #[arg(long)]
    pub plan_out: Option<PathBuf>,
    /// Replay a saved plan instead of computing one.
    #[arg(long, conflicts_with_all = ["pretrained", "plan_out"])]
    pub apply_plan: Option<PathBuf>,
}

impl Runnable for ProtectArgs {
    const NAME: &'static str = "protect";

    fn resolve_seeds(&mut self) -> Result<BTreeMap<String, u64>, CliError> {
        if self.apply_plan.is_some() {
            return Ok(BTreeMap::new());
        }
        Ok(BTreeMap::from([("seed".into(), resolve_seed(&mut self.seed)?)]))
    }

    fn inputs(&self) -> Vec<PathBuf> {
        [Some(&self.model), self.pretrained.as_ref(), self.apply_plan.as_ref()]
            .into_iter()
            .flatten()
            .cloned()
            .collect()
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut v = vec![&mut self.out];
        v.extend(self.plan_out.as_mut());
        v
    }

    fn execute(&self) -> Result<String, CliError> {
        if let Some(plan_path) = &self.apply_plan {
            let text = fs::read_to_string(plan_path)
                .with_context(|| format!("reading {}", plan_path.display()))
                .map_err(CliError::Runtime)?;
            let plan = ProtectionPlan::from_json(&text)?;
            let model = load(&self.model)?;
            let out = apply_plan(&model, &plan)?;
            save(&out, &self.out)?;
            return Ok(String::new());
        }
        let range = ScaleRange::new(self.s_min, self.s_max).map_err(|e| CliError::Usage(e.to_string()))?;
        let seed = self.seed.unwrap_or_default();
        let dropout = match self.dropout_rate {
            Some(rate) if (0.0..=1.0).contains(&rate) => Some(DropoutSpec { rate, seed }),
            Some(rate) => return Err(CliError::Usage(format!("--dropout-rate must lie in [0, 1], got {rate}"))),
            None => None,
        };
        let pre_path = self
            .pretrained
            .as_ref()
            .ok_or_else(|| CliError::Usage("--pretrained is required".into()))?;
        let (model, pre) = (load(&self.model)?, load(pre_path)?);
        let (out, plan) = protect(&model, &pre, range, seed, dropout)?;
        save(&out, &self.out)?;
        if let Some(p) = &self.plan_out {
            fs::write(p, plan.to_json()? + "\n")
                .with_context(|| format!("writing {}", p.display()))
                .map_err(CliError::Runtime)?;
            log(format!("wrote {}", p.display()));
        }
        Ok(String::new())
    }
}

fn parse_method(s: &str) -> Result<MergeMethod, String> {
    s.parse().map_err(|_| format!("expected one of ta, wa, ties, layerwise; got {s:?}"))
}

fn parse_trim(s: &str) -> Result<TiesTrim, String> {
    match s {
        "global" => Ok(TiesTrim::Global),
        "per-tensor" => Ok(TiesTrim::PerTensor),
        _ => Err(format!("expected global or per-tensor; got {s:?}")),
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct MergeArgs {
    #[arg(long, value_parser = parse_method)]
    pub method: MergeMethod,
    /// Defaults to 0.8 for two models or fewer, 0.3 otherwise.
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// Apply DARE with this drop rate before merging.
    #[arg(long)]
    pub dare_p: Option<f64>,
    /// Seeds the DARE masks.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = MergeConfig::DEFAULT_TIES_K)]
    pub ties_k: f64,
    #[arg(long, default_value = "global", value_parser = parse_trim)]
    pub ties_trim: TiesTrim,
    /// JSON table `{task: {layer: coefficient}}` for layer-wise merging.
    #[arg(long)]
    pub coeffs: Option<PathBuf>,
    #[arg(long)]
    pub pretrained: PathBuf,
    #[arg(required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long, default_value = "merged.pmck")]
    pub out: PathBuf,
}

impl Runnable for MergeArgs {
    const NAME: &'static str = "merge";

    fn resolve_seeds(&mut self) -> Result<BTreeMap<String, u64>, CliError> {
        if self.dare_p.is_none() {
            return Ok(BTreeMap::new());
        }
        Ok(BTreeMap::from([("seed".into(), resolve_seed(&mut self.seed)?)]))
    }

    fn inputs(&self) -> Vec<PathBuf> {
        let mut v = vec![self.pretrained.clone()];
        v.extend(self.models.iter().cloned());
        v.extend(self.coeffs.iter().cloned());
        v
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.out]
    }

    fn execute(&self) -> Result<String, CliError> {
        let layer_coeffs: Option<LayerCoeffs> = match &self.coeffs {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))
                    .map_err(CliError::Runtime)?;
                Some(
                    serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", p.display()))
                        .map_err(CliError::Runtime)?,
                )
            }
            None => None,
        };
        let cfg = MergeConfig {
            method: self.method,
            lambda: self.lambda.unwrap_or(MergeConfig::default_lambda(self.models.len())),
            dare: self.dare_p.map(|p| DareSpec {
                p,
                seed: self.seed.unwrap_or_default(),
            }),
            ties_k: self.ties_k,
            ties_trim: self.ties_trim,
            layer_coeffs,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let pre = load(&self.pretrained)?;
        let models = self.models.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
        log(format!("merging {} models with {:?}, lambda {}", models.len(), cfg.method, cfg.lambda));
        let merged = merge(&pre, &models, &cfg)?;
        save(&merged, &self.out)?;
        Ok(String::new())
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AttackRecoverArgs {
    #[arg(long)]
    pub protected: PathBuf,
    #[arg(long)]
    pub pretrained: PathBuf,
    #[arg(long, default_value = "recovered.pmck")]
    pub out: PathBuf,
}

impl Runnable for AttackRecoverArgs {
    const NAME: &'static str = "attack-recover";

    fn resolve_seeds(&mut self) -> Result<BTreeMap<String, u64>, CliError> {
        Ok(BTreeMap::new())
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.protected.clone(), self.pretrained.clone()]
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.out]
    }

    fn execute(&self) -> Result<String, CliError> {
        let report = adaptive_recover(&load(&self.protected)?, &load(&self.pretrained)?)?;
        save(report.recovered(), &self.out)?;
        Ok(report.to_json()? + "\n")
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalFlags {
    #[arg(long)]
    pub task_seed: u64,
    #[arg(long, default_value_t = 2.0)]
    pub difficulty: f64,
    /// Samples generated; the 20% test split is used.
    #[arg(long, default_value_t = 600)]
    pub n_samples: usize,
}

impl EvalFlags {
    fn batch(&self, arch: &ToyArchSpec) -> Result<Batch<f64>, CliError> {
        check_positive("--difficulty", self.difficulty)?;
        test_split(arch, self.task_seed, self.difficulty, self.n_samples)
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct VerifyEquivArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[command(flatten)]
    pub data: EvalFlags,
}

#[derive(Serialize)]
struct EquivReport {
    max_abs_logit_diff: f64,
    equal_within: f64,
    equivalent: bool,
}

impl Runnable for VerifyEquivArgs {
    const NAME: &'static str = "verify-equiv";

    fn resolve_seeds(&mut self) -> Result<BTreeMap<String, u64>, CliError> {
        Ok(BTreeMap::from([("task_seed".into(), self.data.task_seed)]))
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.a.clone(), self.b.clone()]
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![]
    }

    fn execute(&self) -> Result<String, CliError> {
        let (a, b) = (load(&self.a)?, load(&self.b)?);
        a.require_same_arch(&b)?;
        let batch = self.data.batch(a.arch())?;
        let (la, _) = forward(&a, &batch, false)?;
        let (lb, _) = forward(&b, &batch, false)?;
        let diff = la.max_abs_diff(&lb)?;
        json_line(&EquivReport {
            max_abs_logit_diff: diff,
            equal_within: EQUIV_TOLERANCE,
            equivalent: diff <= EQUIV_TOLERANCE,
        })
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityArgs {
    #[arg(long)]
    pub pretrained: PathBuf,
    /// The defender's model; its task supplies the inputs.
    #[arg(long)]
    pub def: PathBuf,
    #[arg(long)]
    pub fr: PathBuf,
    #[command(flatten)]
    pub data: EvalFlags,
}

#[derive(Serialize)]
struct SimilarityOutput {
    inputs: String,
    #[serde(flatten)]
    report: SimilarityReport,
    mean: f64,
}

impl Runnable for SimilarityArgs {
    const NAME: &'static str = "similarity";

    fn resolve_seeds(&mut self) -> Result<BTreeMap<String, u64>, CliError> {
        Ok(BTreeMap::from([("task_seed".into(), self.data.task_seed)]))
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.pretrained.clone(), self.def.clone(), self.fr.clone()]
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![]
    }

    fn execute(&self) -> Result<String, CliError> {
        let (pre, def, fr) = (load(&self.pretrained)?, load(&self.def)?, load(&self.fr)?);
        let batch = self.data.batch(pre.arch())?;
        let report = layer_similarity(&pre, &def, &fr, &batch)?;
        json_line(&SimilarityOutput {
            inputs: format!(
                "test split of task {} (difficulty {}, {} samples); per-sample cosine at block outputs, batch mean",
                self.data.task_seed, self.data.difficulty, report.batch_size
            ),
            mean: report.mean(),
            report,
        })
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    pub model: PathBuf,
    #[command(flatten)]
    pub data: EvalFlags,
}

impl Runnable for EvalArgs {
    const NAME: &'static str = "eval";

    fn resolve_seeds(&mut self) -> Result<BTreeMap<String, u64>, CliError> {
        Ok(BTreeMap::from([("task_seed".into(), self.data.task_seed)]))
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.model.clone()]
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![]
    }

    fn execute(&self) -> Result<String, CliError> {
        let model = load(&self.model)?;
        let acc = evaluate(&model, &self.data.batch(model.arch())?)?;
        Ok(format!("accuracy={acc}\n"))
    }
}
