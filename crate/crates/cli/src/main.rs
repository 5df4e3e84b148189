mod commands;
mod manifest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Serialize;

use commands::*;
use manifest::{digests, file_digest, sha256_hex, RunManifest, MANIFEST_VERSION};

/// Protect toy-transformer checkpoints against model merging, and run the
/// merges, attacks and diagnostics around that.
#[derive(Parser, Debug)]
#[command(name = "mergeguard", version)]
struct Cli {
    /// Where to write the run manifest. Defaults to `<first output>.manifest.json`,
    /// or `<command>.manifest.json` for report-only commands.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a freshly initialized checkpoint.
    GenToy(GenToyArgs),
    /// Train a shared base model on a mixture of tasks.
    Pretrain(PretrainArgs),
    /// Train a copy of a base model on one task; prints `accuracy=`.
    Finetune(FinetuneArgs),
    /// Rewrite a finetuned model so it no longer merges with its siblings.
    Protect(ProtectArgs),
    /// Merge finetuned models that share a pretrained checkpoint.
    Merge(MergeArgs),
    /// Undo permutation and scaling using the pretrained weights; prints a JSON report.
    AttackRecover(AttackRecoverArgs),
    /// Compare two models' logits on a task's test split; prints JSON.
    VerifyEquiv(VerifyEquivArgs),
    /// Layer-wise activation similarity of a two-model merge; prints JSON.
    Similarity(SimilarityArgs),
    /// Test-split accuracy of a model; prints `accuracy=`.
    Eval(EvalArgs),
    /// Re-run a recorded command and check that it reproduces the same bytes.
    Replay(ReplayArgs),
}

#[derive(clap::Args, Debug)]
struct ReplayArgs {
    manifest_path: PathBuf,
    /// Write the replayed outputs here instead of over the originals.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<mergeguard::Error> for CliError {
    fn from(e: mergeguard::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

fn default_manifest_path(name: &str, outputs: &[PathBuf]) -> PathBuf {
    match outputs.first() {
        Some(p) => {
            let mut s = p.clone().into_os_string();
            s.push(".manifest.json");
            s.into()
        }
        None => PathBuf::from(format!("{name}.manifest.json")),
    }
}

fn print_stdout(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes()).context("writing stdout")?;
    out.flush().context("writing stdout")?;
    Ok(())
}

fn run<R: Runnable>(mut args: R, manifest_path: Option<PathBuf>) -> Result<(), CliError> {
    let seeds = args.resolve_seeds()?;
    let input_digests = digests(&args.inputs())?;
    let stdout = args.execute()?;
    print_stdout(&stdout)?;
    let output_paths = args.outputs();
    let manifest = RunManifest {
        version: MANIFEST_VERSION,
        command: R::NAME.to_string(),
        args: serde_json::to_value(&args).context("serializing arguments")?,
        seeds,
        input_digests,
        output_digests: digests(&output_paths)?,
        output_paths: output_paths.clone(),
        stdout_digest: sha256_hex(stdout.as_bytes()),
    };
    let path = manifest_path.unwrap_or_else(|| default_manifest_path(R::NAME, &output_paths));
    manifest.write(&path)?;
    log(format!("manifest {}", path.display()));
    Ok(())
}

#[derive(Serialize)]
struct ReplayReport {
    command: String,
    identical: bool,
    outputs: Vec<ReplayedOutput>,
    stdout_identical: bool,
}

#[derive(Serialize)]
struct ReplayedOutput {
    recorded: PathBuf,
    replayed: PathBuf,
    identical: bool,
}

fn replay_as<R: Runnable + serde::de::DeserializeOwned>(
    m: &RunManifest,
    out_dir: Option<&Path>,
) -> Result<ReplayReport, CliError> {
    let mut args: R = serde_json::from_value(m.args.clone()).context("manifest arguments do not match the command")?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut seen = std::collections::BTreeSet::new();
        for p in args.outputs_mut() {
            let name = p
                .file_name()
                .ok_or_else(|| anyhow::anyhow!("output {} has no file name", p.display()))?
                .to_owned();
            if !seen.insert(name.clone()) {
                return Err(anyhow::anyhow!("two outputs share the file name {name:?}").into());
            }
            *p = dir.join(name);
        }
    }
    let stdout = args.execute()?;
    let replayed = args.outputs();
    if replayed.len() != m.output_paths.len() {
        return Err(anyhow::anyhow!("manifest lists {} outputs, replay produced {}", m.output_paths.len(), replayed.len()).into());
    }
    let outputs = m
        .output_paths
        .iter()
        .zip(replayed)
        .map(|(rec, rep)| {
            let want = m.output_digests.get(&rec.display().to_string());
            Ok(ReplayedOutput {
                identical: want == Some(&file_digest(&rep)?),
                recorded: rec.clone(),
                replayed: rep,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let stdout_identical = sha256_hex(stdout.as_bytes()) == m.stdout_digest;
    Ok(ReplayReport {
        command: m.command.clone(),
        identical: stdout_identical && outputs.iter().all(|o| o.identical),
        outputs,
        stdout_identical,
    })
}

fn replay(args: ReplayArgs) -> Result<(), CliError> {
    let m = RunManifest::read(&args.manifest_path)?;
    let mut changed = Vec::new();
    for (path, digest) in &m.input_digests {
        if file_digest(Path::new(path))? != *digest {
            changed.push(path.as_str());
        }
    }
    if !changed.is_empty() {
        return Err(anyhow::anyhow!("inputs changed since the recorded run: {}", changed.join(", ")).into());
    }
    let dir = args.out_dir.as_deref();
    let report = match m.command.as_str() {
        GenToyArgs::NAME => replay_as::<GenToyArgs>(&m, dir),
        PretrainArgs::NAME => replay_as::<PretrainArgs>(&m, dir),
        FinetuneArgs::NAME => replay_as::<FinetuneArgs>(&m, dir),
        ProtectArgs::NAME => replay_as::<ProtectArgs>(&m, dir),
        MergeArgs::NAME => replay_as::<MergeArgs>(&m, dir),
        AttackRecoverArgs::NAME => replay_as::<AttackRecoverArgs>(&m, dir),
        VerifyEquivArgs::NAME => replay_as::<VerifyEquivArgs>(&m, dir),
        SimilarityArgs::NAME => replay_as::<SimilarityArgs>(&m, dir),
        EvalArgs::NAME => replay_as::<EvalArgs>(&m, dir),
        other => Err(anyhow::anyhow!("manifest records unknown command {other:?}").into()),
    }?;
    let mut text = serde_json::to_string_pretty(&report).context("serializing replay report")?;
    text.push('\n');
    print_stdout(&text)?;
    if report.identical {
        Ok(())
    } else {
        Err(anyhow::anyhow!("replay of {} did not reproduce the recorded outputs", report.command).into())
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let m = cli.manifest;
    match cli.command {
        Command::GenToy(a) => run(a, m),
        Command::Pretrain(a) => run(a, m),
        Command::Finetune(a) => run(a, m),
        Command::Protect(a) => run(a, m),
        Command::Merge(a) => run(a, m),
        Command::AttackRecover(a) => run(a, m),
        Command::VerifyEquiv(a) => run(a, m),
        Command::Similarity(a) => run(a, m),
        Command::Eval(a) => run(a, m),
        Command::Replay(a) => replay(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
