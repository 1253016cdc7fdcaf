use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "pco", version, about = "Pronunciation scoring with the phonemic contrast ordinal loss")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic GOP-feature dataset.
    Gen(GenArgs),
    /// Train one model per seed and report held-out metrics.
    Train(TrainArgs),
    /// Train across values of one loss weight.
    Sweep(SweepArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Dump pre-head phone embeddings as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 10)]
    pub phonemes: usize,
    #[arg(long, default_value_t = 500)]
    pub utterances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3.0)]
    pub center_scale: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = 5)]
    pub min_phones: usize,
    #[arg(long, default_value_t = 15)]
    pub max_phones: usize,
    /// Also generate this many utterances from the same prototypes into
    /// `--eval-out`.
    #[arg(long, default_value_t = 0, requires = "eval_out")]
    pub eval_utterances: usize,
    #[arg(long)]
    pub eval_out: Option<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 24)]
    pub d_model: usize,
    #[arg(long, default_value_t = 3)]
    pub blocks: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 96)]
    pub ff_dim: usize,
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training set (JSON Lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out set; defaults to the training set.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 25)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Multiply the learning rate by `--lr-gamma` every this many epochs.
    #[arg(long, requires = "lr_gamma")]
    pub lr_step_every: Option<usize>,
    #[arg(long, requires = "lr_step_every")]
    pub lr_gamma: Option<f64>,
    #[arg(long, default_value_t = 5.0)]
    pub lambda_d: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_o: f64,
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    /// Use raw embeddings (no L2 normalization) in the contrast terms.
    #[arg(long)]
    pub no_feature_norm: bool,
    /// Number of seeds, counting up from `--first-seed`.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Worker threads for seeds (default: one per core).
    #[arg(long)]
    pub parallel_seeds: Option<usize>,
    /// Log elapsed milliseconds per step. Off by default so repeat runs
    /// produce identical logs.
    #[arg(long)]
    pub wall_time: bool,
    /// Artifact directory (default: `$PCO_RUN_DIR/<command>-<digest>`).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// `lambda_d` (with lambda_o = 0) or `lambda_o` (with lambda_d = 5).
    #[arg(long)]
    pub param: String,
    /// Comma-separated values.
    #[arg(long)]
    pub values: String,
    /// Sweep table path (default: `sweep.csv` in the run directory).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Clamp predictions to the score range first.
    #[arg(long)]
    pub clip: bool,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Expected embedding width; a checkpoint of another width is rejected.
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(short, long)]
    pub out: PathBuf,
}

/// The clap command, with repeated flags allowed (last one wins).
pub fn command() -> clap::Command {
    Cli::command().mut_subcommands(|s| s.args_override_self(true))
}

/// Splices `--config FILE` into the argument list.
///
/// The file holds one `key = value` (or bare `key` for a switch) per line,
/// `#` starts a comment. Its entries are inserted right after the
/// subcommand, so explicit flags, which come later, win.
pub fn expand_config(args: Vec<String>) -> anyhow::Result<Vec<String>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            config = Some(it.next().ok_or_else(|| anyhow::anyhow!("--config needs a path"))?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else { return Ok(rest) };
    let text = std::fs::read_to_string(&path).map_err(|e| anyhow::anyhow!("{path}: {e}"))?;
    let Some(sub_name) = rest.get(1).cloned() else { return Ok(rest) };
    let cmd = command();
    let sub = cmd
        .find_subcommand(&sub_name)
        .ok_or_else(|| anyhow::anyhow!("--config needs a subcommand first"))?;
    let mut spliced = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = match line.split_once('=') {
            Some((k, v)) => (k.trim(), Some(v.trim())),
            None => (line, None),
        };
        let key = key.trim_start_matches("--").replace('_', "-");
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| anyhow::anyhow!("{path}:{}: unknown key {key:?}", i + 1))?;
        if arg.get_action().takes_values() {
            let v = value.ok_or_else(|| anyhow::anyhow!("{path}:{}: {key} needs a value", i + 1))?;
            spliced.push(format!("--{key}"));
            spliced.push(v.to_string());
        } else {
            match value.unwrap_or("true") {
                "true" => spliced.push(format!("--{key}")),
                "false" => {}
                other => anyhow::bail!("{path}:{}: {key} takes true or false, got {other:?}", i + 1),
            }
        }
    }
    rest.splice(2..2, spliced);
    Ok(rest)
}
