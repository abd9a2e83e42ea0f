mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Desk-scale Transformer encoder training and distillation.
#[derive(Debug, Parser)]
#[command(name = "distil", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the parameter count table of a model config.
    Params(ParamsArgs),
    /// Pretrain a teacher with masked-LM loss.
    TrainTeacher(TrainTeacherArgs),
    /// Distill a teacher checkpoint into a shallower student.
    Distill(DistillArgs),
    /// Masked-token accuracy and perplexity on the held-out split.
    EvalMlm(EvalMlmArgs),
    /// Forward-pass wall time of a config and its student shape.
    Bench(BenchArgs),
    /// Token-overlap F1 between prediction and gold files.
    F1(F1Args),
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory; must not exist or be empty unless --force.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite files in an existing --out directory [default: off].
    #[arg(long, default_value_t = false)]
    force: bool,
}

#[derive(Debug, Args)]
struct OptionalOutArgs {
    /// Directory for manifest.json and report.json [default: none, print only].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite files in an existing --out directory [default: off].
    #[arg(long, default_value_t = false)]
    force: bool,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    /// Run config (TOML with a [model] table).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    out: OptionalOutArgs,
}

#[derive(Debug, Args)]
struct TrainTeacherArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Corpus, one document per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Optimizer updates.
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Run seed [default: the config's `seed`].
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct DistillArgs {
    /// Run config (TOML); its [model] must match the teacher checkpoint.
    #[arg(long)]
    config: PathBuf,
    /// Corpus, one document per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Teacher checkpoint.
    #[arg(long)]
    teacher: PathBuf,
    /// Vocabulary file [default: vocab.txt next to the teacher checkpoint].
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Optimizer updates.
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Run seed [default: the config's `seed`].
    #[arg(long)]
    seed: Option<u64>,
    /// Soft-label weight [default: 0.5, or the config's distill.alpha].
    #[arg(long)]
    alpha: Option<f32>,
    /// Cosine weight [default: 0.3, or the config's distill.beta].
    #[arg(long)]
    beta: Option<f32>,
    /// Masked-LM weight [default: 0.2, or the config's distill.gamma].
    #[arg(long)]
    gamma: Option<f32>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct EvalMlmArgs {
    /// Run config (TOML); supplies data and masking settings.
    #[arg(long)]
    config: PathBuf,
    /// Corpus, one document per line; the held-out tail is evaluated.
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary file [default: vocab.txt next to the checkpoint].
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Teacher checkpoint; adds soft-label KL and cosine alignment.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Masking seed [default: the config's `seed`].
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OptionalOutArgs,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Teacher shape (TOML); the student takes the distill section's depth.
    #[arg(long)]
    config: PathBuf,
    /// Tokens per sequence.
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    /// Sequences per forward pass.
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Timed iterations per model (at least 10).
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Untimed warmup passes per model.
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    /// Weight and input seed [default: the config's `seed`].
    #[arg(long)]
    seed: Option<u64>,
    /// Report the analytic FLOP comparison only [default: off].
    #[arg(long, default_value_t = false)]
    flops_only: bool,
    #[command(flatten)]
    out: OptionalOutArgs,
}

#[derive(Debug, Args)]
struct F1Args {
    /// Predictions, one example per line, whitespace-separated tokens.
    #[arg(long)]
    predicted: PathBuf,
    /// Gold answers, same layout.
    #[arg(long)]
    gold: PathBuf,
    /// Print one score line per example [default: off].
    #[arg(long, default_value_t = false)]
    per_example: bool,
    #[command(flatten)]
    out: OptionalOutArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Params(a) => commands::params(a),
        Command::TrainTeacher(a) => commands::train_teacher(a),
        Command::Distill(a) => commands::distill(a),
        Command::EvalMlm(a) => commands::eval_mlm(a),
        Command::Bench(a) => commands::bench(a),
        Command::F1(a) => commands::f1(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {:#}", err.source);
            ExitCode::from(err.kind.code())
        }
    }
}
