use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use syncvsr::cli::{self, Invocation};
use syncvsr::config::RunConfig;

#[derive(Parser)]
#[command(name = "syncvsr", version, about = "Visual speech encoder training with frame-level audio-token supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic world and write train/eval splits.
    GenerateData(Common),
    /// Fit the audio-token codebook on synthesized audio features.
    FitTokenizer(Common),
    /// Train a model; writes metrics.jsonl and checkpoints.
    Train(Common),
    /// Evaluate a checkpoint on the eval split.
    Evaluate(Common),
    /// Train the Sync x CTC grid and report WER and perplexity.
    Ablation(Common),
    /// Per-edit-distance F1 gains over the vanilla checkpoint.
    AnalyzeHomophenes(Common),
    /// Mean attention distance per layer and head.
    AnalyzeAttention(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config with world, quantizer, model, train and analysis sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint file; repeat for several.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

fn invocation(c: Common) -> Result<Invocation, syncvsr::Error> {
    let config = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(Invocation {
        config: config.with_seed(c.seed),
        out: c.out,
        checkpoints: c.checkpoint,
        quiet: c.quiet,
    })
}

fn run(command: Command) -> Result<PathBuf, syncvsr::Error> {
    let (f, common): (fn(&Invocation) -> syncvsr::Result<PathBuf>, Common) = match command {
        Command::GenerateData(c) => (cli::cmd_generate_data, c),
        Command::FitTokenizer(c) => (cli::cmd_fit_tokenizer, c),
        Command::Train(c) => (cli::cmd_train, c),
        Command::Evaluate(c) => (cli::cmd_evaluate, c),
        Command::Ablation(c) => (cli::cmd_ablation, c),
        Command::AnalyzeHomophenes(c) => (cli::cmd_analyze_homophenes, c),
        Command::AnalyzeAttention(c) => (cli::cmd_analyze_attention, c),
    };
    f(&invocation(common)?)
}

fn main() -> ExitCode {
    let parsed = match Cli::try_parse() {
        Ok(p) => p,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(parsed.command) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            let code = cli::exit_code(&err);
            let report = anyhow::Error::new(err).context("syncvsr failed");
            eprintln!("error: {report:#}");
            ExitCode::from(code as u8)
        }
    }
}
