use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prompt_ttt::config::{self, ExperimentConfig};
use prompt_ttt::{commands, CliResult};

/// Prompt-guided test-time training on synthetic swallow-study videos.
///
/// Settings come from built-in defaults, then `--config`, then
/// `PROMPT_TTT__<SECTION>__<FIELD>` environment variables, then flags.
/// Exit codes: 0 success, 1 internal failure, 2 usage or input error.
#[derive(Parser)]
#[command(name = "prompt-ttt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets the global seed and every component seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn resolve(&self) -> CliResult<ExperimentConfig> {
        config::resolve(self.config.as_deref(), std::env::vars(), self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate source videos, the train/test split and shifted test copies.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train on the training split and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Adapt (optionally) and score every test video.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma list of none, prompt_ttt, rot_ttt, mae_ttt, oracle.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Prompt-TTT once per point-prompt count.
    AblatePrompts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma list of counts, e.g. 1,3,5.
        #[arg(long)]
        n_points: Option<String>,
    },
    /// Merge result tables of several runs into markdown (mean ± std).
    Report {
        #[arg(required = false)]
        run_dirs: Vec<PathBuf>,
        /// Also write the markdown here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { common } => {
            commands::synth(&common.resolve()?, &common.out)?;
        }
        Command::Train { common, data } => {
            commands::train(&common.resolve()?, &data, &common.out)?;
        }
        Command::Eval { common, checkpoint, data, mode } => {
            let mut cfg = common.resolve()?;
            if let Some(m) = mode {
                cfg.eval.modes = commands::parse_modes(&m)?;
            }
            commands::eval(&cfg, &checkpoint, &data, &common.out)?;
        }
        Command::AblatePrompts { common, checkpoint, data, n_points } => {
            let mut cfg = common.resolve()?;
            if let Some(n) = n_points {
                cfg.eval.ablation_n_points = commands::parse_counts(&n)?;
            }
            cfg.validate()?;
            commands::ablate_prompts(&cfg, &checkpoint, &data, &common.out)?;
        }
        Command::Report { run_dirs, out } => {
            print!("{}", commands::report(&run_dirs, out.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
