use cafm::samplers::SamplerKind;
use cafm_cli::commands::{self, EvalArgs, SampleArgs, TrainArgs};
use cafm_cli::selftest;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "cafm", version, about = "Flow matching and continuous adversarial flow training on toy mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Post-train from this flow-matching checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adversarial post-training from a flow-matching checkpoint.
    Posttrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint into a CSV file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_sampler)]
        sampler: Option<SamplerKind>,
        /// Integration steps (or difference steps for afm generators).
        #[arg(long)]
        steps: Option<usize>,
        /// Classifier-free guidance scale.
        #[arg(long)]
        cfg: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write every intermediate state to this CSV.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Field error and sample distances of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset preset to compare against (default: the training dataset).
        #[arg(long)]
        preset: Option<String>,
        /// Also dump model and oracle velocities on a grid.
        #[arg(long)]
        grid: bool,
        /// Output directory (default: the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_sampler)]
        sampler: Option<SamplerKind>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the numerical self-test suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_jvp_fault: bool,
    },
    /// Write a checkpoint that wraps the exact velocity of a preset.
    #[command(hide = true)]
    OracleCheckpoint {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_sampler(s: &str) -> Result<SamplerKind, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, init, seed, out } => {
            commands::cmd_train(&TrainArgs { config, init, seed, out }).map(|s| report_summary(&s))
        }
        Command::Posttrain { config, init, seed, out } => {
            commands::cmd_posttrain(&TrainArgs { config, init, seed, out }).map(|s| report_summary(&s))
        }
        Command::Sample {
            checkpoint,
            count,
            out,
            sampler,
            steps,
            cfg,
            seed,
            trajectory,
        } => commands::cmd_sample(&SampleArgs {
            checkpoint,
            count,
            out,
            sampler,
            steps,
            cfg,
            seed,
            trajectory,
        })
        .map(drop),
        Command::Eval {
            checkpoint,
            preset,
            grid,
            out,
            sampler,
            steps,
            seed,
        } => commands::cmd_eval(&EvalArgs {
            checkpoint,
            preset,
            grid,
            out,
            sampler,
            steps,
            seed,
        })
        .map(|r| println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"))),
        Command::Selftest { seed, inject_jvp_fault } => {
            let results = selftest::cmd_selftest(seed, inject_jvp_fault);
            return if results.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            };
        }
        Command::OracleCheckpoint { preset, out } => commands::cmd_oracle_checkpoint(&preset, &out).map(drop),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn report_summary(s: &commands::RunSummary) {
    println!("{}", serde_json::to_string_pretty(s).expect("summary serializes"));
}
