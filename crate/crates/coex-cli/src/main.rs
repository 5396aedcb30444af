use clap::{Parser, Subcommand};
use coex_cli::commands::{self, RunArgs, SizeEffArgs, ValidityArgs, VerifyArgs};
use std::path::PathBuf;

/// Joint neural-architecture and multi-FPGA pipeline co-exploration.
#[derive(Parser)]
#[command(name = "coex", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the two-level search; resumes from a checkpoint when the
    /// output directory holds one.
    Run {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Override the configured random seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for log.jsonl, checkpoint.json, archive.json, and
        /// pareto.csv.
        #[arg(long, default_value = "coex-out")]
        out: PathBuf,
        /// Stop (with a checkpoint) once this many episodes exist.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Estimate the feasible fraction of the space per throughput target.
    AnalyzeValidity {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated throughput targets in frames per second.
        #[arg(long, value_delimiter = ',', required = true)]
        fps_list: Vec<f64>,
        /// Networks sampled uniformly from the space.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        /// Override the configured random seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "coex-out")]
        out: PathBuf,
    },
    /// Exhaustively relate model size to best pipeline efficiency.
    AnalyzeSizeEff {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "coex-out")]
        out: PathBuf,
    },
    /// Cross-check the exact optimizer against the exhaustive reference
    /// on random instances.
    VerifyPartitioner {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("COEX_LOG_LEVEL", "info"),
    )
    .format_timestamp(None)
    .init();

    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out, stop_after } => commands::cmd_run(&RunArgs {
            config,
            seed,
            out,
            stop_after,
        }),
        Command::AnalyzeValidity { config, fps_list, samples, seed, out } => {
            commands::cmd_analyze_validity(&ValidityArgs {
                config,
                fps_list,
                samples,
                seed,
                out,
            })
        }
        Command::AnalyzeSizeEff { config, out } => {
            commands::cmd_analyze_size_eff(&SizeEffArgs { config, out })
        }
        Command::VerifyPartitioner { trials, seed } => {
            commands::cmd_verify_partitioner(&VerifyArgs { trials, seed })
        }
    };

    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
