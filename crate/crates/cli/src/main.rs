use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use skyaoi_cli::config::{load_scenario, ExperimentConfig, SweepSpec};
use skyaoi_cli::run::{cmd_eval, cmd_sweep, cmd_train, default_eval_dir};
use skyaoi_cli::CliError;

#[derive(Parser)]
#[command(name = "skyaoi", version, about = "Train and evaluate multi-UAV AoI policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed of the config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train only this seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Greedy rollouts of a trained policy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scenario file, or an experiment config with a [scenario] table.
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Layout seed of the first episode; episode e uses seed + e.
        #[arg(long)]
        seed: Option<u64>,
        /// Where trajectories and the summary go.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every cell of a sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sweep: PathBuf,
        /// Skip cells already in sweep_results.csv.
        #[arg(long)]
        resume: bool,
        /// Worker threads.
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            for run in cmd_train(&cfg, seed)? {
                println!(
                    "seed {}: mean AoI {:.4}, return {:.1} ({})",
                    run.seed,
                    run.summary.mean_aoi,
                    run.summary.mean_return,
                    run.dir.display()
                );
            }
        }
        Command::Eval {
            checkpoint,
            scenario,
            episodes,
            seed,
            out,
        } => {
            let scenario = load_scenario(&scenario)?;
            let out = out.unwrap_or_else(|| default_eval_dir(&checkpoint));
            let summary = cmd_eval(&checkpoint, &scenario, episodes, seed, &out)?;
            println!(
                "{} episodes: mean AoI {:.4}, return {:.1} ({})",
                summary.episodes,
                summary.mean_aoi,
                summary.mean_return,
                out.display()
            );
        }
        Command::Sweep {
            config,
            sweep,
            resume,
            jobs,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let spec = SweepSpec::load(&sweep)?;
            let report = cmd_sweep(&cfg, &spec, resume, jobs)?;
            println!(
                "{} cells done, {} already present, {} failed ({})",
                report.completed,
                report.skipped,
                report.failed,
                cfg.output_dir.display()
            );
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
