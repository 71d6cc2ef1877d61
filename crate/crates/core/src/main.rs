use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pushgym::harness::{self, checkpoint, report, Algo, HarnessError, Recipe};

#[derive(Parser)]
#[command(
    name = "pushgym",
    version,
    about = "Train, evaluate and serve agents for the gripper pushing task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write metrics and checkpoints to a run directory.
    Train {
        #[arg(long, value_parser = parse_algo)]
        algo: Algo,
        /// Recipe name (I..VI, eased) or path to a recipe TOML file.
        #[arg(long)]
        recipe: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the recipe's run length. On resume this only moves the stopping point.
        #[arg(long)]
        timesteps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the newest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Use the full-length run and evaluation cadence.
        #[arg(long)]
        full: bool,
    },
    /// Evaluate a checkpoint greedily.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write per-metric CSV files and SVG charts for a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Expose environments over TCP.
    Serve {
        #[arg(long, default_value_t = pushgym::server::DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn parse_algo(s: &str) -> Result<Algo, String> {
    s.parse().map_err(|e: HarnessError| e.to_string())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train {
            algo,
            recipe,
            seed,
            timesteps,
            out,
            resume,
            full,
        } => {
            let mut r = Recipe::load(&recipe)?;
            if full {
                r = r.full_scale();
            }
            if let Some(t) = timesteps {
                r.total_timesteps = t;
            }
            println!("step,mean_reward,std_reward,mean_length,success_rate,efficiency");
            let t = harness::train(r, algo, seed, &out, resume, |row| {
                println!(
                    "{},{:.4},{:.4},{:.1},{:.3},{:.5}",
                    row.step,
                    row.mean_reward,
                    row.std_reward,
                    row.mean_length,
                    row.success_rate,
                    row.efficiency
                );
                true
            })?;
            eprintln!(
                "finished at step {} ({} training episodes)",
                t.step, t.train_episodes
            );
        }
        Command::Eval {
            checkpoint: path,
            episodes,
            seed,
        } => {
            let t = checkpoint::load(&path)?;
            let m = match seed {
                Some(s) => t.evaluate_seeded(episodes, s)?,
                None => t.evaluate_now(episodes)?,
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&m).expect("metrics serialize")
            );
        }
        Command::Report { run } => {
            for p in report::report(&run)? {
                println!("{}", p.display());
            }
        }
        Command::Serve { port, host } => {
            pushgym::server::serve(&format!("{host}:{port}"))
                .map_err(|e| HarnessError::Config(format!("serve on {host}:{port}: {e}")))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                HarnessError::Config(_) => ExitCode::from(2),
                HarnessError::Runtime(_) | HarnessError::Io(_) => ExitCode::from(3),
            }
        }
    }
}
