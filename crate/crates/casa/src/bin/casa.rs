//! Command-line front end: train from a JSON config, run the verification
//! suites, or inspect a saved checkpoint.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use casa::casa_head::CasaHead;
use casa::harness::{run_training, verify_suite, RunConfig};

#[derive(Parser)]
#[command(name = "casa", about = "Shared-gradient actor-critic at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training loop described by a JSON config file.
    Train {
        /// Path to the run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for metrics.csv and checkpoint.json.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a verification suite and exit nonzero if any check fails.
    Verify {
        /// One of: gradients, operators, identities, all.
        #[arg(long)]
        suite: String,
    },
    /// Print a summary of a saved head checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let summary = run_training(&config, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { suite } => {
            let results = verify_suite(&suite)?;
            let mut all_passed = true;
            for r in &results {
                println!(
                    "suite {:<10} {}  {}",
                    r.name,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.detail
                );
                all_passed &= r.passed;
            }
            Ok(if all_passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Inspect { checkpoint } => {
            let head = CasaHead::load_checkpoint(&std::fs::read_to_string(&checkpoint)?)?;
            println!("variant:    {:?}", head.variant);
            println!("states:     {}", head.n_states);
            println!("actions:    {}", head.n_actions);
            println!("tau:        {}", head.tau);
            println!("layers:");
            let mut total = 0usize;
            for seg in head.params.segments() {
                let n: usize = seg.shape.iter().product();
                total += n;
                println!("  {:<6} {:?}  ({n} parameters)", seg.name, seg.shape);
            }
            let norm = head
                .params
                .to_flat()
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            println!("total:      {total} parameters, ℓ₂ norm {norm:.6}");
            Ok(ExitCode::SUCCESS)
        }
    }
}
