use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use proxyfed::cli::{cmd_gradcheck, cmd_run, cmd_sweep, RunOptions, SweepOptions};

#[derive(Parser)]
#[command(name = "proxyfed", version, about = "Deterministic proxy-guided federated SSL simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one federation and write metrics.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set dirichlet_alpha=0.1`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (defaults to the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write wall_time as 0 so repeated runs are byte-identical.
        #[arg(long)]
        omit_wall_time: bool,
    },
    /// Run the cross product of swept values over several seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "sweep", value_name = "KEY=V1,V2,...", required = true)]
        axes: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        omit_wall_time: bool,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test fixture: perturb the analytic gradient of the named loss.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            overrides,
            out,
            omit_wall_time,
        } => cmd_run(&RunOptions {
            config,
            overrides,
            out,
            omit_wall_time,
        })
        .map(|s| {
            match s.final_test_accuracy {
                Some(a) => println!("final test accuracy {a:.4} after {} rounds", s.rounds),
                None => println!("no rounds run"),
            }
            true
        }),
        Command::Sweep {
            config,
            axes,
            seeds,
            out,
            omit_wall_time,
        } => cmd_sweep(&SweepOptions {
            config,
            axes,
            seeds,
            out,
            omit_wall_time,
        })
        .map(|cells| {
            for c in cells {
                println!("{:?}: {:.4} ± {:.4}", c.values, c.mean(), c.std());
            }
            true
        }),
        Command::Gradcheck { seed, corrupt } => {
            cmd_gradcheck(seed, corrupt.as_deref()).map(|rows| rows.iter().all(|r| r.passed()))
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
