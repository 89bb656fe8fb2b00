use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use exsur::harness::{cmd_compare, cmd_estimate, cmd_run, cmd_simulate, ExperimentConfig};
use exsur::Error;

#[derive(Parser)]
#[command(
    name = "exsur",
    version,
    about = "Excursion-volume estimation with intrinsic Kriging and SUR designs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario named in the config.
    Run(Common),
    /// Compare design strategies on paired seeds.
    Compare(Common),
    /// Export unconditional paths on the plotting grid.
    Simulate(Common),
    /// Plug-in volume of a model fitted to a design CSV.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// CSV with columns x_1..x_d,f[,noise].
        #[arg(long)]
        design: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `experiment.output`, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn prepare(&self) -> Result<(ExperimentConfig, PathBuf), Error> {
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config {
                    field: "--threads".into(),
                    message: e.to_string(),
                })?;
        }
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.experiment.seeds = vec![seed];
        }
        let out = self
            .out
            .clone()
            .or_else(|| config.experiment.output.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok((config, out))
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(c) => {
            let (config, out) = c.prepare()?;
            cmd_run(&config, &out)
        }
        Command::Compare(c) => {
            let (config, out) = c.prepare()?;
            cmd_compare(&config, &out)
        }
        Command::Simulate(c) => {
            let (config, out) = c.prepare()?;
            cmd_simulate(&config, &out)
        }
        Command::Estimate { common, design } => {
            let (config, out) = common.prepare()?;
            cmd_estimate(&config, &design, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.kind());
            if matches!(e, Error::Config { .. }) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
