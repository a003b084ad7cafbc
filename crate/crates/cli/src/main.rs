use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gmpf_cli::config::{SweepAxis, SweepConfig};
use gmpf_cli::{commands, CliError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "gmpf", version, about = "Track current dipoles on a cortical surface from MEG recordings")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (all cores by default). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Fix the dipole count (`--known-n=3`); bare `--known-n` uses the
    /// scenario's source total.
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "0")]
    known_n: Option<usize>,
    #[arg(long, global = true)]
    gibbs_iters: Option<usize>,
    /// Initial particles per source.
    #[arg(long, global = true)]
    particles: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a recording of the configured scenario.
    Simulate,
    /// Track sources in a recording directory.
    Localize {
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a localisation run against ground truth.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Repeated trials over a parameter axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: Option<Axis>,
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        algorithms: Vec<String>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Axis {
    Particles,
    Gibbs,
    Snr,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Overrides {
        seed: c.seed,
        out: c.out.clone(),
        known_n: c.known_n.map(|n| (n > 0).then_some(n)),
        gibbs_iters: c.gibbs_iters,
        particles: c.particles,
    }
    .apply(&mut cfg);
    match cli.command {
        Command::Simulate => {
            let out = commands::simulate(&cfg)?;
            println!("wrote {}", out.display());
        }
        Command::Localize { data } => {
            let out = commands::localize(&cfg, &data)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate { run, truth } => {
            let out = commands::evaluate(&cfg, &run, &truth)?;
            println!("wrote {}", out.display());
        }
        Command::Sweep {
            axis,
            values,
            algorithms,
        } => {
            let spec = match axis {
                None if values.is_empty() && algorithms.is_empty() => None,
                None => return Err(CliError::Config("--values and --algorithms need --axis".into())),
                Some(a) => Some(SweepConfig {
                    axis: match a {
                        Axis::Particles => SweepAxis::Particles,
                        Axis::Gibbs => SweepAxis::Gibbs,
                        Axis::Snr => SweepAxis::Snr,
                    },
                    values,
                    algorithms,
                }),
            };
            let rows = commands::sweep(&cfg, spec.as_ref())?;
            print!("{}", gmpf_core::eval::comparison_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
