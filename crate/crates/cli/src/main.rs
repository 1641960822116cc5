use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qkmps::Strategy;
use qkmps_cli::commands;
use qkmps_cli::config::{ExperimentConfig, Overrides};
use qkmps_cli::error::CliError;

#[derive(Parser)]
#[command(name = "qkmps", version, about = "Quantum kernel SVMs on matrix product states")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML experiment config; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of worker threads.
    #[arg(long, short = 'k', global = true)]
    workers: Option<usize>,
    /// `no-messaging` or `round-robin`.
    #[arg(long, global = true)]
    strategy: Option<Strategy>,
    /// Features kept, equal to the qubit count.
    #[arg(long, short = 'm', global = true)]
    features: Option<usize>,
    /// Interaction distance.
    #[arg(long, short = 'd', global = true)]
    distance: Option<usize>,
    /// Ansatz repetitions.
    #[arg(long, short = 'r', global = true)]
    layers: Option<usize>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Rows drawn from each class.
    #[arg(long, global = true)]
    n_per_class: Option<usize>,
    /// Labelled CSV input; synthetic data is generated when omitted.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Select, balance and rescale a dataset into a CSV.
    Preprocess {
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
    },
    /// Full pipeline: Gram matrices, SVM over the C grid, metrics.
    Experiment,
    /// Quantum Gram matrices only.
    Gram {
        /// Already rescaled CSV; computes a single train matrix from all rows.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Simulation, memory and inner-product timings.
    Benchmark {
        #[arg(long)]
        samples: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = cli.global;
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut overrides = Overrides {
        seed: g.seed,
        workers: g.workers,
        strategy: g.strategy,
        features: g.features,
        distance: g.distance,
        layers: g.layers,
        gamma: g.gamma,
        out_dir: g.out_dir,
        n_per_class: g.n_per_class,
        data: g.data,
        samples: None,
    };
    if let Command::Benchmark { samples } = &cli.command {
        overrides.samples = *samples;
    }
    cfg.apply(&overrides);

    match cli.command {
        Command::Preprocess { output } => json(&commands::preprocess(&cfg, output.as_deref())?),
        Command::Experiment => {
            let report = commands::experiment(&cfg)?;
            let line = |r: &commands::KernelReport| {
                format!(
                    "{}: best C {} auc {:.4} accuracy {:.4}",
                    r.kernel, r.best.c, r.best.metrics.auc, r.best.metrics.accuracy
                )
            };
            println!("{}", line(&report.quantum));
            if let Some(g) = &report.gaussian {
                println!("{}", line(g));
            }
            println!("wrote {}", cfg.out_dir.join("metrics.json").display());
        }
        Command::Gram { input } => json(&commands::gram(&cfg, input.as_deref())?),
        Command::Benchmark { .. } => {
            let b = commands::benchmark(&cfg)?;
            json(&b.summary);
        }
    }
    Ok(())
}

fn json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).unwrap_or_default());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
