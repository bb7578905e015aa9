use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gibbs_geometry::acceptance::{run_all, run_criterion};
use gibbs_geometry::experiment::{run, Axis, Backend, Experiment, ExperimentConfig, EXIT_VALIDATION};

#[derive(Parser)]
#[command(name = "gibbslab", version, about = "Transfer operators, Gibbs measures and their geometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write manifest.json, result.json and table.csv.
    Run(RunArgs),
    /// Run the acceptance checks and print one PASS/FAIL line each.
    Acceptance {
        /// Only this criterion (1-12).
        #[arg(long)]
        criterion: Option<usize>,
    },
}

/// Flags override values from `--config`.
#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    #[arg(long, value_enum)]
    experiment: Option<Experiment>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Circle grid size.
    #[arg(long = "n", short = 'N')]
    n: Option<usize>,
    /// const:c, random, bernoulli:p, cos:a or file:path.
    #[arg(long)]
    potential: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    fermi_h: Option<f64>,
    #[arg(long)]
    energy_tol: Option<f64>,
    #[arg(long, value_enum)]
    axis: Option<Axis>,
    #[arg(long)]
    levels: Option<usize>,
    /// Root directory for run outputs (default: runs).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Worker threads for scans; overrides GIBBSLAB_WORKERS. Never changes results.
    #[arg(long)]
    workers: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> gibbs_geometry::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { c.$f = v; } )* };
        }
        set!(backend, experiment, d, k, n, potential, seed, samples, eps, step, rho, fermi_h, energy_tol, axis, levels);
        if self.output.is_some() {
            c.output = self.output.clone();
        }
        Ok(c)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let cfg = match args.config() {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_VALIDATION as u8);
                }
            };
            match run(&cfg, args.workers) {
                Ok(report) => {
                    println!("{}", report.dir.display());
                    if let Some(e) = &report.error {
                        eprintln!("error: {e}");
                    }
                    ExitCode::from(report.exit_code as u8)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_VALIDATION as u8)
                }
            }
        }
        Command::Acceptance { criterion } => {
            let outcomes = match criterion {
                Some(id) => match run_criterion(id) {
                    Ok(o) => vec![o],
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(EXIT_VALIDATION as u8);
                    }
                },
                None => run_all(),
            };
            for o in &outcomes {
                println!("{o}");
            }
            if outcomes.iter().all(|o| o.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
