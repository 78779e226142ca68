use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use statctrl::config::{load_config, preset, validate_config, ExperimentConfig, StrategySet, PRESETS};
use statctrl::experiment;
use statctrl::inversion::StrategyChoice;
use statctrl::Error;

const EXIT_INVALID: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "statctrl", version, about = "Statistical energy control of turbulent systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration without running anything.
    Validate { config: PathBuf },
    /// Estimate the response kernels.
    Kernels {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prepare the perturbed ensemble and solve the optimal energy control.
    Control {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover the forcing perturbation for one strategy.
    Invert {
        config: PathBuf,
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline.
    Run {
        /// Configuration file (or use --preset).
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// all, none, low-lr, low-closure, high-lr or high-closure.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidParameter(_) | Error::TriadConstraint { .. } => {
                Failure::Invalid(e.to_string())
            }
            Error::Json(_) => Failure::Invalid(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    load_config(path).map_err(|e| match e {
        Error::Io(io) => Failure::Invalid(format!("{}: {io}", path.display())),
        other => Failure::Invalid(format!("{}: {other}", path.display())),
    })
}

fn check(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let report = validate_config(cfg);
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Invalid(format!("invalid configuration\n{report}")))
    }
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e.to_string())
}

fn configure_threads() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("STATCTRL_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = load(&config)?;
            let report = validate_config(&cfg);
            print!("{report}");
            if report.passed() {
                println!("configuration is valid");
                Ok(())
            } else {
                Err(Failure::Invalid("configuration is invalid".into()))
            }
        }
        Command::Kernels { config, out } => {
            let cfg = load(&config)?;
            check(&cfg)?;
            let k = experiment::run_kernels(&cfg, &out).map_err(runtime)?;
            for w in &k.meta.warnings {
                eprintln!("warning: {w}");
            }
            println!("kernels written to {}", out.display());
            Ok(())
        }
        Command::Control { config, out } => {
            let cfg = load(&config)?;
            check(&cfg)?;
            let sol = experiment::run_control(&cfg, &out).map_err(runtime)?;
            println!("E'(0) = {:.6}, E*(T) = {:.6}", sol.e_star[0], sol.e_star[sol.nodes() - 1]);
            Ok(())
        }
        Command::Invert { config, strategy, out } => {
            let cfg = load(&config)?;
            let strategy: StrategyChoice = strategy.parse().map_err(|e: Error| Failure::Invalid(e.to_string()))?;
            let cfg = ExperimentConfig { strategy: strategy.to_string(), ..cfg };
            check(&cfg)?;
            let sol = experiment::run_inversion(&cfg, &strategy, &out).map_err(runtime)?;
            for w in &sol.diagnostics.warnings {
                eprintln!("warning: {w}");
            }
            println!("forcing for {strategy} written to {}", out.display());
            Ok(())
        }
        Command::Run { config, preset: name, strategy, seed, out } => {
            let mut cfg = match (config, name) {
                (Some(path), None) => load(&path)?,
                (None, Some(name)) => preset(&name).map_err(|e| Failure::Invalid(e.to_string()))?,
                _ => {
                    return Err(Failure::Invalid(format!(
                        "give a configuration file or --preset ({})",
                        PRESETS.join(", ")
                    )))
                }
            };
            if let Some(s) = strategy {
                StrategySet::parse(&s).map_err(|e| Failure::Invalid(e.to_string()))?;
                cfg.strategy = s;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            check(&cfg)?;
            let summary = experiment::run_experiment(&cfg, &out).map_err(runtime)?;
            println!("E_eq = {:.6}, E'(0) = {:.6}", summary.e_eq, summary.e0);
            for (name, m) in &summary.runs {
                println!(
                    "{name:>14}: E'(T) = {:+.5}  int|E' - E*| = {:.5}",
                    m.e_pert_final, m.tracking_error
                );
            }
            println!("outputs written to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INVALID) } else { ExitCode::SUCCESS };
        }
    };
    configure_threads();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INVALID)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
