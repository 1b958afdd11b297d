use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fdlc_core::config::{ConfigError, ExperimentConfig};
use fdlc_core::experiment::{self, ExperimentError};
use fdlc_core::gradcheck::gradcheck;
use fdlc_core::{plot, ContactKind};

const GRADCHECK_TOL: f64 = 1e-4;

/// Trajectory optimization for rotating a pinned box with a point pusher or a
/// force-distributed line pusher.
#[derive(Debug, Parser)]
#[command(name = "fdlc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON experiment configuration (built-in defaults when omitted)
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a configuration value by dotted key, e.g. params.mu_p=0.4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Log progress and write per-run iteration logs
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize every (model, goal) pair and write the result bundle
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (overrides output_dir)
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Only run this contact model
        #[arg(long, value_name = "point|fdlc")]
        model: Option<ContactKind>,
        /// Goal angles in degrees, comma separated
        #[arg(long = "goal-deg", value_name = "LIST", value_delimiter = ',', allow_negative_numbers = true)]
        goal_deg: Option<Vec<f64>>,
    },
    /// Re-simulate the controls of a stored trajectory and report the state deviation
    Replay {
        /// trajectory.json of a previous run
        trajectory: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare the step Jacobians against finite differences on random contact states
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Only check this contact model
        #[arg(long, value_name = "point|fdlc")]
        model: Option<ContactKind>,
        /// Random states per model
        #[arg(long, default_value_t = 20)]
        samples: usize,
    },
    /// Regenerate the SVG figures of a result bundle from its CSV files
    Plot {
        #[command(flatten)]
        config: ConfigArgs,
        /// Bundle directory (defaults to output_dir)
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Invalid(String),
    Solver(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Solve(_) | ExperimentError::Ilqr(_) => Failure::Solver(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let base = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    Ok(base.with_overrides(&args.overrides)?)
}

fn init_logging(verbose: bool) {
    let level = if verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            out,
            model,
            goal_deg,
        } => {
            init_logging(config.verbose);
            let mut cfg = load(&config)?;
            if let Some(kind) = model {
                cfg.models.retain(|m| m.kind == kind);
                if cfg.models.is_empty() {
                    return Err(Failure::Invalid(format!("no `{kind}` model in the configuration")));
                }
            }
            if let Some(goals) = goal_deg {
                cfg.goals_deg = goals;
            }
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            cfg.validate()?;
            let out = cfg.output_dir.clone();
            let bundle = experiment::run(&cfg, &out, config.verbose)?;
            for r in &bundle.runs {
                match &r.result {
                    Ok((_, m)) => println!(
                        "{:<12} error {:>6.2} deg  effort {:.4}  distance {:.4} m  persistence {:.3}",
                        r.name(),
                        m.tracking_error.to_degrees(),
                        m.control_effort,
                        m.travel_distance,
                        m.persistence_ratio
                    ),
                    Err(e) => println!("{:<12} FAILED: {e}", r.name()),
                }
            }
            for c in &bundle.comparisons {
                println!(
                    "goal {:>5} deg  effort fdlc/point {:.3}  distance fdlc/point {:.3}",
                    c.goal_deg, c.effort_ratio, c.distance_ratio
                );
            }
            println!("wrote {} files to {}", bundle.files.len(), out.display());
            match bundle.failures() {
                0 => Ok(()),
                n => Err(Failure::Solver(format!("{n} of {} runs failed", bundle.runs.len()))),
            }
        }
        Command::Replay { trajectory, config } => {
            init_logging(config.verbose);
            let cfg = load(&config)?;
            let report = experiment::replay(&trajectory, &cfg)?;
            println!("max state deviation {:e}", report.max_deviation);
            Ok(())
        }
        Command::Gradcheck {
            config,
            model,
            samples,
        } => {
            init_logging(config.verbose);
            let cfg = load(&config)?;
            cfg.validate()?;
            let kinds = match model {
                Some(k) => vec![k],
                None => vec![ContactKind::Point, ContactKind::Fdlc],
            };
            let mut worst: f64 = 0.0;
            for kind in kinds {
                let r = gradcheck(kind, &cfg.params, cfg.step, &cfg.solver, samples, cfg.seed)
                    .map_err(|e| Failure::Solver(e.to_string()))?;
                println!(
                    "{kind}: max relative error A {:.3e}  B {:.3e}  ({} states)",
                    r.max_rel_err_a,
                    r.max_rel_err_b,
                    r.samples.len()
                );
                worst = worst.max(r.max_rel_err());
            }
            println!("max relative error {worst:.3e}");
            if worst <= GRADCHECK_TOL {
                Ok(())
            } else {
                Err(Failure::Solver(format!("exceeds tolerance {GRADCHECK_TOL:e}")))
            }
        }
        Command::Plot { config, out } => {
            init_logging(config.verbose);
            let cfg = load(&config)?;
            let out = out.unwrap_or(cfg.output_dir);
            let written = plot::regenerate(&out)?;
            println!("wrote {} figures to {}", written.len(), out.join("plots").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Solver(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
