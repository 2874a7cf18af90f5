use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ewip_bench::compare;
use ewip_bench::config::ExperimentConfig;
use ewip_bench::controller::Controller;
use ewip_bench::evaluate::{self, write_run};
use ewip_bench::sweep::{self, default_grids};
use ewip_bench::training::run_training;
use ewip_bench::BenchError;
use ewip_core::mpc;
use ewip_core::mpc::LinearModel;
use nalgebra::DMatrix;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "ewip-bench", about = "Train, evaluate and compare E-WIP controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config output directory.
    #[arg(long, short)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an RL controller.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Run one deterministic episode on the reference trajectory.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Agent checkpoint; not used for mpc.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Name shown in comparisons; defaults to the controller kind.
        #[arg(long)]
        label: Option<String>,
    },
    /// Tabulate evaluation runs and write overlay plot scripts.
    Compare {
        /// Evaluation output directories (each holding report.json and trace.csv).
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long, short, default_value = "comparison")]
        output_dir: PathBuf,
    },
    /// Effort response over (x, theta) and (thetad, theta) grids.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Grid points per axis.
        #[arg(long, default_value_t = 21)]
        points: usize,
    },
    /// Dump the continuous and discrete linear model used by the MPC.
    Linearize {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Serialize)]
struct Linearization {
    sample_time: f64,
    model: LinearModel,
    ad: Vec<Vec<f64>>,
    bd: Vec<Vec<f64>>,
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let (mut config, warnings) = ExperimentConfig::load(&common.config)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(dir) = &common.output_dir {
        config.output_dir = dir.clone();
    }
    Ok(config)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let config = load(&common)?;
            let out = &config.output_dir;
            let summary = run_training(&config, out, &mut |row| {
                eprintln!(
                    "eval @{:>5}: return {:>9.2}  final error {:.3} m  {}",
                    row.index,
                    row.episode_return,
                    row.final_error,
                    if row.failed { "fell" } else if row.success { "success" } else { "" }
                );
            })?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Evaluate {
            common,
            checkpoint,
            label,
        } => {
            let config = load(&common)?;
            let mut controller = Controller::load(&config, checkpoint.as_deref())?;
            let ev = evaluate::evaluate(&config, &mut controller, config.seed)?;
            let label = label.unwrap_or_else(|| config.kind.to_string());
            let report = write_run(&config.output_dir, &label, &config, config.seed, &ev)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Compare { runs, output_dir } => {
            print!("{}", compare::compare(&runs, &output_dir)?);
        }
        Command::Sweep {
            common,
            checkpoint,
            points,
        } => {
            let config = load(&common)?;
            let mut controller = Controller::load(&config, checkpoint.as_deref())?;
            fs::create_dir_all(&config.output_dir)?;
            for (a, b) in default_grids(points) {
                let grid = sweep::sweep(&mut controller, &config, a, b)?;
                let name = format!("sweep_{}_{}.csv", a.var.name(), b.var.name());
                let path = config.output_dir.join(&name);
                sweep::save_csv(&grid, a.var, b.var, &path)?;
                println!("{} ({} rows)", path.display(), grid.len());
            }
        }
        Command::Linearize { common } => {
            let config = load(&common)?;
            let state = mpc::operating_state(&config.plant, config.mpc.l_ref);
            let input = mpc::equilibrium_input(&config.plant, config.mpc.l_ref)?;
            let model = mpc::linearize(&state, &input, &config.plant)?;
            let (ad, bd) = mpc::discretize(&model.a, &model.b, config.mpc.sample_time);
            let dump = Linearization {
                sample_time: config.mpc.sample_time,
                ad: rows(&ad),
                bd: rows(&bd),
                model,
            };
            let text = serde_json::to_string_pretty(&dump)? + "\n";
            match &common.output_dir {
                Some(dir) => {
                    fs::create_dir_all(dir)?;
                    let path = dir.join("linearization.json");
                    fs::write(&path, text).with_context(|| path.display().to_string())?;
                    println!("{}", path.display());
                }
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<BenchError>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
