//! Command-line driver for dataset generation, training, evaluation and reports.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on data or configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{CommandFactory, Parser, Subcommand};
use randgrasp::harness::{self, Dtype, ExperimentConfig};
use randgrasp::simworld::SimConfig;

#[derive(Parser, Debug)]
#[command(name = "randgrasp", version, about = "Grasp planning trained on procedurally generated objects")]
struct Cli {
    /// Experiment config (TOML with [experiment], [paths], [generate], [train], [eval], [scaling]).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the dataset seed and replaces the training seed list with this seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Artifact directory; relative config paths resolve against it.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate random objects and label uniformly sampled grasps.
    Generate,
    /// Train the grasp planner, one checkpoint per seed.
    TrainPlanner,
    /// Train the grasp evaluator, one checkpoint per seed.
    TrainEvaluator,
    /// Evaluate the configured methods on held-out scenes.
    Eval,
    /// Success within the top N beam candidates.
    SuccessCurve,
    /// Train on subsets of the dataset and evaluate each.
    Scaling,
    /// Render stored tables and curves to text and SVG.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().expect("checked by caller");
    let cfg = ExperimentConfig::load(path)?;
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run_typed<F: randgrasp::nn::Real>(cmd: Command, cfg: &ExperimentConfig, out: &Path, sim: &SimConfig) -> Result<()> {
    match cmd {
        Command::Generate => {
            let dir = harness::stage_generate(cfg, out, sim)?;
            println!("wrote dataset to {}", dir.display());
        }
        Command::TrainPlanner => {
            for p in harness::stage_train_planner::<F>(cfg, out, sim)? {
                println!("wrote {}", p.display());
            }
        }
        Command::TrainEvaluator => {
            for p in harness::stage_train_evaluator::<F>(cfg, out, sim)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Eval => print!("{}", harness::stage_eval::<F>(cfg, out, sim)?.to_text()),
        Command::SuccessCurve => print!("{}", harness::stage_success_curve::<F>(cfg, out, sim)?.to_text()),
        Command::Scaling => {
            let (table, curves) = harness::stage_scaling::<F>(cfg, out, sim)?;
            print!("{}\n{}", table.to_text(), curves.to_text());
        }
        Command::Report => unreachable!("handled without a config"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Report = cli.command {
        for p in harness::stage_report(&cli.out)? {
            println!("wrote {}", p.display());
        }
        return Ok(());
    }
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| anyhow::anyhow!("creating {}: {e}", cli.out.display()))?;
    let sim = SimConfig::default();
    match cfg.experiment.dtype {
        Dtype::F32 => run_typed::<f32>(cli.command, &cfg, &cli.out, &sim),
        Dtype::F64 => run_typed::<f64>(cli.command, &cfg, &cli.out, &sim),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if cli.config.is_none() && !matches!(cli.command, Command::Report) {
        eprintln!("error: --config PATH is required for this subcommand\n");
        eprintln!("{}", Cli::command().render_usage());
        return ExitCode::from(1);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
