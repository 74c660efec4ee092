//! Command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};

use infocore::config::ExperimentConfig;
use infocore::eval::Scope;
use infocore::objectives::ObjectiveKind;
use infocore::persist::write_atomic;
use infocore::pipeline::{self, CHECKPOINT_FILE, EMBEDDINGS_CSV};
use infocore::simgen::{generate_simulation, write_simulation};
use infocore::{Error, Result};

#[derive(Parser)]
#[command(name = "infocore", version, about = "Batch-robust multimodal contrastive learning")]
struct Cli {
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (for `sim-gen`, the CSV path).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Paired CSV; overrides `data` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct ModelArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to evaluate; defaults to `<out>/model.v1.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the simulated paired dataset.
    SimGen,
    /// Train a model and write checkpoint, log, embeddings and metrics.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a trained checkpoint.
    Eval {
        #[command(subcommand)]
        which: EvalCommand,
    },
    /// Write embeddings of the evaluation slice.
    ExportEmbeddings {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck,
}

#[derive(Subcommand)]
enum EvalCommand {
    Retrieval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum)]
        scope: Option<ScopeArg>,
    },
    Probe {
        #[command(flatten)]
        model: ModelArgs,
    },
    Mixing {
        #[command(flatten)]
        model: ModelArgs,
    },
    Fairness {
        #[command(flatten)]
        model: ModelArgs,
    },
    Bound {
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Clip,
    Ccl,
    Infocore,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Whole,
    Batch,
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut ExperimentConfig, data: &DataArgs) {
    if let Some(path) = &data.data {
        cfg.data = Some(path.clone());
        cfg.tabular = None;
    }
}

fn checkpoint_path(cfg: &ExperimentConfig, model: &ModelArgs) -> PathBuf {
    model.checkpoint.clone().unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    match &cli.command {
        Command::SimGen => {
            let path = cli.out.clone().unwrap_or_else(|| PathBuf::from("sim.csv"));
            cfg.sim.validate()?;
            let (sim, generator) = generate_simulation(&cfg.sim)?;
            write_simulation(&sim, &generator, &cfg.sim, &path)?;
            info!("wrote {} rows to {}", sim.dataset.len(), path.display());
        }
        Command::Train { data, objective, epochs } => {
            apply_data(&mut cfg, data);
            if let Some(o) = objective {
                cfg.objective.objective = match o {
                    ObjectiveArg::Clip => ObjectiveKind::Clip,
                    ObjectiveArg::Ccl => ObjectiveKind::Ccl,
                    ObjectiveArg::Infocore => ObjectiveKind::Infocore,
                };
            }
            if let Some(e) = epochs {
                cfg.trainer.epochs = *e;
            }
            let report = pipeline::run_train(&cfg)?;
            info!("wrote {} metrics to {}", report.metrics.len(), cfg.out.display());
        }
        Command::Eval { which } => {
            let model = match which {
                EvalCommand::Retrieval { model, .. }
                | EvalCommand::Probe { model }
                | EvalCommand::Mixing { model }
                | EvalCommand::Fairness { model }
                | EvalCommand::Bound { model } => model,
            };
            apply_data(&mut cfg, &model.data);
            cfg.validate()?;
            let bundle = pipeline::load_bundle(&checkpoint_path(&cfg, model))?;
            let data = pipeline::load_data(&cfg)?;
            let report = match which {
                EvalCommand::Retrieval { scope, .. } => {
                    let scope = match scope {
                        Some(ScopeArg::Batch) => Scope::Batch,
                        Some(ScopeArg::Whole) => Scope::Whole,
                        None => cfg.eval.scope,
                    };
                    let (report, rows) = pipeline::eval_retrieval(&bundle, &data.eval, &cfg.eval.retrieval_ns, scope)?;
                    pipeline::write_retrieval(&cfg.out, &rows)?;
                    report
                }
                EvalCommand::Probe { .. } => pipeline::eval_probe(&bundle, &data.eval, &cfg)?,
                EvalCommand::Mixing { .. } => pipeline::eval_mixing(&bundle, &data.eval, &cfg)?,
                EvalCommand::Fairness { .. } => pipeline::eval_fairness(&bundle, &data.train, &data.eval, &cfg)?,
                EvalCommand::Bound { .. } => pipeline::eval_bound(&bundle, &data.eval)?,
            };
            pipeline::write_report(&cfg.out, &report)?;
        }
        Command::ExportEmbeddings { model } => {
            apply_data(&mut cfg, &model.data);
            let bundle = pipeline::load_bundle(&checkpoint_path(&cfg, model))?;
            let data = pipeline::load_data(&cfg)?;
            let (z_d, z_g) = bundle.embed(&data.eval)?;
            write_atomic(&cfg.out.join(EMBEDDINGS_CSV), &pipeline::embeddings_csv(&data.eval, &z_d, &z_g)?)?;
        }
        Command::Gradcheck => {
            let report = pipeline::gradcheck_suite(cfg.seed)?;
            write_json(&cfg.out.join("gradcheck.json"), &report)?;
            println!("max relative error {:.3e} over {} cases", report.max_rel_error, report.cases.len());
            if !(report.max_rel_error < 1e-4) {
                return Err(Error::OracleFailure(format!("max relative error {:e} >= 1e-4", report.max_rel_error)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
