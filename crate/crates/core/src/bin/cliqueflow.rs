use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cliqueflow::config::{Profile, RunConfig};
use cliqueflow::experiments::{self as ex, ExperimentError, Task};

#[derive(Parser)]
#[command(name = "cliqueflow", version, about = "Latent-space design optimization with clique-structured models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON config; keys not given fall back to the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    /// Worker threads; 1 keeps every command bit-reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its oracle.
    GenData,
    /// Train a model and write a checkpoint.
    Train,
    /// Optimize encoded held-out records and decode the designs.
    Optimize,
    /// Encode and decode held-out records at each guidance strength.
    Reconstruct,
    /// Decode straight-line paths between two held-out records.
    Interpolate,
    /// Compare back-propagated and ES gradients, with a decay sweep.
    AblateGradients,
    /// Time the optimization and decoding phases.
    Timing,
    /// Held-out metrics of a checkpoint.
    Eval,
}

fn load_config(c: &Common) -> Result<RunConfig, ExperimentError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p, c.profile)?,
        None => RunConfig::for_profile(c.profile.unwrap_or(Profile::Desk)),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.paths.out_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    let cfg = load_config(&cli.common)?;
    if cli.common.threads == 0 {
        return Err(cliqueflow::config::ConfigError::Invalid("--threads must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.threads)
        .build_global()
        .map_err(|e| ExperimentError::Numeric(format!("thread pool: {e}")))?;

    let n = cfg.experiments.n_eval;
    match cli.command {
        Command::GenData => {
            ex::gen_data(&cfg)?;
        }
        Command::Train => {
            let task = Task::prepare(&cfg)?;
            ex::train(&cfg, &task, |r| {
                if let Some(v) = r.val_loss {
                    eprintln!("step {:>7}  loss {:>10.4}  val {:>10.4}", r.step, r.loss, v);
                }
            })?;
        }
        Command::Optimize => {
            let task = Task::prepare(&cfg)?;
            let model = ex::load_model(&ex::checkpoint_path(&cfg))?;
            ex::optimize_designs(&cfg, &model, task.eval_records(n), &task.spec)?;
        }
        Command::Reconstruct => {
            let task = Task::prepare(&cfg)?;
            let model = ex::load_model(&ex::checkpoint_path(&cfg))?;
            ex::reconstruct(&cfg, &model, task.eval_records(n))?;
        }
        Command::Interpolate => {
            let task = Task::prepare(&cfg)?;
            let model = ex::load_model(&ex::checkpoint_path(&cfg))?;
            let pair = task.eval_records(2);
            if pair.len() < 2 {
                return Err(ExperimentError::Numeric("interpolation needs two held-out records".into()));
            }
            ex::interpolate(&cfg, &model, &pair[0], &pair[1], &task.spec)?;
        }
        Command::AblateGradients => {
            let task = Task::prepare(&cfg)?;
            let model = ex::load_model(&ex::checkpoint_path(&cfg))?;
            ex::ablate_gradients(&cfg, &model, task.eval_records(n), &task.spec)?;
        }
        Command::Timing => {
            let task = Task::prepare(&cfg)?;
            let model = ex::load_model(&ex::checkpoint_path(&cfg))?;
            ex::timing(&cfg, &model, &task.test)?;
        }
        Command::Eval => {
            let task = Task::prepare(&cfg)?;
            let path = ex::checkpoint_path(&cfg);
            let trainer = cliqueflow::trainer::load_checkpoint(&path).map_err(|source| ExperimentError::Checkpoint { path, source })?;
            ex::eval(&cfg, &trainer, task.eval_records(n))?;
        }
    }
    let summary = std::fs::read_dir(&cfg.paths.out_dir).ok().map(|_| cfg.paths.out_dir.display().to_string()).unwrap_or_default();
    println!("results in {summary}");
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
