//! `drivelang`: data generation, tokenizer fitting, training, generation,
//! planning, evaluation and ablations from one JSON run config.

mod artifacts;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use commands::{Ablation, Split};
use config::{RunConfig, Seeds, CONFIG_ENV};
use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "drivelang", version, about = "Driving as next-token prediction over a unified token vocabulary")]
struct Cli {
    /// Run config (JSON). Defaults to $DRIVELANG_CONFIG when set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Set every seed in the `seeds` section.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (directory or file, depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Dotted-path override, e.g. `--set model.layers=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (raw frames, actions, scenarios).
    GenData {
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Fit the action codec and patch codebook, then tokenize the dataset.
    Fit {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the transformer on a tokenized dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint and its optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Roll out future frames from the first frames of a dataset sequence.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        /// Defaults to `rollout.window_condition`.
        #[arg(long)]
        seed_frames: Option<usize>,
        /// Defaults to `rollout.total_frames`.
        #[arg(long)]
        total_frames: Option<usize>,
        /// Also write each generated frame as its own image.
        #[arg(long)]
        dump_frames: bool,
    },
    /// Plan a trajectory for one scenario file.
    Plan {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Score the model planner on a held-out scenario set.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        scenarios: Option<PathBuf>,
    },
    /// Compare the full model against ablated planners.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// Variants to score; defaults to all copy variants and constant velocity.
        #[arg(long, value_enum, num_args = 1..)]
        which: Vec<Ablation>,
        /// Checkpoint trained with zeroed action positions.
        #[arg(long)]
        variant: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Fit { .. } => "fit",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Plan { .. } => "plan",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let file = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = RunConfig::load(file.as_deref(), &cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seeds = Seeds::all(s);
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<commands::Outputs> {
    let cfg = load_config(cli)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let p = &cfg.paths;
    let or = |a: &Option<PathBuf>, d: &PathBuf| a.clone().unwrap_or_else(|| d.clone());
    match &cli.command {
        Command::GenData { split } => {
            let default = match split {
                Split::Train => &p.data,
                Split::Eval => &p.eval_data,
            };
            commands::gen_data(&cfg, *split, &or(&cli.out, default))
        }
        Command::Fit { data } => commands::fit(&cfg, &or(data, &p.data)),
        Command::Train { data, resume } => {
            commands::train_model(&cfg, &or(data, &p.data), resume.as_deref(), &or(&cli.out, &p.checkpoint))
        }
        Command::Generate {
            checkpoint,
            data,
            sequence,
            seed_frames,
            total_frames,
            dump_frames,
        } => {
            let ck = or(checkpoint, &p.checkpoint);
            let data = or(data, &p.data);
            let args = commands::GenerateArgs {
                checkpoint: &ck,
                data: &data,
                sequence: *sequence,
                seed_frames: seed_frames.unwrap_or(cfg.rollout.window_condition),
                total_frames: total_frames.unwrap_or(cfg.rollout.total_frames),
                dump_frames: *dump_frames,
            };
            commands::generate(&cfg, &args, &or(&cli.out, &"runs/generate".into()))
        }
        Command::Plan {
            checkpoint,
            data,
            scenario,
        } => commands::plan_scenario(
            &cfg,
            &or(checkpoint, &p.checkpoint),
            &or(data, &p.data),
            scenario,
            &or(&cli.out, &"runs/plan.json".into()),
        ),
        Command::Evaluate {
            checkpoint,
            data,
            scenarios,
        } => commands::evaluate(
            &cfg,
            &or(checkpoint, &p.checkpoint),
            &or(data, &p.data),
            &or(scenarios, &p.eval_data),
            &or(&cli.out, &"runs/evaluate".into()),
        ),
        Command::Ablate {
            checkpoint,
            data,
            scenarios,
            which,
            variant,
        } => {
            let which = if which.is_empty() {
                vec![
                    Ablation::CopyX,
                    Ablation::CopyY,
                    Ablation::CopyTheta,
                    Ablation::CopyAll,
                    Ablation::ConstVel,
                ]
            } else {
                which.clone()
            };
            let ck = or(checkpoint, &p.checkpoint);
            let data = or(data, &p.data);
            let scenarios = or(scenarios, &p.eval_data);
            let args = commands::AblateArgs {
                checkpoint: &ck,
                data: &data,
                scenarios: &scenarios,
                which: &which,
                variant: variant.as_deref(),
            };
            commands::ablate(&cfg, &args, &or(&cli.out, &"runs/ablate".into()))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(&cli) {
        Ok(outputs) => {
            println!("{}", json!({"status": "ok", "command": name, "outputs": outputs}));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.record(name));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
