//! `argrpo`: pretrain, RL-train, evaluate and sample toy autoregressive
//! image generators.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use argrpo_core::config::ExperimentConfig;
use argrpo_core::run::{self, RunError, RunPaths};

#[derive(Parser)]
#[command(name = "argrpo", version, about = "GRPO fine-tuning of toy autoregressive image generators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset (toy-default, paper-fidelity, ablation-no-kl, ablation-reward-a..d).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Dotted override such as `grpo.kl_beta=0.05`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Maximum-likelihood pretraining on the synthetic corpus.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// GRPO fine-tuning from a pretrained checkpoint.
    RlTrain {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint; defaults to the run's pretrain-final checkpoint.
        #[arg(long)]
        base: Option<PathBuf>,
        /// RL checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against the held-out set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write PNG samples for the given conditions.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class index or `null`; repeatable. Defaults to every class.
        #[arg(long = "condition")]
        conditions: Vec<String>,
        #[arg(long, default_value_t = 1.0)]
        cfg_scale: f64,
        /// Samples per condition.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Sample and evaluate at every scale in `eval.sweep_scales`.
    SweepCfg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Pretrain { common }
            | Command::RlTrain { common, .. }
            | Command::Eval { common, .. }
            | Command::Sample { common, .. }
            | Command::SweepCfg { common, .. } => common,
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| RunError::Internal(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn execute(command: Command) -> Result<(), RunError> {
    let common = command.common();
    let config = ExperimentConfig::load(common.config.as_deref(), common.preset.as_deref(), &common.overrides, common.seed)?;
    match command {
        Command::Pretrain { .. } => {
            let out = run::run_pretrain(&config)?;
            info!("pretraining nll {:.4} -> {:.4}", out.initial_nll, out.final_nll);
            println!("{}", out.checkpoint.display());
        }
        Command::RlTrain { base, resume, .. } => {
            let base = base.unwrap_or_else(|| RunPaths::new(&config).pretrain_final());
            let out = run::run_rl_train(&config, &base, resume.as_deref())?;
            if out.stopped_early {
                info!("stopped early after {} steps", out.steps);
            }
            println!("{}", out.checkpoint.display());
        }
        Command::Eval { checkpoint, .. } => print_json(&run::run_eval(&config, &checkpoint)?)?,
        Command::Sample { checkpoint, conditions, cfg_scale, count, .. } => {
            let conditions = if conditions.is_empty() {
                (0..config.build_domain()?.num_classes()).map(|c| c.to_string()).collect()
            } else {
                conditions
            };
            for path in run::run_sample(&config, &checkpoint, &conditions, cfg_scale, count)? {
                println!("{}", path.display());
            }
        }
        Command::SweepCfg { checkpoint, count, .. } => print_json(&run::run_sweep_cfg(&config, &checkpoint, count)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
