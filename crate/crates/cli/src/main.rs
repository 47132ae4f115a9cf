use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use panonav_cli::{Arm, Ctx};
use panonav_core::config::{ExperimentConfig, Preset};

#[derive(Parser)]
#[command(
    name = "panonav",
    version,
    about = "Memory-augmented RL for image-goal navigation in a procedural 2D world"
)]
struct Cli {
    /// Preset configuration to start from.
    #[arg(long, global = true, value_parser = parse_preset, default_value = "desk")]
    preset: Preset,
    /// Config file with `key = value` overrides (dotted keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Workspace directory for all inputs and outputs.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    match s {
        "desk" => Ok(Preset::Desk),
        "paper" => Ok(Preset::Paper),
        other => Err(format!("unknown preset {other} (expected desk|paper)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/test scene split.
    GenScenes,
    /// Collect one random-walk archive per train scene.
    CollectWalks,
    /// Train the reachability network on the collected walks.
    TrainReach,
    /// Sweep the reachability threshold on held-out walks.
    CalibrateTau,
    /// Generate train/test episode datasets.
    GenEpisodes,
    /// Train a policy arm with PPO.
    TrainPolicy {
        #[arg(long, value_parser = Arm::parse)]
        arm: Arm,
    },
    /// Evaluate a trained policy run on an episode dataset.
    Eval {
        /// Run directory produced by train-policy.
        #[arg(long)]
        run_dir: PathBuf,
        /// Checkpoint file name within the run directory.
        #[arg(long, default_value = "final.ckpt")]
        checkpoint: String,
        /// Episode dataset (JSON lines).
        #[arg(long)]
        dataset: PathBuf,
        /// Also dump per-episode trajectories.
        #[arg(long)]
        trajectories: bool,
    },
    /// Aggregate evaluations of several arms and seeds.
    Ablate {
        /// Comma-separated arm names.
        #[arg(long, value_delimiter = ',', value_parser = Arm::parse)]
        arms: Vec<Arm>,
        /// Comma-separated seeds (each must have a trained run).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Episode dataset every run is evaluated on.
        #[arg(long)]
        dataset: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    let mut cfg = ExperimentConfig::preset(cli.preset);
    if let Some(path) = &cli.config {
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(&cli.out)?;
    let ctx = Ctx::new(cfg, cli.out);

    match cli.command {
        Command::GenScenes => {
            panonav_cli::cmd_gen_scenes(&ctx)?;
        }
        Command::CollectWalks => {
            panonav_cli::cmd_collect_walks(&ctx)?;
        }
        Command::TrainReach => {
            panonav_cli::cmd_train_reach(&ctx)?;
        }
        Command::CalibrateTau => {
            let report = panonav_cli::cmd_calibrate_tau(&ctx)?;
            println!("recommended tau: {:.2}", report.recommended);
        }
        Command::GenEpisodes => {
            panonav_cli::cmd_gen_episodes(&ctx)?;
        }
        Command::TrainPolicy { arm } => {
            let dir = panonav_cli::cmd_train_policy(&ctx, arm)?;
            println!("trained {}", dir.display());
        }
        Command::Eval {
            run_dir,
            checkpoint,
            dataset,
            trajectories,
        } => {
            let report = panonav_cli::cmd_eval(&ctx, &run_dir, &checkpoint, &dataset, trajectories)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate {
            arms,
            seeds,
            dataset,
        } => {
            let dir = panonav_cli::cmd_ablate(&ctx, &arms, &seeds, &dataset)?;
            println!("ablation written to {}", dir.display());
        }
    }
    Ok(())
}
