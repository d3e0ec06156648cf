//! Command-line front end: train, evaluate, compare, gradcheck, and
//! dump-trajectory over TOML run configurations.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::rngs::StdRng;
use rand::SeedableRng;

use cosearch::harness::config::{load_config, Mode, RunConfig};
use cosearch::harness::csvio::fmt_f64;
use cosearch::harness::eval::{evaluate, rollout_trajectories, write_eval_report, write_trajectories};
use cosearch::harness::experiment::{
    check_model_matches, compare_checkpoints, run_experiment, write_compare,
};
use cosearch::harness::gradcheck::run_gradcheck_suite;
use cosearch::learner::Population;
use cosearch::qnet::JointModel;
use cosearch::{Error, Result};

#[derive(Parser)]
#[command(name = "cosearch", version, about = "Joint active box search with communicating Q-agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run configuration file (TOML); defaults apply for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's rng_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write all run artifacts.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Overrides the main-phase episode budget.
        #[arg(long)]
        episodes: Option<usize>,
        /// Overrides the config's mode (single|joint).
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate a checkpoint and write the report CSVs.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// Success threshold for accuracy and recall.
        #[arg(long)]
        iou_threshold: Option<f64>,
    },
    /// Compare a joint and a single checkpoint on the same eval stream.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        joint: PathBuf,
        #[arg(long)]
        single: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        iou_threshold: Option<f64>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Base seed for the generated checks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of random model/state draws.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Roll out greedy episodes and dump their trajectories as CSV.
    DumpTrajectory {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
}

fn load_with_overrides(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.rng_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn eval_population(cfg: &RunConfig) -> Population {
    Population::new(cfg.scene.clone(), cfg.observation, cfg.env)
}

fn eval_seed_for(cfg: &RunConfig) -> u64 {
    // same derivation order as the experiment runner: model, pretrain×n,
    // train, eval
    use rand::Rng;
    let mut seeder = StdRng::seed_from_u64(cfg.master_seed());
    let mut seed = 0u64;
    for _ in 0..cfg.scene.num_classes + 3 {
        seed = seeder.gen();
    }
    seed
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            episodes,
            mode,
        } => {
            let mut cfg = load_with_overrides(&common)?;
            if let Some(episodes) = episodes {
                cfg.train.episodes = episodes;
            }
            if let Some(mode) = mode {
                cfg.mode = mode.parse::<Mode>()?;
            }
            cfg.validate()?;
            let out_dir = cfg.out_dir.clone().unwrap_or_else(|| common.out.clone());
            let report = run_experiment(&cfg, &out_dir)?;
            println!("trained {} mode into {}", cfg.mode, out_dir.display());
            for c in &report.per_class {
                println!(
                    "class {}: accuracy {} over {} episodes (median steps {})",
                    c.class,
                    fmt_f64(c.accuracy),
                    c.episodes,
                    fmt_f64(c.median_steps)
                );
            }
        }
        Command::Evaluate {
            common,
            checkpoint,
            episodes,
            iou_threshold,
        } => {
            let mut cfg = load_with_overrides(&common)?;
            if let Some(episodes) = episodes {
                cfg.eval.episodes = episodes;
            }
            if let Some(threshold) = iou_threshold {
                cfg.eval.iou_threshold = threshold;
            }
            cfg.validate()?;
            let model = JointModel::load_checkpoint(&checkpoint)?;
            check_model_matches(&cfg, &model)?;
            std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
            let mut rng = StdRng::seed_from_u64(eval_seed_for(&cfg));
            let report = evaluate(
                &model,
                &eval_population(&cfg),
                cfg.eval.episodes,
                cfg.eval.iou_threshold,
                &mut rng,
            )?;
            write_eval_report(&report, &common.out)?;
            for c in &report.per_class {
                println!(
                    "class {}: accuracy {} recall@{} {}",
                    c.class,
                    fmt_f64(c.accuracy),
                    report.max_steps,
                    fmt_f64(*c.recall_at_k.last().unwrap_or(&0.0))
                );
            }
        }
        Command::Compare {
            common,
            joint,
            single,
            episodes,
            iou_threshold,
        } => {
            let mut cfg = load_with_overrides(&common)?;
            if let Some(threshold) = iou_threshold {
                cfg.eval.iou_threshold = threshold;
            }
            cfg.validate()?;
            let episodes = episodes.unwrap_or(cfg.eval.episodes);
            let rows = compare_checkpoints(&joint, &single, &cfg, episodes)?;
            std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
            write_compare(&rows, &common.out.join("compare.csv"))?;
            for r in &rows {
                println!(
                    "class {}: joint {} single {} delta {}",
                    r.class,
                    fmt_f64(r.accuracy_joint),
                    fmt_f64(r.accuracy_single),
                    fmt_f64(r.delta)
                );
            }
        }
        Command::Gradcheck { seed, seeds } => {
            let outcome = run_gradcheck_suite(seeds, seed)?;
            println!("{outcome}");
            if !outcome.passed {
                return Err(Error::NonFinite(format!(
                    "gradient check failed: max rel err {:.3e}",
                    outcome.max_rel_err
                )));
            }
        }
        Command::DumpTrajectory {
            common,
            checkpoint,
            episodes,
        } => {
            let cfg = load_with_overrides(&common)?;
            let model = JointModel::load_checkpoint(&checkpoint)?;
            check_model_matches(&cfg, &model)?;
            std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
            let mut rng = StdRng::seed_from_u64(eval_seed_for(&cfg).wrapping_add(1));
            let rows = rollout_trajectories(&model, &eval_population(&cfg), episodes, &mut rng)?;
            let path = common.out.join("trajectories.csv");
            write_trajectories(&rows, &path)?;
            println!("wrote {} steps to {}", rows.len(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with success status
            if e.use_stderr() {
                eprintln!("error: category=usage {}", e.kind());
                let _ = e.print();
                return ExitCode::from(2);
            }
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: category={} {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
