//! Experiment orchestration: seeding, optional single-agent pretraining,
//! the main training phase, evaluation, and all on-disk artifacts.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::learner::{train, Population, TrainConfig, TrainLog};
use crate::qnet::JointModel;

use super::config::{Mode, RunConfig};
use super::csvio::{fmt_f64, write_csv};
use super::eval::{evaluate, rollout_trajectories, write_eval_report, write_trajectories, EvalReport};

/// Seeds for the distinct random streams of one run, derived from the
/// config's master seed in a fixed order.
struct RunSeeds {
    model: u64,
    pretrain: Vec<u64>,
    train: u64,
    eval: u64,
    trajectories: u64,
    gate_reset: u64,
}

impl RunSeeds {
    fn derive(master: u64, n_agents: usize) -> Self {
        let mut seeder = StdRng::seed_from_u64(master);
        RunSeeds {
            model: seeder.gen(),
            pretrain: (0..n_agents).map(|_| seeder.gen()).collect(),
            train: seeder.gen(),
            eval: seeder.gen(),
            trajectories: seeder.gen(),
            gate_reset: seeder.gen(),
        }
    }
}

fn population_of(cfg: &RunConfig) -> Population {
    Population::new(cfg.scene.clone(), cfg.observation, cfg.env)
}

/// Trains a model per the configuration. Joint mode first pretrains each
/// agent on single-class scenes, then runs the joint phase; single mode is
/// one phase without channels. Returns the trained model, the main-phase
/// log, and the pretrain logs. A training abort (non-finite loss) dumps the
/// model state to `abort_dump` when given.
pub fn train_model(
    cfg: &RunConfig,
    abort_dump: Option<&Path>,
) -> Result<(JointModel, TrainLog, Vec<TrainLog>)> {
    cfg.validate()?;
    let seeds = RunSeeds::derive(cfg.master_seed(), cfg.scene.num_classes);
    let mut model = JointModel::new(cfg.model_config(), &mut StdRng::seed_from_u64(seeds.model))?;

    let run_phase = |model: &mut JointModel,
                         population: &Population,
                         phase_cfg: &TrainConfig,
                         seed: u64|
     -> Result<TrainLog> {
        let mut rng = StdRng::seed_from_u64(seed);
        match train(model, population, phase_cfg, &mut rng) {
            Err(Error::Training(msg)) => {
                let msg = match abort_dump {
                    Some(path) if model.save_checkpoint(path).is_ok() => {
                        format!("{msg} (checkpoint dumped to {})", path.display())
                    }
                    _ => msg,
                };
                Err(Error::Training(msg))
            }
            other => other,
        }
    };

    let mut pretrain_logs = Vec::new();
    if cfg.mode == Mode::Joint {
        let pretrain_episodes = cfg.train.resolved_pretrain_episodes();
        if pretrain_episodes > 0 {
            let pre_cfg = TrainConfig {
                episodes: pretrain_episodes,
                ..cfg.train.clone()
            };
            for agent in 0..cfg.scene.num_classes {
                let population = population_of(cfg).with_forced_classes(vec![agent]);
                pretrain_logs.push(run_phase(
                    &mut model,
                    &population,
                    &pre_cfg,
                    seeds.pretrain[agent],
                )?);
            }
            // Gates belong to the joint architecture, not to the pretrained
            // single agents: pretraining drives them toward 1 (a free value
            // scale with no messages to weigh), which would also kill the
            // (1-g)-scaled message gradients. Joint training starts them
            // fresh alongside the random cross connections.
            model.reset_gates(&mut StdRng::seed_from_u64(seeds.gate_reset));
            model.sync_target();
        }
    }

    let log = run_phase(&mut model, &population_of(cfg), &cfg.train, seeds.train)?;
    Ok((model, log, pretrain_logs))
}

pub fn write_train_log(log: &TrainLog, n_agents: usize, path: &Path) -> Result<()> {
    let mut header: Vec<String> = vec!["episode".into(), "mean_loss".into()];
    for i in 0..n_agents {
        header.push(format!("reward_a{i}"));
    }
    for i in 0..n_agents {
        header.push(format!("success_a{i}"));
    }
    header.push("steps_used".into());
    for i in 0..n_agents {
        header.push(format!("gate_a{i}"));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        path,
        &header_refs,
        log.episodes.iter().map(|e| {
            let mut row = vec![e.episode.to_string(), fmt_f64(e.mean_loss)];
            row.extend(e.rewards.iter().map(|&r| fmt_f64(r)));
            row.extend(e.successes.iter().map(|&s| u8::from(s).to_string()));
            row.push(e.steps_used.to_string());
            row.extend(e.mean_gates.iter().map(|&g| fmt_f64(g)));
            row
        }),
    )
}

fn write_manifest(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let text = format!(
        "artifact cosearch {}\nseed {}\nmode {}\nconfig config.resolved.toml\ntimestamp {}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.rng_seed,
        cfg.mode,
        timestamp
    );
    let path = out_dir.join("manifest.txt");
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Runs the full experiment: train, checkpoint, logs, evaluation report,
/// sampled trajectories, and the reproducibility manifest.
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let echo = cfg.to_toml_string()?;
    let echo_path = out_dir.join("config.resolved.toml");
    fs::write(&echo_path, echo).map_err(|e| Error::io(echo_path, e))?;

    let seeds = RunSeeds::derive(cfg.master_seed(), cfg.scene.num_classes);
    let n_agents = cfg.scene.num_classes;

    let (model, log, pretrain_logs) = train_model(cfg, Some(&out_dir.join("abort.ckpt")))?;

    for (agent, pre_log) in pretrain_logs.iter().enumerate() {
        write_train_log(pre_log, n_agents, &out_dir.join(format!("pretrain_a{agent}_log.csv")))?;
    }
    write_train_log(&log, n_agents, &out_dir.join("train_log.csv"))?;
    model.save_checkpoint(&out_dir.join("checkpoint.ckpt"))?;

    let population = population_of(cfg);
    let mut eval_rng = StdRng::seed_from_u64(seeds.eval);
    let report = evaluate(
        &model,
        &population,
        cfg.eval.episodes,
        cfg.eval.iou_threshold,
        &mut eval_rng,
    )?;
    write_eval_report(&report, out_dir)?;

    let mut traj_rng = StdRng::seed_from_u64(seeds.trajectories);
    let rows = rollout_trajectories(&model, &population, cfg.eval.trajectory_episodes, &mut traj_rng)?;
    write_trajectories(&rows, &out_dir.join("trajectories.csv"))?;

    write_manifest(cfg, out_dir)?;
    Ok(report)
}

/// Consistency check between a loaded checkpoint and a run configuration.
pub fn check_model_matches(cfg: &RunConfig, model: &JointModel) -> Result<()> {
    let expected_input = cfg.observation.state_len();
    let mc = model.config();
    if mc.input_dim != expected_input || mc.n_agents != cfg.scene.num_classes {
        return Err(Error::Checkpoint(format!(
            "checkpoint shape mismatch: model has {} agents with input {}, config implies {} agents with input {}",
            mc.n_agents, mc.input_dim, cfg.scene.num_classes, expected_input
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CompareRow {
    pub class: usize,
    pub accuracy_joint: f64,
    pub accuracy_single: f64,
    pub delta: f64,
}

/// Evaluates two checkpoints on the same scene stream and reports per-class
/// accuracy deltas (joint minus single).
pub fn compare_checkpoints(
    joint_path: &Path,
    single_path: &Path,
    cfg: &RunConfig,
    episodes: usize,
) -> Result<Vec<CompareRow>> {
    let joint = JointModel::load_checkpoint(joint_path)?;
    let single = JointModel::load_checkpoint(single_path)?;
    check_model_matches(cfg, &joint)?;
    check_model_matches(cfg, &single)?;

    let seeds = RunSeeds::derive(cfg.master_seed(), cfg.scene.num_classes);
    let population = population_of(cfg);
    let report_joint = evaluate(
        &joint,
        &population,
        episodes,
        cfg.eval.iou_threshold,
        &mut StdRng::seed_from_u64(seeds.eval),
    )?;
    let report_single = evaluate(
        &single,
        &population,
        episodes,
        cfg.eval.iou_threshold,
        &mut StdRng::seed_from_u64(seeds.eval),
    )?;

    Ok((0..cfg.scene.num_classes)
        .map(|class| CompareRow {
            class,
            accuracy_joint: report_joint.accuracy(class),
            accuracy_single: report_single.accuracy(class),
            delta: report_joint.accuracy(class) - report_single.accuracy(class),
        })
        .collect())
}

pub fn write_compare(rows: &[CompareRow], path: &Path) -> Result<()> {
    write_csv(
        path,
        &["class", "accuracy_joint", "accuracy_single", "delta"],
        rows.iter().map(|r| {
            vec![
                r.class.to_string(),
                fmt_f64(r.accuracy_joint),
                fmt_f64(r.accuracy_single),
                fmt_f64(r.delta),
            ]
        }),
    )
}
