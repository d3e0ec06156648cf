//! Greedy evaluation rollouts and the derived metrics: localization
//! accuracy, recall as a function of attended regions, steps-to-detection
//! histograms, and gate traces.

use std::collections::BTreeMap;
use std::path::Path;

use rand::rngs::StdRng;
use rand::Rng;

use crate::environment::{generate_scene, generate_scene_with_classes, AgentState, EpisodeState};
use crate::error::Result;
use crate::geometry::iou;
use crate::learner::{select_actions, Population};
use crate::qnet::JointModel;

use super::csvio::{fmt_f64, write_csv};

/// Per-class evaluation metrics.
#[derive(Debug, Clone)]
pub struct ClassReport {
    pub class: usize,
    /// Episodes in which this class was present.
    pub episodes: usize,
    /// Fraction of episodes with a trigger at IoU ≥ threshold.
    pub accuracy: f64,
    /// `recall_at_k[k-1]`: fraction of episodes where any of the first `k`
    /// attended boxes reached the IoU threshold. The initial full-scene box
    /// is the first attended region.
    pub recall_at_k: Vec<f64>,
    /// Trigger-step histogram over successful detections.
    pub steps_hist: BTreeMap<usize, usize>,
    /// Median steps to a successful detection.
    pub median_steps: f64,
    pub mean_gate: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub n_episodes: usize,
    pub iou_threshold: f64,
    pub max_steps: usize,
    pub per_class: Vec<ClassReport>,
    /// `gate_trace[agent][t]` = (mean gate at step t, samples).
    pub gate_trace: Vec<Vec<(f64, usize)>>,
}

impl EvalReport {
    pub fn accuracy(&self, class: usize) -> f64 {
        self.per_class[class].accuracy
    }

    pub fn recall_curve(&self, class: usize) -> &[f64] {
        &self.per_class[class].recall_at_k
    }
}

/// Runs `n_episodes` greedy rollouts of the model over the population and
/// aggregates the evaluation metrics at the given IoU threshold.
pub fn evaluate(
    model: &JointModel,
    population: &Population,
    n_episodes: usize,
    iou_threshold: f64,
    rng: &mut StdRng,
) -> Result<EvalReport> {
    let n_agents = model.config().n_agents;
    let max_steps = population.env.max_steps;

    let mut class_episodes = vec![0usize; n_agents];
    let mut class_hits = vec![0usize; n_agents];
    let mut recall_counts = vec![vec![0usize; max_steps]; n_agents];
    let mut steps_hist: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); n_agents];
    let mut gate_sum = vec![0.0; n_agents];
    let mut gate_n = vec![0usize; n_agents];
    let mut gate_trace = vec![vec![(0.0, 0usize); max_steps]; n_agents];

    for _ in 0..n_episodes {
        let scene = match &population.forced_classes {
            Some(classes) => generate_scene_with_classes(&population.scene_spec, classes, rng)?,
            None => generate_scene(&population.scene_spec, rng)?,
        };
        let ep_seed: u64 = rng.gen();
        let mut ep = EpisodeState::new(
            scene,
            population.observation,
            population.env,
            n_agents,
            ep_seed,
        );

        // first attended region is the initial box (k = 1)
        let mut first_hit: Vec<Option<usize>> = (0..n_agents)
            .map(|i| {
                if !ep.is_present(i) {
                    return None;
                }
                let g = ep.scene.ground_truth[i].unwrap();
                (iou(&ep.current_box(i), &g) >= iou_threshold).then_some(1)
            })
            .collect();
        let mut attended = vec![1usize; n_agents];

        while !ep.all_done() {
            let t = ep.t();
            let states = ep.current_states();
            let state_refs: Vec<Option<&AgentState>> = states.iter().map(Option::as_ref).collect();
            let live: Vec<bool> = (0..n_agents)
                .map(|i| ep.is_present(i) && !ep.is_done(i))
                .collect();
            for i in 0..n_agents {
                if live[i] {
                    let gate = model.q_forward(i, &state_refs)?.gate();
                    gate_sum[i] += gate;
                    gate_n[i] += 1;
                    gate_trace[i][t].0 += gate;
                    gate_trace[i][t].1 += 1;
                }
            }
            let actions = select_actions(model, &state_refs, &live, 0.0, rng)?;
            ep.env_step(&actions)?;
            for i in 0..n_agents {
                // every transform action attends one more region; the
                // trigger stays on the current box and k is capped at T
                let moved = matches!(actions[i], Some(a) if !a.is_trigger());
                if moved && attended[i] < max_steps {
                    attended[i] += 1;
                    if first_hit[i].is_none() {
                        let g = ep.scene.ground_truth[i].unwrap();
                        if iou(&ep.current_box(i), &g) >= iou_threshold {
                            first_hit[i] = Some(attended[i]);
                        }
                    }
                }
            }
        }

        for i in 0..n_agents {
            if !ep.is_present(i) {
                continue;
            }
            class_episodes[i] += 1;
            if let Some(k0) = first_hit[i] {
                for k in k0..=max_steps {
                    recall_counts[i][k - 1] += 1;
                }
            }
            if ep.has_triggered(i) && ep.current_iou(i) >= iou_threshold {
                class_hits[i] += 1;
                *steps_hist[i].entry(ep.steps_taken(i)).or_insert(0) += 1;
            }
        }
    }

    let per_class = (0..n_agents)
        .map(|i| {
            let n = class_episodes[i];
            let frac = |c: usize| if n > 0 { c as f64 / n as f64 } else { 0.0 };
            ClassReport {
                class: i,
                episodes: n,
                accuracy: frac(class_hits[i]),
                recall_at_k: recall_counts[i].iter().map(|&c| frac(c)).collect(),
                median_steps: median_of_hist(&steps_hist[i]),
                steps_hist: steps_hist[i].clone(),
                mean_gate: if gate_n[i] > 0 {
                    gate_sum[i] / gate_n[i] as f64
                } else {
                    f64::NAN
                },
            }
        })
        .collect();

    Ok(EvalReport {
        n_episodes,
        iou_threshold,
        max_steps,
        per_class,
        gate_trace,
    })
}

fn median_of_hist(hist: &BTreeMap<usize, usize>) -> f64 {
    let total: usize = hist.values().sum();
    if total == 0 {
        return f64::NAN;
    }
    let expanded: Vec<usize> = hist
        .iter()
        .flat_map(|(&steps, &count)| std::iter::repeat(steps).take(count))
        .collect();
    if total % 2 == 1 {
        expanded[total / 2] as f64
    } else {
        (expanded[total / 2 - 1] + expanded[total / 2]) as f64 / 2.0
    }
}

/// Writes the four evaluation CSVs for a report.
pub fn write_eval_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    write_csv(
        &out_dir.join("eval_summary.csv"),
        &["class", "episodes", "accuracy", "median_steps", "mean_gate"],
        report.per_class.iter().map(|c| {
            vec![
                c.class.to_string(),
                c.episodes.to_string(),
                fmt_f64(c.accuracy),
                fmt_f64(c.median_steps),
                fmt_f64(c.mean_gate),
            ]
        }),
    )?;
    write_csv(
        &out_dir.join("eval_recall.csv"),
        &["class", "k", "recall"],
        report.per_class.iter().flat_map(|c| {
            c.recall_at_k
                .iter()
                .enumerate()
                .map(|(idx, &r)| vec![c.class.to_string(), (idx + 1).to_string(), fmt_f64(r)])
                .collect::<Vec<_>>()
        }),
    )?;
    write_csv(
        &out_dir.join("eval_steps.csv"),
        &["class", "steps", "count"],
        report.per_class.iter().flat_map(|c| {
            c.steps_hist
                .iter()
                .map(|(&steps, &count)| {
                    vec![c.class.to_string(), steps.to_string(), count.to_string()]
                })
                .collect::<Vec<_>>()
        }),
    )?;
    write_csv(
        &out_dir.join("eval_gate.csv"),
        &["agent", "t", "mean_gate", "samples"],
        report.gate_trace.iter().enumerate().flat_map(|(agent, trace)| {
            trace
                .iter()
                .enumerate()
                .filter(|(_, (_, n))| *n > 0)
                .map(|(t, (sum, n))| {
                    vec![
                        agent.to_string(),
                        t.to_string(),
                        fmt_f64(sum / *n as f64),
                        n.to_string(),
                    ]
                })
                .collect::<Vec<_>>()
        }),
    )?;
    Ok(())
}

/// One trajectory record per executed action: the box after the action plus
/// its reward and IoU against the agent's ground truth.
#[derive(Debug, Clone)]
pub struct TrajectoryRow {
    pub episode_id: usize,
    pub t: usize,
    pub agent_id: usize,
    pub action_code: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub reward: f64,
    pub iou: f64,
}

/// Greedy rollouts recorded step by step for plotting.
pub fn rollout_trajectories(
    model: &JointModel,
    population: &Population,
    n_episodes: usize,
    rng: &mut StdRng,
) -> Result<Vec<TrajectoryRow>> {
    let n_agents = model.config().n_agents;
    let mut rows = Vec::new();
    for episode_id in 0..n_episodes {
        let scene = match &population.forced_classes {
            Some(classes) => generate_scene_with_classes(&population.scene_spec, classes, rng)?,
            None => generate_scene(&population.scene_spec, rng)?,
        };
        let ep_seed: u64 = rng.gen();
        let mut ep = EpisodeState::new(
            scene,
            population.observation,
            population.env,
            n_agents,
            ep_seed,
        );
        while !ep.all_done() {
            let states = ep.current_states();
            let state_refs: Vec<Option<&AgentState>> = states.iter().map(Option::as_ref).collect();
            let live: Vec<bool> = (0..n_agents)
                .map(|i| ep.is_present(i) && !ep.is_done(i))
                .collect();
            let actions = select_actions(model, &state_refs, &live, 0.0, rng)?;
            let outcomes = ep.env_step(&actions)?;
            let t = ep.t();
            for i in 0..n_agents {
                if let (Some(action), Some(reward)) = (actions[i], outcomes[i].reward) {
                    let b = ep.current_box(i);
                    rows.push(TrajectoryRow {
                        episode_id,
                        t,
                        agent_id: i,
                        action_code: action.code(),
                        x: b.x,
                        y: b.y,
                        w: b.w,
                        h: b.h,
                        reward,
                        iou: ep.current_iou(i),
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_trajectories(rows: &[TrajectoryRow], path: &Path) -> Result<()> {
    write_csv(
        path,
        &["episode_id", "t", "agent_id", "action_code", "x", "y", "w", "h", "reward", "iou"],
        rows.iter().map(|r| {
            vec![
                r.episode_id.to_string(),
                r.t.to_string(),
                r.agent_id.to_string(),
                r.action_code.to_string(),
                fmt_f64(r.x),
                fmt_f64(r.y),
                fmt_f64(r.w),
                fmt_f64(r.h),
                fmt_f64(r.reward),
                fmt_f64(r.iou),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{EnvParams, ObservationConfig, SceneSpec};
    use crate::qnet::{HeadMode, JointModel, ModelConfig};
    use rand::SeedableRng;

    fn small_population() -> Population {
        Population::new(
            SceneSpec {
                pixel_noise_std: 0.0,
                ..SceneSpec::default()
            },
            ObservationConfig {
                grid_size: 4,
                context_margin: 1.5,
            },
            EnvParams {
                max_steps: 12,
                ..EnvParams::default()
            },
        )
    }

    fn small_model(seed: u64) -> JointModel {
        JointModel::new(
            ModelConfig {
                n_agents: 2,
                input_dim: 4 * 4 + 4 + crate::geometry::HISTORY_ENCODING_LEN,
                hidden_dim: 8,
                head_mode: HeadMode::Linear,
                with_channels: true,
            },
            &mut StdRng::seed_from_u64(seed),
        )
        .unwrap()
    }

    #[test]
    fn empty_eval_yields_an_empty_report() {
        let model = small_model(1);
        let report = evaluate(
            &model,
            &small_population(),
            0,
            0.5,
            &mut StdRng::seed_from_u64(2),
        )
        .unwrap();
        assert_eq!(report.n_episodes, 0);
        for c in &report.per_class {
            assert_eq!(c.episodes, 0);
            assert_eq!(c.accuracy, 0.0);
            assert!(c.recall_at_k.iter().all(|&r| r == 0.0));
        }
    }

    /// Recall-at-1 oracle: with default target sizes the initial full-scene
    /// box can never reach IoU 0.5, because IoU(unit box, g) = area(g) and
    /// the largest target area is far below 0.5.
    #[test]
    fn recall_at_one_matches_geometric_oracle() {
        let pop = small_population();
        let max_area = pop
            .scene_spec
            .size_range
            .iter()
            .map(|&(_, hi)| hi * hi)
            .fold(0.0, f64::max);
        assert!(max_area < 0.5, "oracle premise: max target area {max_area}");

        let model = small_model(3);
        let report = evaluate(&model, &pop, 50, 0.5, &mut StdRng::seed_from_u64(4)).unwrap();
        for c in &report.per_class {
            assert_eq!(c.recall_at_k[0], 0.0);
        }
    }

    #[test]
    fn recall_is_monotone_and_dominates_accuracy() {
        let model = small_model(5);
        let report = evaluate(
            &model,
            &small_population(),
            40,
            0.5,
            &mut StdRng::seed_from_u64(6),
        )
        .unwrap();
        for c in &report.per_class {
            for w in c.recall_at_k.windows(2) {
                assert!(w[0] <= w[1] + 1e-15);
            }
            assert!(c.recall_at_k[report.max_steps - 1] >= c.accuracy);
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let model = small_model(7);
        let run = || {
            let report = evaluate(
                &model,
                &small_population(),
                20,
                0.5,
                &mut StdRng::seed_from_u64(8),
            )
            .unwrap();
            report
                .per_class
                .iter()
                .flat_map(|c| c.recall_at_k.iter().copied())
                .map(f64::to_bits)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trajectories_record_every_action() {
        let model = small_model(9);
        let rows = rollout_trajectories(
            &model,
            &small_population(),
            2,
            &mut StdRng::seed_from_u64(10),
        )
        .unwrap();
        assert!(!rows.is_empty());
        for r in &rows {
            assert!(r.t >= 1);
            assert!(r.action_code < 9);
            assert!((0.0..=1.0).contains(&r.iou));
        }
    }
}
