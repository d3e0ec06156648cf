//! Synthetic joint-search world: scenes with spatially correlated class
//! pairs plus ambiguous distractors, a coarse max-intensity renderer for a
//! box window, and episode stepping for one or more agents.

use rand::rngs::StdRng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    apply_action, encode_history, iou, step_reward, trigger_reward, Action, ActionHistory, Bbox,
    HISTORY_ENCODING_LEN, MIN_SIZE,
};

const PLACEMENT_ATTEMPTS: usize = 100;

/// Standard normal draw via Box–Muller; consumes exactly two uniforms.
pub(crate) fn gaussian(rng: &mut StdRng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generative description of the scene population.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub num_classes: usize,
    /// Per-class `(min, max)` side-length range for target boxes.
    pub size_range: Vec<(f64, f64)>,
    /// Mean of the class-1 center offset relative to the class-0 center.
    pub pair_offset_mean: (f64, f64),
    pub pair_offset_std: f64,
    pub num_distractors: usize,
    pub class_intensities: Vec<f64>,
    pub intensity_jitter_std: f64,
    pub distractor_intensity_range: (f64, f64),
    pub pixel_noise_std: f64,
    /// Probability that a generated scene contains every class; otherwise a
    /// single class is picked uniformly.
    pub p_both: f64,
    /// Offset mixed into the harness-derived scene stream seed.
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_classes: 2,
            // class 0 is large and findable, class 1 small and hard to find
            // without the spatial prior
            size_range: vec![(0.3, 0.5), (0.1, 0.22)],
            pair_offset_mean: (0.0, 0.25),
            pair_offset_std: 0.05,
            num_distractors: 4,
            class_intensities: vec![0.9, 0.5],
            intensity_jitter_std: 0.05,
            distractor_intensity_range: (0.3, 1.0),
            pixel_noise_std: 0.05,
            p_both: 1.0,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, reason: String| Error::Config {
            field: format!("scene.{f}"),
            reason,
        };
        if !(1..=2).contains(&self.num_classes) {
            return Err(field("num_classes", format!("must be 1 or 2, got {}", self.num_classes)));
        }
        if self.size_range.len() != self.num_classes {
            return Err(field(
                "size_range",
                format!("needs one (min,max) pair per class, got {}", self.size_range.len()),
            ));
        }
        for (c, &(lo, hi)) in self.size_range.iter().enumerate() {
            if !(MIN_SIZE..=1.0).contains(&lo) || hi < lo || hi > 1.0 {
                return Err(field(
                    "size_range",
                    format!("class {c} range ({lo}, {hi}) must satisfy {MIN_SIZE} ≤ min ≤ max ≤ 1"),
                ));
            }
        }
        if self.class_intensities.len() != self.num_classes {
            return Err(field(
                "class_intensities",
                format!("needs one value per class, got {}", self.class_intensities.len()),
            ));
        }
        for &v in &self.class_intensities {
            if !(0.0..=1.0).contains(&v) {
                return Err(field("class_intensities", format!("{v} outside [0,1]")));
            }
        }
        let (lo, hi) = self.distractor_intensity_range;
        if !(0.0..=1.0).contains(&lo) || hi < lo || hi > 1.0 {
            return Err(field(
                "distractor_intensity_range",
                format!("({lo}, {hi}) must satisfy 0 ≤ min ≤ max ≤ 1"),
            ));
        }
        for (name, v) in [
            ("pair_offset_std", self.pair_offset_std),
            ("intensity_jitter_std", self.intensity_jitter_std),
            ("pixel_noise_std", self.pixel_noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(field(name, format!("must be ≥ 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.p_both) {
            return Err(field("p_both", format!("must lie in [0,1], got {}", self.p_both)));
        }
        Ok(())
    }
}

/// What an object in a scene is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectKind {
    Target(usize),
    Distractor,
}

#[derive(Debug, Clone)]
pub struct SceneObject {
    pub kind: ObjectKind,
    pub bbox: Bbox,
    pub intensity: f64,
}

/// A generated world: at most one target per class plus distractors.
#[derive(Debug, Clone)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    /// Ground-truth box per class id; `None` when the class is absent.
    pub ground_truth: Vec<Option<Bbox>>,
    pub pixel_noise_std: f64,
}

impl Scene {
    pub fn present_classes(&self) -> Vec<usize> {
        self.ground_truth
            .iter()
            .enumerate()
            .filter_map(|(c, g)| g.map(|_| c))
            .collect()
    }

    pub fn has_class(&self, class_id: usize) -> bool {
        self.ground_truth.get(class_id).is_some_and(|g| g.is_some())
    }

    pub fn contains_all_classes(&self) -> bool {
        self.ground_truth.iter().all(|g| g.is_some())
    }
}

/// Draws a scene from the population. With probability `p_both` every class
/// is present; otherwise one class is picked uniformly.
pub fn generate_scene(spec: &SceneSpec, rng: &mut StdRng) -> Result<Scene> {
    let classes: Vec<usize> = if spec.num_classes == 1 {
        vec![0]
    } else if spec.p_both >= 1.0 || rng.gen::<f64>() < spec.p_both {
        (0..spec.num_classes).collect()
    } else {
        vec![rng.gen_range(0..spec.num_classes)]
    };
    generate_scene_with_classes(spec, &classes, rng)
}

/// Draws a scene containing exactly the given classes.
pub fn generate_scene_with_classes(
    spec: &SceneSpec,
    classes: &[usize],
    rng: &mut StdRng,
) -> Result<Scene> {
    spec.validate()?;
    for attempt in 0.. {
        if attempt >= PLACEMENT_ATTEMPTS {
            return Err(Error::SceneGeneration(format!(
                "could not place correlated targets inside the scene after {PLACEMENT_ATTEMPTS} attempts \
                 (offset mean {:?}, std {})",
                spec.pair_offset_mean, spec.pair_offset_std
            )));
        }
        if let Some(scene) = try_place(spec, classes, rng) {
            return Ok(scene);
        }
    }
    unreachable!()
}

/// One placement attempt. The whole layout is redrawn on failure so the
/// accepted offset distribution stays close to the configured Gaussian.
fn try_place(spec: &SceneSpec, classes: &[usize], rng: &mut StdRng) -> Option<Scene> {
    let mut ground_truth: Vec<Option<Bbox>> = vec![None; spec.num_classes];
    let mut objects = Vec::with_capacity(classes.len() + spec.num_distractors);

    for &class in classes {
        let (lo, hi) = spec.size_range[class];
        let w = sample_range(rng, lo, hi);
        let h = sample_range(rng, lo, hi);
        let bbox = if class == 1 && ground_truth[0].is_some() {
            // correlated placement relative to the class-0 center
            let (ax, ay) = ground_truth[0].unwrap().center();
            let dx = spec.pair_offset_mean.0 + spec.pair_offset_std * gaussian(rng);
            let dy = spec.pair_offset_mean.1 + spec.pair_offset_std * gaussian(rng);
            let b = Bbox::from_center(ax + dx, ay + dy, w, h);
            if !b.inside_unit_scene() {
                return None;
            }
            b
        } else {
            Bbox::new(
                sample_range(rng, 0.0, 1.0 - w),
                sample_range(rng, 0.0, 1.0 - h),
                w,
                h,
            )
        };
        ground_truth[class] = Some(bbox);
        let intensity = (spec.class_intensities[class]
            + spec.intensity_jitter_std * gaussian(rng))
        .clamp(0.0, 1.0);
        objects.push(SceneObject {
            kind: ObjectKind::Target(class),
            bbox,
            intensity,
        });
    }

    for _ in 0..spec.num_distractors {
        // size drawn from a uniformly chosen class range so distractors
        // match target geometry
        let (lo, hi) = spec.size_range[rng.gen_range(0..spec.num_classes)];
        let w = sample_range(rng, lo, hi);
        let h = sample_range(rng, lo, hi);
        let bbox = Bbox::new(
            sample_range(rng, 0.0, 1.0 - w),
            sample_range(rng, 0.0, 1.0 - h),
            w,
            h,
        );
        let (ilo, ihi) = spec.distractor_intensity_range;
        objects.push(SceneObject {
            kind: ObjectKind::Distractor,
            bbox,
            intensity: sample_range(rng, ilo, ihi),
        });
    }

    Some(Scene {
        objects,
        ground_truth,
        pixel_noise_std: spec.pixel_noise_std,
    })
}

fn sample_range(rng: &mut StdRng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Renderer settings: grid resolution and the context margin applied to the
/// window before rasterizing.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationConfig {
    pub grid_size: usize,
    pub context_margin: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        ObservationConfig {
            grid_size: 8,
            context_margin: 1.5,
        }
    }
}

impl ObservationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::Config {
                field: "observation.grid_size".into(),
                reason: format!("must be ≥ 2, got {}", self.grid_size),
            });
        }
        if !(self.context_margin >= 1.0 && self.context_margin.is_finite()) {
            return Err(Error::Config {
                field: "observation.context_margin".into(),
                reason: format!("must be ≥ 1, got {}", self.context_margin),
            });
        }
        Ok(())
    }

    pub fn observation_len(&self) -> usize {
        self.grid_size * self.grid_size + 4
    }

    pub fn state_len(&self) -> usize {
        self.observation_len() + HISTORY_ENCODING_LEN
    }
}

/// Rasterizes the window (expanded by the context margin) into a `G×G`
/// max-intensity grid and appends the window geometry `(x, y, w, h)`.
/// Regions outside the unit scene render as zero.
pub fn render_observation(
    scene: &Scene,
    window: &Bbox,
    cfg: &ObservationConfig,
    rng: &mut StdRng,
) -> Vec<f64> {
    let g = cfg.grid_size;
    let expanded = window.scaled_about_center(cfg.context_margin);
    let cell_w = expanded.w / g as f64;
    let cell_h = expanded.h / g as f64;
    let mut out = Vec::with_capacity(cfg.observation_len());
    for row in 0..g {
        for col in 0..g {
            let cell = Bbox {
                x: expanded.x + col as f64 * cell_w,
                y: expanded.y + row as f64 * cell_h,
                w: cell_w,
                h: cell_h,
            };
            let mut value = 0.0f64;
            for obj in &scene.objects {
                if obj.intensity > value && obj.bbox.intersects(&cell) {
                    value = obj.intensity;
                }
            }
            out.push(value);
        }
    }
    if scene.pixel_noise_std > 0.0 {
        for v in out.iter_mut() {
            *v = (*v + scene.pixel_noise_std * gaussian(rng)).clamp(0.0, 1.0);
        }
    }
    out.extend_from_slice(&[window.x, window.y, window.w, window.h]);
    out
}

/// Network input: rendered observation concatenated with the action-history
/// encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub values: Vec<f64>,
}

impl AgentState {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn make_state(observation: &[f64], history: &ActionHistory) -> AgentState {
    let mut values = Vec::with_capacity(observation.len() + HISTORY_ENCODING_LEN);
    values.extend_from_slice(observation);
    values.extend_from_slice(&encode_history(history));
    AgentState { values }
}

/// Step-level MDP constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    /// Per-action geometric factor.
    pub alpha: f64,
    /// IoU threshold for a rewarded trigger.
    pub trigger_tau: f64,
    /// Trigger reward magnitude.
    pub trigger_eta: f64,
    /// Episode step limit T.
    pub max_steps: usize,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            alpha: crate::geometry::DEFAULT_ALPHA,
            trigger_tau: crate::geometry::DEFAULT_TAU,
            trigger_eta: crate::geometry::DEFAULT_ETA,
            max_steps: 50,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, reason: String| Error::Config {
            field: format!("env.{f}"),
            reason,
        };
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(field("alpha", format!("must lie in (0,1), got {}", self.alpha)));
        }
        if !(self.trigger_tau > 0.0 && self.trigger_tau < 1.0) {
            return Err(field(
                "trigger_tau",
                format!("must lie in (0,1), got {}", self.trigger_tau),
            ));
        }
        if !(self.trigger_eta > 0.0 && self.trigger_eta.is_finite()) {
            return Err(field(
                "trigger_eta",
                format!("must be > 0, got {}", self.trigger_eta),
            ));
        }
        if self.max_steps == 0 {
            return Err(field("max_steps", "must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct AgentSlot {
    /// Whether the agent's class is present in the scene at all.
    present: bool,
    bbox: Bbox,
    history: ActionHistory,
    steps_taken: usize,
    done: bool,
    triggered: bool,
    /// Last rendered state; kept after the agent finishes so peers can keep
    /// reading it as message input.
    last_state: Option<AgentState>,
}

/// Outcome of one environment step for one agent.
#[derive(Debug, Clone)]
pub struct AgentStepOutcome {
    pub state: Option<AgentState>,
    /// `None` for agents that were already done (or absent) before the step.
    pub reward: Option<f64>,
    pub done: bool,
}

/// A running episode over one scene.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub scene: Scene,
    obs_cfg: ObservationConfig,
    env: EnvParams,
    agents: Vec<AgentSlot>,
    t: usize,
    rng: StdRng,
}

impl EpisodeState {
    /// Starts an episode with every present agent's window covering the full
    /// unit scene. `seed` drives the episode's pixel-noise stream.
    pub fn new(
        scene: Scene,
        obs_cfg: ObservationConfig,
        env: EnvParams,
        n_agents: usize,
        seed: u64,
    ) -> Self {
        use rand::SeedableRng;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut agents = Vec::with_capacity(n_agents);
        for class in 0..n_agents {
            let present = scene.has_class(class);
            let mut slot = AgentSlot {
                present,
                bbox: Bbox::full_scene(),
                history: ActionHistory::new(),
                steps_taken: 0,
                done: !present,
                triggered: false,
                last_state: None,
            };
            if present {
                let obs = render_observation(&scene, &slot.bbox, &obs_cfg, &mut rng);
                slot.last_state = Some(make_state(&obs, &slot.history));
            }
            agents.push(slot);
        }
        EpisodeState {
            scene,
            obs_cfg,
            env,
            agents,
            t: 0,
            rng,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn max_steps(&self) -> usize {
        self.env.max_steps
    }

    pub fn is_present(&self, agent: usize) -> bool {
        self.agents[agent].present
    }

    pub fn is_done(&self, agent: usize) -> bool {
        self.agents[agent].done
    }

    pub fn has_triggered(&self, agent: usize) -> bool {
        self.agents[agent].triggered
    }

    pub fn steps_taken(&self, agent: usize) -> usize {
        self.agents[agent].steps_taken
    }

    pub fn all_done(&self) -> bool {
        self.agents.iter().all(|a| a.done)
    }

    pub fn current_box(&self, agent: usize) -> Bbox {
        self.agents[agent].bbox
    }

    /// Current state per agent; `None` for agents whose class is absent.
    /// Finished agents keep broadcasting their final state.
    pub fn current_states(&self) -> Vec<Option<AgentState>> {
        self.agents.iter().map(|a| a.last_state.clone()).collect()
    }

    /// IoU of the agent's current window against its ground truth.
    pub fn current_iou(&self, agent: usize) -> f64 {
        match self.scene.ground_truth.get(agent).copied().flatten() {
            Some(g) => iou(&self.agents[agent].bbox, &g),
            None => 0.0,
        }
    }

    /// Executes one action per live agent. Trigger ends that agent with the
    /// trigger reward; any other action transforms the box and is rewarded
    /// with the sign of the IoU change. At `t = max_steps` every agent is
    /// forcibly done without a trigger reward.
    pub fn env_step(&mut self, actions: &[Option<Action>]) -> Result<Vec<AgentStepOutcome>> {
        if self.all_done() {
            return Err(Error::InvalidArgument("episode is already done".into()));
        }
        if actions.len() != self.agents.len() {
            return Err(Error::shape("env_step actions", self.agents.len(), actions.len()));
        }
        for (i, (slot, action)) in self.agents.iter().zip(actions).enumerate() {
            if slot.done && action.is_some() {
                return Err(Error::InvalidArgument(format!(
                    "agent {i} is already done but received an action"
                )));
            }
            if !slot.done && action.is_none() {
                return Err(Error::InvalidArgument(format!(
                    "live agent {i} is missing an action"
                )));
            }
        }

        let mut rewards: Vec<Option<f64>> = vec![None; self.agents.len()];
        let mut acted: Vec<bool> = vec![false; self.agents.len()];
        for i in 0..self.agents.len() {
            let Some(action) = actions[i] else { continue };
            let gt = self.scene.ground_truth[i].expect("live agent has ground truth");
            let slot = &mut self.agents[i];
            slot.steps_taken += 1;
            if action.is_trigger() {
                rewards[i] = Some(trigger_reward(
                    &slot.bbox,
                    &gt,
                    self.env.trigger_tau,
                    self.env.trigger_eta,
                ));
                slot.done = true;
                slot.triggered = true;
            } else {
                let next = apply_action(&slot.bbox, action, self.env.alpha)?;
                rewards[i] = Some(step_reward(&slot.bbox, &next, &gt));
                slot.bbox = next;
                slot.history.push(action);
                acted[i] = true;
            }
        }

        self.t += 1;
        if self.t >= self.env.max_steps {
            for slot in self.agents.iter_mut() {
                slot.done = true;
            }
        }

        // Re-render only agents whose box or history changed; a trigger
        // leaves the state as it was.
        for i in 0..self.agents.len() {
            if acted[i] {
                let obs = render_observation(
                    &self.scene,
                    &self.agents[i].bbox,
                    &self.obs_cfg,
                    &mut self.rng,
                );
                self.agents[i].last_state = Some(make_state(&obs, &self.agents[i].history));
            }
        }

        Ok((0..self.agents.len())
            .map(|i| AgentStepOutcome {
                state: self.agents[i].last_state.clone(),
                reward: rewards[i],
                done: self.agents[i].done,
            })
            .collect())
    }
}
