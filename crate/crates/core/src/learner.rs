//! The training loop: ε-greedy joint exploitation sampling, per-agent and
//! per-channel replay memories, TD targets against frozen target copies, and
//! the interleaved actual/virtual update steps with trunk weight copies.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::rc::Rc;

use rand::rngs::StdRng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{
    generate_scene, generate_scene_with_classes, AgentState, EnvParams, EpisodeState,
    ObservationConfig, SceneSpec,
};
use crate::error::{Error, Result};
use crate::geometry::{Action, NUM_ACTIONS};
use crate::qnet::{GradRoute, JointModel};

/// Success threshold used for train-log bookkeeping and evaluation defaults.
pub const SUCCESS_IOU: f64 = 0.5;

/// Peer snapshots stored alongside a transition: the sender's state when the
/// action was chosen and at the next step.
#[derive(Debug, Clone)]
pub struct PeerSnapshot {
    pub state: AgentState,
    pub next_state: AgentState,
}

/// One stored step of one agent.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: AgentState,
    pub action: usize,
    pub reward: f64,
    pub next_state: AgentState,
    pub terminal: bool,
    /// Sender snapshots, present only when the scene contains the sender's
    /// class.
    pub peers: BTreeMap<usize, PeerSnapshot>,
    /// Classes present in the originating scene (provenance tag).
    pub scene_classes: Vec<usize>,
}

impl Transition {
    pub fn from_both_class_scene(&self, n_classes: usize) -> bool {
        self.scene_classes.len() == n_classes
    }
}

/// Bounded FIFO of transitions with uniform sampling with replacement.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    buf: VecDeque<Rc<Transition>>,
    capacity: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        ReplayMemory {
            buf: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
        }
    }

    pub fn push(&mut self, t: Rc<Transition>) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn sample(&self, batch_size: usize, rng: &mut StdRng) -> Vec<Rc<Transition>> {
        if self.buf.is_empty() {
            return Vec::new();
        }
        (0..batch_size)
            .map(|_| Rc::clone(&self.buf[rng.gen_range(0..self.buf.len())]))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Rc<Transition>> {
        self.buf.iter()
    }
}

/// Hyperparameters of the training loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the episode budget over which ε anneals linearly.
    pub epsilon_fraction: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Target sync period C, counted in gradient steps.
    pub target_sync_period: usize,
    pub replay_capacity: usize,
    pub episodes: usize,
    /// Episodes of per-agent single-class pretraining before a joint run;
    /// `None` resolves to 40% of `episodes`.
    pub pretrain_episodes: Option<usize>,
    /// Check trunk bit-identity after every copy step.
    pub verify_weight_sync: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.9,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_fraction: 0.3,
            learning_rate: 1e-3,
            batch_size: 32,
            target_sync_period: 500,
            replay_capacity: 20_000,
            episodes: 2000,
            pretrain_episodes: None,
            verify_weight_sync: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, reason: String| Error::Config {
            field: format!("train.{f}"),
            reason,
        };
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(field("gamma", format!("must lie in [0,1], got {}", self.gamma)));
        }
        for (name, v) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(field(name, format!("must lie in [0,1], got {v}")));
            }
        }
        if self.epsilon_end > self.epsilon_start {
            return Err(field(
                "epsilon_end",
                format!(
                    "must not exceed epsilon_start ({} > {})",
                    self.epsilon_end, self.epsilon_start
                ),
            ));
        }
        if !(self.epsilon_fraction > 0.0 && self.epsilon_fraction <= 1.0) {
            return Err(field(
                "epsilon_fraction",
                format!("must lie in (0,1], got {}", self.epsilon_fraction),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(field(
                "learning_rate",
                format!("must be > 0, got {}", self.learning_rate),
            ));
        }
        if self.batch_size == 0 {
            return Err(field("batch_size", "must be ≥ 1".into()));
        }
        if self.target_sync_period == 0 {
            return Err(field("target_sync_period", "must be ≥ 1".into()));
        }
        if self.replay_capacity == 0 {
            return Err(field("replay_capacity", "must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Linear ε schedule: `epsilon_start` at episode 0 down to `epsilon_end`
    /// after `epsilon_fraction` of the budget, constant afterwards.
    pub fn epsilon_at(&self, episode: usize, total_episodes: usize) -> f64 {
        let cutoff = self.epsilon_fraction * total_episodes as f64;
        if cutoff <= 0.0 {
            return self.epsilon_end;
        }
        let progress = episode as f64 / cutoff;
        if progress >= 1.0 {
            return self.epsilon_end;
        }
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * progress
    }

    pub fn resolved_pretrain_episodes(&self) -> usize {
        self.pretrain_episodes.unwrap_or(self.episodes * 2 / 5)
    }
}

/// The environment population a training run draws episodes from.
#[derive(Debug, Clone)]
pub struct Population {
    pub scene_spec: SceneSpec,
    pub observation: ObservationConfig,
    pub env: EnvParams,
    /// When set, every scene contains exactly these classes instead of
    /// sampling through `p_both` (used for single-class pretraining).
    pub forced_classes: Option<Vec<usize>>,
}

impl Population {
    pub fn new(scene_spec: SceneSpec, observation: ObservationConfig, env: EnvParams) -> Self {
        Population {
            scene_spec,
            observation,
            env,
            forced_classes: None,
        }
    }

    pub fn with_forced_classes(mut self, classes: Vec<usize>) -> Self {
        self.forced_classes = Some(classes);
        self
    }
}

/// ε-greedy joint sampling: per live agent, a uniform random action with
/// probability ε, otherwise the argmax of the joint Q (own head plus gated
/// messages from every sender with an available state). Ties break to the
/// lowest action code.
pub fn select_actions(
    model: &JointModel,
    states: &[Option<&AgentState>],
    live: &[bool],
    epsilon: f64,
    rng: &mut StdRng,
) -> Result<Vec<Option<Action>>> {
    let mut out = Vec::with_capacity(live.len());
    for agent in 0..live.len() {
        if !live[agent] {
            out.push(None);
            continue;
        }
        let action = if rng.gen::<f64>() < epsilon {
            Action::from_code(rng.gen_range(0..NUM_ACTIONS))?
        } else {
            Action::from_code(model.q_forward(agent, states)?.argmax())?
        };
        out.push(Some(action));
    }
    Ok(out)
}

/// TD target `y = r`, or `r + γ · max_a' Q̂(s', a')` with the target network,
/// evaluated jointly over the stored peer next-states (single-agent form
/// when there are none).
pub fn td_target(
    model: &JointModel,
    receiver: usize,
    reward: f64,
    transition: &Transition,
    gamma: f64,
) -> Result<f64> {
    if transition.terminal {
        return Ok(reward);
    }
    let mut states: Vec<Option<&AgentState>> = vec![None; model.config().n_agents];
    states[receiver] = Some(&transition.next_state);
    for (j, peer) in &transition.peers {
        states[*j] = Some(&peer.next_state);
    }
    let target = model.q_forward_target(receiver, &states)?;
    Ok(reward + gamma * target.max_q())
}

fn joint_states<'a>(
    n_agents: usize,
    receiver: usize,
    t: &'a Transition,
) -> Vec<Option<&'a AgentState>> {
    let mut states: Vec<Option<&AgentState>> = vec![None; n_agents];
    states[receiver] = Some(&t.state);
    for (j, peer) in &t.peers {
        states[*j] = Some(&peer.state);
    }
    states
}

/// One SGD step for agent `i` on a minibatch from its own pool: the mean
/// squared TD error through the joint forward, applied to the agent's own
/// trunk, head, and gate only. Returns the pre-step loss, or `None` on an
/// empty batch.
pub fn train_step_actual(
    model: &mut JointModel,
    i: usize,
    batch: &[Rc<Transition>],
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    train_step(model, i, batch, cfg, None)
}

/// One SGD step for the cross channel `sender → receiver` on a minibatch
/// from the channel's pool: the same TD objective, with gradients routed
/// into the channel's message weights and its trunk copy, followed by the
/// copy of the trunk back to the actual sender.
pub fn train_step_virtual(
    model: &mut JointModel,
    sender: usize,
    receiver: usize,
    batch: &[Rc<Transition>],
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    for t in batch {
        if !t.peers.contains_key(&sender) {
            return Err(Error::Training(format!(
                "replay routing bug: transition in pool {sender} → {receiver} lacks the sender snapshot"
            )));
        }
    }
    let loss = train_step(model, receiver, batch, cfg, Some(sender))?;
    if loss.is_some() {
        model.copy_back(sender, receiver)?;
    }
    Ok(loss)
}

fn train_step(
    model: &mut JointModel,
    receiver: usize,
    batch: &[Rc<Transition>],
    cfg: &TrainConfig,
    virtual_sender: Option<usize>,
) -> Result<Option<f64>> {
    if batch.is_empty() {
        return Ok(None);
    }
    let n_agents = model.config().n_agents;
    let route = match virtual_sender {
        Some(j) => GradRoute::SenderOnly(j),
        None => GradRoute::OwnOnly,
    };
    let scale = 2.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    for t in batch {
        let y = td_target(model, receiver, t.reward, t, cfg.gamma)?;
        let states = joint_states(n_agents, receiver, t);
        let cache = model.q_forward(receiver, &states)?;
        let td = cache.q()[t.action] - y;
        loss_sum += td * td;
        model.q_backward(&cache, t.action, scale * td, route)?;
    }
    model.sgd(cfg.learning_rate)?;
    Ok(Some(loss_sum / batch.len() as f64))
}

/// Per-episode training log row. Rewards and gates are `NaN` for agents
/// whose class was absent from the episode's scene.
#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub episode: usize,
    pub mean_loss: f64,
    pub rewards: Vec<f64>,
    pub successes: Vec<bool>,
    pub steps_used: usize,
    pub mean_gates: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub episodes: Vec<EpisodeLog>,
    pub grad_steps: usize,
}

/// The training loop with its replay state, open for inspection after a
/// run.
pub struct Trainer<'m> {
    model: &'m mut JointModel,
    population: Population,
    cfg: TrainConfig,
    actual_pools: Vec<ReplayMemory>,
    cross_pools: BTreeMap<(usize, usize), ReplayMemory>,
    grad_steps: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut JointModel, population: Population, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        population.scene_spec.validate()?;
        population.observation.validate()?;
        population.env.validate()?;
        let n_agents = model.config().n_agents;
        if population.scene_spec.num_classes != n_agents {
            return Err(Error::InvalidArgument(format!(
                "scene population has {} classes but the model has {} agents",
                population.scene_spec.num_classes, n_agents
            )));
        }
        let actual_pools = (0..n_agents)
            .map(|_| ReplayMemory::new(cfg.replay_capacity))
            .collect();
        let cross_pools = model
            .channel_pairs()
            .into_iter()
            .map(|pair| (pair, ReplayMemory::new(cfg.replay_capacity)))
            .collect();
        Ok(Trainer {
            model,
            population,
            cfg,
            actual_pools,
            cross_pools,
            grad_steps: 0,
        })
    }

    pub fn model(&self) -> &JointModel {
        self.model
    }

    pub fn actual_pool(&self, agent: usize) -> &ReplayMemory {
        &self.actual_pools[agent]
    }

    pub fn cross_pool(&self, sender: usize, receiver: usize) -> Option<&ReplayMemory> {
        self.cross_pools.get(&(sender, receiver))
    }

    pub fn cross_pools(&self) -> impl Iterator<Item = (&(usize, usize), &ReplayMemory)> {
        self.cross_pools.iter()
    }

    /// Runs `cfg.episodes` episodes, mutating the model in place.
    pub fn run(&mut self, rng: &mut StdRng) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        for episode in 0..self.cfg.episodes {
            let row = self.run_episode(episode, rng)?;
            log.episodes.push(row);
        }
        log.grad_steps = self.grad_steps;
        Ok(log)
    }

    fn run_episode(&mut self, episode: usize, rng: &mut StdRng) -> Result<EpisodeLog> {
        let n_agents = self.model.config().n_agents;
        let epsilon = self.cfg.epsilon_at(episode, self.cfg.episodes);
        let scene = match &self.population.forced_classes {
            Some(classes) => {
                generate_scene_with_classes(&self.population.scene_spec, classes, rng)?
            }
            None => generate_scene(&self.population.scene_spec, rng)?,
        };
        let scene_classes = scene.present_classes();
        let ep_seed: u64 = rng.gen();
        let mut ep = EpisodeState::new(
            scene,
            self.population.observation,
            self.population.env,
            n_agents,
            ep_seed,
        );

        let mut rewards = vec![0.0; n_agents];
        let mut gate_sums = vec![0.0; n_agents];
        let mut gate_counts = vec![0usize; n_agents];
        let mut losses: Vec<f64> = Vec::new();

        while !ep.all_done() {
            let states = ep.current_states();
            let state_refs: Vec<Option<&AgentState>> = states.iter().map(Option::as_ref).collect();
            let live: Vec<bool> = (0..n_agents)
                .map(|i| ep.is_present(i) && !ep.is_done(i))
                .collect();

            // gate statistic alongside selection
            for i in 0..n_agents {
                if live[i] {
                    let f = self.model.q_forward(i, &state_refs)?;
                    gate_sums[i] += f.gate();
                    gate_counts[i] += 1;
                }
            }
            let actions = select_actions(self.model, &state_refs, &live, epsilon, rng)?;
            let outcomes = ep.env_step(&actions)?;

            for i in 0..n_agents {
                if !live[i] {
                    continue;
                }
                let reward = outcomes[i].reward.expect("live agent has a reward");
                rewards[i] += reward;
                let mut peers = BTreeMap::new();
                for j in self.model.senders_into(i) {
                    if ep.scene.has_class(j) {
                        peers.insert(
                            j,
                            PeerSnapshot {
                                state: states[j].clone().expect("present peer has a state"),
                                next_state: outcomes[j]
                                    .state
                                    .clone()
                                    .expect("present peer has a next state"),
                            },
                        );
                    }
                }
                let transition = Rc::new(Transition {
                    state: states[i].clone().expect("live agent has a state"),
                    action: actions[i].expect("live agent acted").code(),
                    reward,
                    next_state: outcomes[i].state.clone().expect("live agent has a next state"),
                    terminal: outcomes[i].done,
                    peers,
                    scene_classes: scene_classes.clone(),
                });
                self.actual_pools[i].push(Rc::clone(&transition));
                for j in self.model.senders_into(i) {
                    if ep.scene.has_class(j) {
                        self.cross_pools
                            .get_mut(&(j, i))
                            .expect("channel pool exists")
                            .push(Rc::clone(&transition));
                    }
                }
            }

            // interleaved updates for every agent that acted this step
            for i in 0..n_agents {
                if !live[i] {
                    continue;
                }
                let batch = self.actual_pools[i].sample(self.cfg.batch_size, rng);
                if let Some(loss) = train_step_actual(self.model, i, &batch, &self.cfg)? {
                    check_loss(loss, episode)?;
                    losses.push(loss);
                    self.bump_grad_step();
                }
                self.model.copy_shared(i)?;
                if self.cfg.verify_weight_sync {
                    verify_out_channels(self.model, i)?;
                }
                for j in self.model.senders_into(i) {
                    let batch = self.cross_pools[&(j, i)].sample(self.cfg.batch_size, rng);
                    if let Some(loss) = train_step_virtual(self.model, j, i, &batch, &self.cfg)? {
                        check_loss(loss, episode)?;
                        losses.push(loss);
                        self.bump_grad_step();
                        if self.cfg.verify_weight_sync && !self.model.trunk_in_sync(j, i) {
                            return Err(Error::Training(format!(
                                "trunk copy {j} → {i} lost bit-identity after copy_back"
                            )));
                        }
                    }
                }
            }
        }

        let mean_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        Ok(EpisodeLog {
            episode,
            mean_loss,
            rewards: (0..n_agents)
                .map(|i| if ep.is_present(i) { rewards[i] } else { f64::NAN })
                .collect(),
            successes: (0..n_agents)
                .map(|i| ep.has_triggered(i) && ep.current_iou(i) >= SUCCESS_IOU)
                .collect(),
            steps_used: ep.t(),
            mean_gates: (0..n_agents)
                .map(|i| {
                    if gate_counts[i] > 0 {
                        gate_sums[i] / gate_counts[i] as f64
                    } else {
                        f64::NAN
                    }
                })
                .collect(),
        })
    }

    fn bump_grad_step(&mut self) {
        self.grad_steps += 1;
        if self.grad_steps % self.cfg.target_sync_period == 0 {
            self.model.sync_target();
        }
    }
}

/// Runs the full training loop over `cfg.episodes` episodes drawn from the
/// population: joint ε-greedy sampling, storage into per-agent and
/// per-channel pools (cross pools only from scenes containing the sender's
/// class), one actual update per live agent per step, the trunk copy to its
/// out-channels, and one virtual update per incoming channel with the copy
/// back to the sender. Target copies sync every `target_sync_period`
/// gradient steps.
pub fn train(
    model: &mut JointModel,
    population: &Population,
    cfg: &TrainConfig,
    rng: &mut StdRng,
) -> Result<TrainLog> {
    Trainer::new(model, population.clone(), cfg.clone())?.run(rng)
}

fn check_loss(loss: f64, episode: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!(
            "non-finite TD loss at episode {episode}"
        )))
    }
}

fn verify_out_channels(model: &JointModel, sender: usize) -> Result<()> {
    for (j, i) in model.channel_pairs() {
        if j == sender && !model.trunk_in_sync(j, i) {
            return Err(Error::Training(format!(
                "trunk copy {j} → {i} lost bit-identity after copy_shared"
            )));
        }
    }
    Ok(())
}
