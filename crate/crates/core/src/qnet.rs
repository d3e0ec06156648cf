//! Gated cross-connected Q-networks in virtual-agent form: per-agent trunks,
//! own heads with scalar gates, message channels between agents, and the
//! additive joint combination
//!
//! `Q(i) = g(i)·x̄(i) + (1-g(i))·mean_j m(j→i)`.
//!
//! Every cross channel keeps its own copy of the sender's trunk weights; the
//! copies are synchronized by explicit copy steps during training and must
//! compare bit-identical to the sender afterwards.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::rngs::StdRng;
use serde::{Deserialize, Serialize};

use crate::environment::AgentState;
use crate::error::{Error, Result};
use crate::geometry::NUM_ACTIONS;
use crate::numerics::{
    dot, gemv, gemv_transpose_acc, outer_only, sgd_step, sigmoid_scalar, vec_acc, AffineLayer,
    ParameterSet, Tensor,
};

/// How the own head and messages are squashed. `Faithful` applies the sigmoid
/// and bounds outputs in (0,1); `Linear` leaves them unbounded so Q values can
/// reach Bellman targets beyond ±1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Faithful,
    Linear,
}

impl HeadMode {
    /// Substitute for an absent message: the image of a zero pre-activation.
    pub fn neutral(self) -> f64 {
        match self {
            HeadMode::Faithful => 0.5,
            HeadMode::Linear => 0.0,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            HeadMode::Faithful => "faithful",
            HeadMode::Linear => "linear",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "faithful" => Ok(HeadMode::Faithful),
            "linear" => Ok(HeadMode::Linear),
            other => Err(Error::Checkpoint(format!("unknown head_mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_agents: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub head_mode: HeadMode,
    /// Whether cross channels exist at all (joint mode).
    pub with_channels: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::InvalidArgument("model needs at least one agent".into()));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArgument(
                "model dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    fn channel_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        if self.with_channels {
            for receiver in 0..self.n_agents {
                for sender in 0..self.n_agents {
                    if sender != receiver {
                        pairs.push((sender, receiver));
                    }
                }
            }
        }
        pairs
    }
}

#[derive(Debug, Clone)]
struct AgentNames {
    t1w: String,
    t1b: String,
    t2w: String,
    t2b: String,
    hw: String,
    hb: String,
    gw: String,
    gb: String,
}

impl AgentNames {
    fn new(i: usize) -> Self {
        AgentNames {
            t1w: format!("a{i}.trunk.l1.w"),
            t1b: format!("a{i}.trunk.l1.b"),
            t2w: format!("a{i}.trunk.l2.w"),
            t2b: format!("a{i}.trunk.l2.b"),
            hw: format!("a{i}.head.w"),
            hb: format!("a{i}.head.b"),
            gw: format!("a{i}.gate.w"),
            gb: format!("a{i}.gate.b"),
        }
    }
}

#[derive(Debug, Clone)]
struct ChannelNames {
    mw: String,
    mb: String,
    t1w: String,
    t1b: String,
    t2w: String,
    t2b: String,
}

impl ChannelNames {
    fn new(sender: usize, receiver: usize) -> Self {
        let p = format!("c{sender}to{receiver}");
        ChannelNames {
            mw: format!("{p}.msg.w"),
            mb: format!("{p}.msg.b"),
            t1w: format!("{p}.trunk.l1.w"),
            t1b: format!("{p}.trunk.l1.b"),
            t2w: format!("{p}.trunk.l2.w"),
            t2b: format!("{p}.trunk.l2.b"),
        }
    }
}

/// Cached intermediate values of one trunk pass.
#[derive(Debug, Clone)]
struct TrunkCache {
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    feat: Vec<f64>,
}

#[derive(Debug, Clone)]
struct SenderPass {
    sender: usize,
    input: Vec<f64>,
    trunk: TrunkCache,
    msg: Vec<f64>,
}

/// Forward cache of one joint Q evaluation; consumed by [`JointModel::q_backward`].
#[derive(Debug, Clone)]
pub struct QForward {
    version: u64,
    receiver: usize,
    input: Vec<f64>,
    trunk: TrunkCache,
    xbar: Vec<f64>,
    gate: f64,
    senders: Vec<SenderPass>,
    mbar: Vec<f64>,
    q: Vec<f64>,
}

impl QForward {
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn gate(&self) -> f64 {
        self.gate
    }

    pub fn own_head(&self) -> &[f64] {
        &self.xbar
    }

    /// Mean incoming message (or the neutral substitute without senders).
    pub fn message_mean(&self) -> &[f64] {
        &self.mbar
    }

    pub fn receiver(&self) -> usize {
        self.receiver
    }

    pub fn n_senders(&self) -> usize {
        self.senders.len()
    }

    /// Greedy action with ties broken by the lowest action code.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for k in 1..self.q.len() {
            if self.q[k] > self.q[best] {
                best = k;
            }
        }
        best
    }

    pub fn max_q(&self) -> f64 {
        self.q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Which parameters a backward pass accumulates gradients into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradRoute {
    /// Everything the joint forward touched, under actual-agent names.
    All,
    /// Only the receiver's own trunk, head, and gate.
    OwnOnly,
    /// Only the given sender's message weights and its trunk, with trunk
    /// gradients routed into the cross channel's own trunk copy.
    SenderOnly(usize),
}

/// All agents, cross channels, and the target copies of every parameter.
#[derive(Debug, Clone)]
pub struct JointModel {
    cfg: ModelConfig,
    params: ParameterSet,
    target: ParameterSet,
    agent_names: Vec<AgentNames>,
    channel_names: BTreeMap<(usize, usize), ChannelNames>,
    version: u64,
}

impl JointModel {
    /// Fresh model with Glorot-uniform weights; channel trunks start as
    /// copies of their sender's trunk and the target as a copy of the online
    /// parameters.
    pub fn new(cfg: ModelConfig, rng: &mut StdRng) -> Result<Self> {
        cfg.validate()?;
        let agent_names: Vec<AgentNames> = (0..cfg.n_agents).map(AgentNames::new).collect();
        let channel_names: BTreeMap<(usize, usize), ChannelNames> = cfg
            .channel_pairs()
            .into_iter()
            .map(|(s, r)| ((s, r), ChannelNames::new(s, r)))
            .collect();

        let mut params = ParameterSet::new();
        for names in &agent_names {
            let l1 = AffineLayer::glorot(cfg.hidden_dim, cfg.input_dim, rng);
            let l2 = AffineLayer::glorot(cfg.hidden_dim, cfg.hidden_dim, rng);
            let head = AffineLayer::glorot(NUM_ACTIONS, cfg.hidden_dim, rng);
            let gate = AffineLayer::glorot(1, NUM_ACTIONS, rng);
            params.insert(names.t1w.clone(), l1.weight)?;
            params.insert(names.t1b.clone(), l1.bias)?;
            params.insert(names.t2w.clone(), l2.weight)?;
            params.insert(names.t2b.clone(), l2.bias)?;
            params.insert(names.hw.clone(), head.weight)?;
            params.insert(names.hb.clone(), head.bias)?;
            params.insert(names.gw.clone(), gate.weight)?;
            params.insert(names.gb.clone(), gate.bias)?;
        }
        for ((sender, _), names) in &channel_names {
            let msg = AffineLayer::glorot(NUM_ACTIONS, cfg.hidden_dim, rng);
            params.insert(names.mw.clone(), msg.weight)?;
            params.insert(names.mb.clone(), msg.bias)?;
            let src = &agent_names[*sender];
            params.insert(names.t1w.clone(), params.get(&src.t1w).clone())?;
            params.insert(names.t1b.clone(), params.get(&src.t1b).clone())?;
            params.insert(names.t2w.clone(), params.get(&src.t2w).clone())?;
            params.insert(names.t2b.clone(), params.get(&src.t2b).clone())?;
        }

        let target = params.clone();
        Ok(JointModel {
            cfg,
            params,
            target,
            agent_names,
            channel_names,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut ParameterSet {
        self.version += 1;
        &mut self.params
    }

    pub fn target_params(&self) -> &ParameterSet {
        &self.target
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Ordered senders with a channel into `receiver`.
    pub fn senders_into(&self, receiver: usize) -> Vec<usize> {
        (0..self.cfg.n_agents)
            .filter(|&j| self.channel_names.contains_key(&(j, receiver)))
            .collect()
    }

    pub fn agent_trunk_prefix(i: usize) -> String {
        format!("a{i}.trunk.")
    }

    // ------------------------------------------------------------------
    // Forward passes
    // ------------------------------------------------------------------

    fn trunk_cached(
        &self,
        params: &ParameterSet,
        w1: &str,
        b1: &str,
        w2: &str,
        b2: &str,
        input: &[f64],
    ) -> Result<TrunkCache> {
        let l1w = params.get(w1);
        if input.len() != l1w.shape()[1] {
            return Err(Error::shape("trunk input", l1w.shape()[1], input.len()));
        }
        let d = l1w.shape()[0];
        let mut z1 = vec![0.0; d];
        gemv(l1w.values(), params.get(b1).values(), input, &mut z1);
        let a1: Vec<f64> = z1.iter().map(|&v| v.max(0.0)).collect();
        let mut z2 = vec![0.0; d];
        gemv(params.get(w2).values(), params.get(b2).values(), &a1, &mut z2);
        let feat: Vec<f64> = z2.iter().map(|&v| v.max(0.0)).collect();
        Ok(TrunkCache { z1, a1, z2, feat })
    }

    /// Penultimate features of agent `i` for a state.
    pub fn trunk_forward(&self, i: usize, state: &AgentState) -> Result<Tensor> {
        let n = &self.agent_names[i];
        let cache = self.trunk_cached(&self.params, &n.t1w, &n.t1b, &n.t2w, &n.t2b, &state.values)?;
        Ok(Tensor::from_slice(&cache.feat))
    }

    fn head_from_feat(&self, params: &ParameterSet, i: usize, feat: &[f64]) -> (Vec<f64>, f64) {
        let n = &self.agent_names[i];
        let mut zh = vec![0.0; NUM_ACTIONS];
        gemv(params.get(&n.hw).values(), params.get(&n.hb).values(), feat, &mut zh);
        let xbar: Vec<f64> = match self.cfg.head_mode {
            HeadMode::Faithful => zh.iter().map(|&z| sigmoid_scalar(z)).collect(),
            HeadMode::Linear => zh,
        };
        let zg = dot(params.get(&n.gw).values(), &xbar) + params.get(&n.gb).values()[0];
        (xbar, sigmoid_scalar(zg))
    }

    /// Own head of agent `i`: squashed action scores `x̄` and the scalar gate.
    pub fn own_head(&self, i: usize, features: &Tensor) -> Result<(Tensor, f64)> {
        if features.len() != self.cfg.hidden_dim {
            return Err(Error::shape("own_head features", self.cfg.hidden_dim, features.len()));
        }
        let (xbar, gate) = self.head_from_feat(&self.params, i, features.values());
        Ok((Tensor::from_slice(&xbar), gate))
    }

    /// Message emitted through channel `sender → receiver` from the sender's
    /// penultimate features.
    pub fn message(&self, sender: usize, receiver: usize, features: &Tensor) -> Result<Tensor> {
        let names = self.channel_names.get(&(sender, receiver)).ok_or_else(|| {
            Error::InvalidArgument(format!("no channel {sender} → {receiver}"))
        })?;
        if features.len() != self.cfg.hidden_dim {
            return Err(Error::shape("message features", self.cfg.hidden_dim, features.len()));
        }
        let mut zm = vec![0.0; NUM_ACTIONS];
        gemv(
            self.params.get(&names.mw).values(),
            self.params.get(&names.mb).values(),
            features.values(),
            &mut zm,
        );
        let msg = match self.cfg.head_mode {
            HeadMode::Faithful => zm.iter().map(|&z| sigmoid_scalar(z)).collect(),
            HeadMode::Linear => zm,
        };
        Ok(Tensor::from_slice(&msg))
    }

    fn q_forward_internal(
        &self,
        params: &ParameterSet,
        receiver: usize,
        states: &[Option<&AgentState>],
    ) -> Result<QForward> {
        if receiver >= self.cfg.n_agents {
            return Err(Error::InvalidArgument(format!("agent {receiver} out of range")));
        }
        if states.len() != self.cfg.n_agents {
            return Err(Error::shape("q_forward states", self.cfg.n_agents, states.len()));
        }
        let state = states[receiver].ok_or_else(|| {
            Error::InvalidArgument(format!("missing state for receiver agent {receiver}"))
        })?;
        let rn = &self.agent_names[receiver];
        let trunk =
            self.trunk_cached(params, &rn.t1w, &rn.t1b, &rn.t2w, &rn.t2b, &state.values)?;
        let (xbar, gate) = self.head_from_feat(params, receiver, &trunk.feat);

        let mut senders = Vec::new();
        for sender in 0..self.cfg.n_agents {
            let Some(names) = self.channel_names.get(&(sender, receiver)) else {
                continue;
            };
            let Some(s_state) = states[sender] else { continue };
            // shared-weight view: messages read the sender's actual trunk
            let sn = &self.agent_names[sender];
            let s_trunk =
                self.trunk_cached(params, &sn.t1w, &sn.t1b, &sn.t2w, &sn.t2b, &s_state.values)?;
            let mut zm = vec![0.0; NUM_ACTIONS];
            gemv(
                params.get(&names.mw).values(),
                params.get(&names.mb).values(),
                &s_trunk.feat,
                &mut zm,
            );
            let msg: Vec<f64> = match self.cfg.head_mode {
                HeadMode::Faithful => zm.iter().map(|&z| sigmoid_scalar(z)).collect(),
                HeadMode::Linear => zm,
            };
            senders.push(SenderPass {
                sender,
                input: s_state.values.clone(),
                trunk: s_trunk,
                msg,
            });
        }

        let mbar: Vec<f64> = if senders.is_empty() {
            vec![self.cfg.head_mode.neutral(); NUM_ACTIONS]
        } else {
            let inv = 1.0 / senders.len() as f64;
            (0..NUM_ACTIONS)
                .map(|k| senders.iter().map(|s| s.msg[k]).sum::<f64>() * inv)
                .collect()
        };
        let q: Vec<f64> = (0..NUM_ACTIONS)
            .map(|k| gate * xbar[k] + (1.0 - gate) * mbar[k])
            .collect();

        Ok(QForward {
            version: self.version,
            receiver,
            input: state.values.clone(),
            trunk,
            xbar,
            gate,
            senders,
            mbar,
            q,
        })
    }

    /// Joint Q forward over the online parameters. Senders without a state
    /// are skipped; with no sender at all the message mean falls back to the
    /// head-mode neutral value (the single-agent deployment rule).
    pub fn q_forward(&self, receiver: usize, states: &[Option<&AgentState>]) -> Result<QForward> {
        self.q_forward_internal(&self.params, receiver, states)
    }

    /// Same forward over the target copies θ⁻.
    pub fn q_forward_target(
        &self,
        receiver: usize,
        states: &[Option<&AgentState>],
    ) -> Result<QForward> {
        self.q_forward_internal(&self.target, receiver, states)
    }

    /// Joint Q forward over arbitrary parameters with this model's layout;
    /// used by the finite-difference gradient checks.
    pub fn q_forward_with_params(
        &self,
        params: &ParameterSet,
        receiver: usize,
        states: &[Option<&AgentState>],
    ) -> Result<QForward> {
        self.q_forward_internal(params, receiver, states)
    }

    /// Strict joint Q: every active channel into `receiver` must have a
    /// sender state.
    pub fn q_joint(&self, receiver: usize, states: &[Option<&AgentState>]) -> Result<Vec<f64>> {
        for sender in self.senders_into(receiver) {
            if states.get(sender).copied().flatten().is_none() {
                return Err(Error::InvalidArgument(format!(
                    "missing sender state for active channel {sender} → {receiver}"
                )));
            }
        }
        Ok(self.q_forward(receiver, states)?.q)
    }

    /// Single-agent Q: the own head gated against the neutral message value.
    pub fn q_single(&self, receiver: usize, state: &AgentState) -> Result<Vec<f64>> {
        let mut states: Vec<Option<&AgentState>> = vec![None; self.cfg.n_agents];
        states[receiver] = Some(state);
        Ok(self.q_forward_internal(&self.params, receiver, &states)?.q)
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    fn trunk_backward_acc(
        &mut self,
        read_w2: &str,
        sink: (&str, &str, &str, &str),
        input: &[f64],
        cache: &TrunkCache,
        dfeat: &[f64],
    ) -> Result<()> {
        let (w1s, b1s, w2s, b2s) = sink;
        let d = cache.feat.len();
        let mut dz2 = vec![0.0; d];
        for k in 0..d {
            if cache.z2[k] > 0.0 {
                dz2[k] = dfeat[k];
            }
        }
        outer_only(self.params.grad_mut(w2s).values_mut(), &dz2, &cache.a1);
        vec_acc(self.params.grad_mut(b2s).values_mut(), &dz2);

        let mut da1 = vec![0.0; d];
        gemv_transpose_acc(self.params.get(read_w2).values(), &dz2, &mut da1);
        let mut dz1 = vec![0.0; d];
        for k in 0..d {
            if cache.z1[k] > 0.0 {
                dz1[k] = da1[k];
            }
        }
        outer_only(self.params.grad_mut(w1s).values_mut(), &dz1, input);
        vec_acc(self.params.grad_mut(b1s).values_mut(), &dz1);
        Ok(())
    }

    /// Accumulates the gradient of `upstream · Q[action]` into the gradient
    /// buffers selected by `route`. For a TD loss pass
    /// `upstream = scale · td_error` (the derivative of the squared error up
    /// to the chosen batch scaling).
    pub fn q_backward(
        &mut self,
        cache: &QForward,
        action: usize,
        upstream: f64,
        route: GradRoute,
    ) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::InvalidArgument(
                "stale forward cache: parameters changed since the forward pass".into(),
            ));
        }
        if action >= NUM_ACTIONS {
            return Err(Error::InvalidArgument(format!("action code {action} out of range")));
        }
        if !upstream.is_finite() {
            return Err(Error::NonFinite("q_backward upstream".into()));
        }
        let receiver = cache.receiver;
        let gate = cache.gate;
        let own = matches!(route, GradRoute::All | GradRoute::OwnOnly);

        if own {
            let rn = self.agent_names[receiver].clone();
            // gate path: dQ/dg = x̄ - m̄ on the selected component
            let dg = upstream * (cache.xbar[action] - cache.mbar[action]);
            let dzg = dg * gate * (1.0 - gate);
            {
                let gw = self.params.grad_mut(&rn.gw).values_mut();
                for (dst, &x) in gw.iter_mut().zip(&cache.xbar) {
                    *dst += dzg * x;
                }
            }
            self.params.grad_mut(&rn.gb).values_mut()[0] += dzg;

            // own-head path: direct term plus the gate's dependence on x̄
            let mut dxbar: Vec<f64> = self
                .params
                .get(&rn.gw)
                .values()
                .iter()
                .map(|&w| dzg * w)
                .collect();
            dxbar[action] += gate * upstream;
            let dzh: Vec<f64> = match self.cfg.head_mode {
                HeadMode::Faithful => dxbar
                    .iter()
                    .zip(&cache.xbar)
                    .map(|(&d, &y)| d * y * (1.0 - y))
                    .collect(),
                HeadMode::Linear => dxbar,
            };
            outer_only(self.params.grad_mut(&rn.hw).values_mut(), &dzh, &cache.trunk.feat);
            vec_acc(self.params.grad_mut(&rn.hb).values_mut(), &dzh);
            let mut dfeat = vec![0.0; self.cfg.hidden_dim];
            gemv_transpose_acc(self.params.get(&rn.hw).values(), &dzh, &mut dfeat);
            self.trunk_backward_acc(
                &rn.t2w,
                (rn.t1w.as_str(), rn.t1b.as_str(), rn.t2w.as_str(), rn.t2b.as_str()),
                &cache.input,
                &cache.trunk,
                &dfeat,
            )?;
        }

        if cache.senders.is_empty() {
            return Ok(());
        }
        let dmsg_k = (1.0 - gate) * upstream / cache.senders.len() as f64;
        for pass in &cache.senders {
            let wanted = match route {
                GradRoute::All => true,
                GradRoute::OwnOnly => false,
                GradRoute::SenderOnly(j) => pass.sender == j,
            };
            if !wanted {
                continue;
            }
            let dzm_k = match self.cfg.head_mode {
                HeadMode::Faithful => dmsg_k * pass.msg[action] * (1.0 - pass.msg[action]),
                HeadMode::Linear => dmsg_k,
            };
            let chan = self.channel_names[&(pass.sender, receiver)].clone();
            let sn = self.agent_names[pass.sender].clone();
            let d = self.cfg.hidden_dim;
            {
                // message affine: only the selected output row is touched
                let gw = self.params.grad_mut(&chan.mw).values_mut();
                let row = &mut gw[action * d..(action + 1) * d];
                for (dst, &f) in row.iter_mut().zip(&pass.trunk.feat) {
                    *dst += dzm_k * f;
                }
            }
            self.params.grad_mut(&chan.mb).values_mut()[action] += dzm_k;

            let dfeat: Vec<f64> = self.params.get(&chan.mw).values()
                [action * d..(action + 1) * d]
                .iter()
                .map(|&w| w * dzm_k)
                .collect();
            // sender trunk gradients: under the sender's actual names for a
            // full joint pass, under the channel's own trunk copy for a
            // virtual-agent update
            let sink = match route {
                GradRoute::SenderOnly(_) => (&chan.t1w, &chan.t1b, &chan.t2w, &chan.t2b),
                _ => (&sn.t1w, &sn.t1b, &sn.t2w, &sn.t2b),
            };
            let sink = (sink.0.as_str(), sink.1.as_str(), sink.2.as_str(), sink.3.as_str());
            self.trunk_backward_acc(&sn.t2w, sink, &pass.input, &pass.trunk, &dfeat)?;
        }
        Ok(())
    }

    /// One SGD step over the accumulated gradients; clears them.
    pub fn sgd(&mut self, learning_rate: f64) -> Result<()> {
        sgd_step(&mut self.params, learning_rate)?;
        self.version += 1;
        Ok(())
    }

    // ------------------------------------------------------------------
    // Weight copies
    // ------------------------------------------------------------------

    /// Algorithm step "copy θ_share to all virtual agents": every channel
    /// with sender `i` receives a bit-identical copy of agent `i`'s trunk.
    pub fn copy_shared(&mut self, i: usize) -> Result<()> {
        let pairs: Vec<(usize, usize)> = self
            .channel_names
            .keys()
            .filter(|(s, _)| *s == i)
            .copied()
            .collect();
        for pair in pairs {
            let names = self.channel_names[&pair].clone();
            let src = self.agent_names[i].clone();
            for (dst, from) in [
                (&names.t1w, &src.t1w),
                (&names.t1b, &src.t1b),
                (&names.t2w, &src.t2w),
                (&names.t2b, &src.t2b),
            ] {
                let tensor = self.params.get(from).clone();
                self.params.copy_values_from(dst, &tensor)?;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Algorithm step "copy θ_share to actual agent j": the channel's trunk
    /// copy overwrites the sender's actual trunk after a virtual update.
    pub fn copy_back(&mut self, sender: usize, receiver: usize) -> Result<()> {
        let names = self
            .channel_names
            .get(&(sender, receiver))
            .ok_or_else(|| {
                Error::InvalidArgument(format!("no channel {sender} → {receiver}"))
            })?
            .clone();
        let dst = self.agent_names[sender].clone();
        for (to, from) in [
            (&dst.t1w, &names.t1w),
            (&dst.t1b, &names.t1b),
            (&dst.t2w, &names.t2w),
            (&dst.t2b, &names.t2b),
        ] {
            let tensor = self.params.get(from).clone();
            self.params.copy_values_from(to, &tensor)?;
        }
        self.version += 1;
        Ok(())
    }

    /// Overwrites the target copies θ⁻ with the online parameters.
    pub fn sync_target(&mut self) {
        self.target = self.params.clone();
        self.version += 1;
    }

    /// Re-initializes every agent's gate (fresh Glorot weights, zero bias,
    /// so each gate starts at σ(0) = 0.5 on centered inputs). Used when
    /// joint training begins from pretrained single-agent weights.
    pub fn reset_gates(&mut self, rng: &mut StdRng) {
        for i in 0..self.cfg.n_agents {
            let names = self.agent_names[i].clone();
            let fresh = AffineLayer::glorot(1, NUM_ACTIONS, rng);
            self.params
                .copy_values_from(&names.gw, &fresh.weight)
                .expect("gate weight shape");
            self.params
                .copy_values_from(&names.gb, &fresh.bias)
                .expect("gate bias shape");
        }
        self.version += 1;
    }

    /// Whether the channel's trunk copy is bit-identical to its sender's.
    pub fn trunk_in_sync(&self, sender: usize, receiver: usize) -> bool {
        let Some(names) = self.channel_names.get(&(sender, receiver)) else {
            return true;
        };
        let src = &self.agent_names[sender];
        for (a, b) in [
            (&src.t1w, &names.t1w),
            (&src.t1b, &names.t1b),
            (&src.t2w, &names.t2w),
            (&src.t2b, &names.t2b),
        ] {
            let x = self.params.get(a).values();
            let y = self.params.get(b).values();
            if x.len() != y.len() || x.iter().zip(y).any(|(p, q)| p.to_bits() != q.to_bits()) {
                return false;
            }
        }
        true
    }

    /// Channel pairs `(sender, receiver)` in deterministic order.
    pub fn channel_pairs(&self) -> Vec<(usize, usize)> {
        self.channel_names.keys().copied().collect()
    }

    // ------------------------------------------------------------------
    // Checkpoints
    // ------------------------------------------------------------------

    const CHECKPOINT_MAGIC: &'static str = "cosearch-checkpoint v1";

    /// Writes a checkpoint: a text header listing config scalars and
    /// `(name, shape)` per tensor in lexicographic name order, followed by
    /// the raw little-endian f64 values in the same order.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        let cfg = &self.cfg;
        writeln!(buf, "{}", Self::CHECKPOINT_MAGIC).unwrap();
        writeln!(buf, "n_agents {}", cfg.n_agents).unwrap();
        writeln!(buf, "input_dim {}", cfg.input_dim).unwrap();
        writeln!(buf, "hidden_dim {}", cfg.hidden_dim).unwrap();
        writeln!(buf, "head_mode {}", cfg.head_mode.as_str()).unwrap();
        writeln!(buf, "with_channels {}", u8::from(cfg.with_channels)).unwrap();
        writeln!(buf, "tensors {}", self.params.len()).unwrap();
        for (name, tensor) in self.params.iter() {
            let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
            writeln!(buf, "{} {} {}", name, tensor.shape().len(), dims.join(" ")).unwrap();
        }
        writeln!(buf, "data").unwrap();
        for (_, tensor) in self.params.iter() {
            for v in tensor.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<JointModel> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

        // split text header from the binary payload
        let mut offset = 0usize;
        let mut lines: Vec<String> = Vec::new();
        loop {
            let rest = &bytes[offset..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| bad("non-UTF-8 header line"))?
                .to_string();
            offset += nl + 1;
            let is_data = line == "data";
            lines.push(line);
            if is_data {
                break;
            }
        }
        if lines.first().map(String::as_str) != Some(Self::CHECKPOINT_MAGIC) {
            return Err(bad("not a cosearch checkpoint"));
        }
        let scalar = |idx: usize, key: &str| -> Result<String> {
            let line = lines.get(idx).ok_or_else(|| bad("truncated header"))?;
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| bad(&format!("malformed `{key}` line")))?;
            if k != key {
                return Err(bad(&format!("expected `{key}`, found `{k}`")));
            }
            Ok(v.to_string())
        };
        let n_agents: usize = scalar(1, "n_agents")?.parse().map_err(|_| bad("bad n_agents"))?;
        let input_dim: usize = scalar(2, "input_dim")?.parse().map_err(|_| bad("bad input_dim"))?;
        let hidden_dim: usize =
            scalar(3, "hidden_dim")?.parse().map_err(|_| bad("bad hidden_dim"))?;
        let head_mode = HeadMode::parse(&scalar(4, "head_mode")?)?;
        let with_channels = scalar(5, "with_channels")? == "1";
        let tensor_count: usize = scalar(6, "tensors")?.parse().map_err(|_| bad("bad tensors"))?;

        let cfg = ModelConfig {
            n_agents,
            input_dim,
            hidden_dim,
            head_mode,
            with_channels,
        };
        use rand::SeedableRng;
        let mut model = JointModel::new(cfg, &mut StdRng::seed_from_u64(0))?;
        if tensor_count != model.params.len() {
            return Err(bad(&format!(
                "tensor count {} does not match the declared model ({})",
                tensor_count,
                model.params.len()
            )));
        }

        let header_tensors = &lines[7..7 + tensor_count];
        let mut order: Vec<String> = Vec::with_capacity(tensor_count);
        for line in header_tensors {
            let mut parts = line.split(' ');
            let name = parts.next().ok_or_else(|| bad("empty tensor line"))?.to_string();
            let ndims: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad tensor rank"))?;
            let dims: Vec<usize> = parts
                .map(|s| s.parse().map_err(|_| bad("bad tensor dim")))
                .collect::<Result<_>>()?;
            if dims.len() != ndims {
                return Err(bad(&format!("tensor `{name}` rank mismatch")));
            }
            if !model.params.contains(&name) {
                return Err(bad(&format!("unexpected tensor `{name}`")));
            }
            if model.params.get(&name).shape() != dims.as_slice() {
                return Err(bad(&format!(
                    "shape mismatch for `{name}`: expected {:?}, got {:?}",
                    model.params.get(&name).shape(),
                    dims
                )));
            }
            order.push(name);
        }
        if lines.get(7 + tensor_count).map(String::as_str) != Some("data") {
            return Err(bad("missing data marker"));
        }

        let mut cursor = offset;
        for name in &order {
            let n = model.params.get(name).len();
            let need = n * 8;
            if cursor + need > bytes.len() {
                return Err(bad("truncated tensor data"));
            }
            let dst = model.params.get_mut(name).values_mut();
            for (i, chunk) in bytes[cursor..cursor + need].chunks_exact(8).enumerate() {
                dst[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            if !model.params.get(name).is_finite() {
                return Err(bad(&format!("non-finite values in tensor `{name}`")));
            }
            cursor += need;
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        model.target = model.params.clone();
        model.version = 0;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_error};
    use rand::Rng;
    use rand::SeedableRng;

    fn small_cfg(head_mode: HeadMode, with_channels: bool, n_agents: usize) -> ModelConfig {
        ModelConfig {
            n_agents,
            input_dim: 10,
            hidden_dim: 6,
            head_mode,
            with_channels,
        }
    }

    fn model(head_mode: HeadMode, with_channels: bool, n_agents: usize, seed: u64) -> JointModel {
        JointModel::new(
            small_cfg(head_mode, with_channels, n_agents),
            &mut StdRng::seed_from_u64(seed),
        )
        .unwrap()
    }

    fn zero_all_params(m: &mut JointModel) {
        let names: Vec<String> = m.params().names().map(String::from).collect();
        for n in names {
            m.params_mut().get_mut(&n).fill(0.0);
        }
    }

    fn random_state(len: usize, rng: &mut StdRng) -> AgentState {
        AgentState {
            values: (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn zero_params_faithful_head_is_half_with_half_gate() {
        let mut m = model(HeadMode::Faithful, true, 2, 0);
        zero_all_params(&mut m);
        let s = AgentState { values: vec![0.3; 10] };
        let feat = m.trunk_forward(0, &s).unwrap();
        assert!(feat.values().iter().all(|&v| v == 0.0));
        let (xbar, gate) = m.own_head(0, &feat).unwrap();
        assert!(xbar.values().iter().all(|&v| v == 0.5));
        assert_eq!(gate, 0.5);
    }

    #[test]
    fn zero_params_linear_head_is_zero_with_half_gate() {
        let mut m = model(HeadMode::Linear, true, 2, 1);
        zero_all_params(&mut m);
        let s = AgentState { values: vec![0.3; 10] };
        let feat = m.trunk_forward(0, &s).unwrap();
        let (xbar, gate) = m.own_head(0, &feat).unwrap();
        assert!(xbar.values().iter().all(|&v| v == 0.0));
        assert_eq!(gate, 0.5);
    }

    #[test]
    fn saturated_gate_preactivation_hits_one() {
        let mut m = model(HeadMode::Faithful, true, 2, 2);
        zero_all_params(&mut m);
        m.params_mut().get_mut("a0.gate.b").values_mut()[0] = 1e6;
        let s = AgentState { values: vec![0.1; 10] };
        let feat = m.trunk_forward(0, &s).unwrap();
        let (_, gate) = m.own_head(0, &feat).unwrap();
        assert!((gate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trunk_forward_is_deterministic_and_checks_shape() {
        let m = model(HeadMode::Linear, true, 2, 3);
        let mut rng = StdRng::seed_from_u64(9);
        let s = random_state(10, &mut rng);
        let a = m.trunk_forward(1, &s).unwrap();
        let b = m.trunk_forward(1, &s).unwrap();
        assert_eq!(a.values(), b.values());
        let bad = AgentState { values: vec![0.0; 9] };
        assert!(m.trunk_forward(1, &bad).is_err());
    }

    #[test]
    fn message_neutral_cases() {
        let mut m = model(HeadMode::Faithful, true, 2, 4);
        zero_all_params(&mut m);
        let feat = Tensor::zeros(vec![6]);
        let msg = m.message(1, 0, &feat).unwrap();
        assert!(msg.values().iter().all(|&v| v == 0.5));

        let mut m = model(HeadMode::Linear, true, 2, 5);
        zero_all_params(&mut m);
        let msg = m.message(1, 0, &feat).unwrap();
        assert!(msg.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_saturation_reduces_q_joint_to_own_head() {
        for head_mode in [HeadMode::Faithful, HeadMode::Linear] {
            let mut m = model(head_mode, true, 2, 6);
            let mut rng = StdRng::seed_from_u64(10);
            let s0 = random_state(10, &mut rng);
            let s1 = random_state(10, &mut rng);

            m.params_mut().get_mut("a0.gate.w").fill(0.0);
            m.params_mut().get_mut("a0.gate.b").values_mut()[0] = 1e9;
            let f = m.q_forward(0, &[Some(&s0), Some(&s1)]).unwrap();
            for (q, x) in f.q().iter().zip(f.own_head()) {
                assert!((q - x).abs() < 1e-12);
            }

            m.params_mut().get_mut("a0.gate.b").values_mut()[0] = -1e9;
            let f = m.q_forward(0, &[Some(&s0), Some(&s1)]).unwrap();
            for (q, mb) in f.q().iter().zip(&f.mbar) {
                assert!((q - mb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_equal_senders_average_to_one_message() {
        // three agents; senders 1 and 2 share parameters and state, so their
        // messages into 0 coincide and the mean equals either one
        let mut m = model(HeadMode::Linear, true, 3, 7);
        let copy_names: Vec<(String, String)> = m
            .params()
            .names()
            .filter(|n| n.starts_with("a1.") || n.starts_with("c1to0."))
            .map(|n| (n.to_string(), n.replace("a1.", "a2.").replace("c1to0.", "c2to0.")))
            .collect();
        for (src, dst) in copy_names {
            let tensor = m.params().get(&src).clone();
            m.params_mut().copy_values_from(&dst, &tensor).unwrap();
        }
        let mut rng = StdRng::seed_from_u64(11);
        let s0 = random_state(10, &mut rng);
        let s1 = random_state(10, &mut rng);
        let f = m
            .q_forward(0, &[Some(&s0), Some(&s1), Some(&s1)])
            .unwrap();
        assert_eq!(f.n_senders(), 2);
        let msg = &f.senders[0].msg;
        let g = f.gate();
        for k in 0..NUM_ACTIONS {
            let expected = g * f.own_head()[k] + (1.0 - g) * msg[k];
            assert!((f.q()[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn q_single_linear_gate_scales_own_head() {
        let mut m = model(HeadMode::Linear, true, 2, 8);
        zero_all_params(&mut m);
        let v = [0.4, -0.2, 0.9, 0.0, 0.1, -0.5, 0.3, 0.2, -0.1];
        m.params_mut()
            .get_mut("a0.head.b")
            .values_mut()
            .copy_from_slice(&v);
        // zero gate params keep the gate at 0.5
        let s = AgentState { values: vec![0.0; 10] };
        let q = m.q_single(0, &s).unwrap();
        for (qk, vk) in q.iter().zip(&v) {
            assert!((qk - 0.5 * vk).abs() < 1e-15);
        }
    }

    #[test]
    fn q_single_argmax_invariant_to_positive_rescaling() {
        let mut m = model(HeadMode::Linear, true, 2, 9);
        zero_all_params(&mut m);
        let v = [0.4, -0.2, 0.9, 0.0, 0.1, -0.5, 0.3, 0.2, -0.1];
        m.params_mut()
            .get_mut("a0.head.b")
            .values_mut()
            .copy_from_slice(&v);
        let s = AgentState { values: vec![0.0; 10] };
        let q1 = m.q_single(0, &s).unwrap();
        let argmax1 = q1
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let scaled: Vec<f64> = v.iter().map(|x| x * 7.5).collect();
        m.params_mut()
            .get_mut("a0.head.b")
            .values_mut()
            .copy_from_slice(&scaled);
        let q2 = m.q_single(0, &s).unwrap();
        let argmax2 = q2
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax1, argmax2);
        assert_eq!(argmax1, 2);
    }

    #[test]
    fn strict_q_joint_rejects_missing_sender_state() {
        let m = model(HeadMode::Linear, true, 2, 12);
        let s = AgentState { values: vec![0.1; 10] };
        assert!(m.q_joint(0, &[Some(&s), None]).is_err());
        assert!(m.q_joint(0, &[Some(&s), Some(&s)]).is_ok());
        // without channels there is nothing to miss
        let m = model(HeadMode::Linear, false, 2, 12);
        assert!(m.q_joint(0, &[Some(&s), None]).is_ok());
    }

    #[test]
    fn zero_td_error_gives_zero_gradients() {
        let mut m = model(HeadMode::Linear, true, 2, 13);
        let mut rng = StdRng::seed_from_u64(14);
        let s0 = random_state(10, &mut rng);
        let s1 = random_state(10, &mut rng);
        let cache = m.q_forward(0, &[Some(&s0), Some(&s1)]).unwrap();
        m.q_backward(&cache, 3, 0.0, GradRoute::All).unwrap();
        for name in m.params().names().map(String::from).collect::<Vec<_>>() {
            assert!(m.params().grad(&name).values().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn saturated_gate_sends_no_gradient_into_channels() {
        let mut m = model(HeadMode::Linear, true, 2, 15);
        // σ(40) rounds to exactly 1.0 in f64, so (1-g) vanishes
        m.params_mut().get_mut("a0.gate.w").fill(0.0);
        m.params_mut().get_mut("a0.gate.b").values_mut()[0] = 1e9;
        let mut rng = StdRng::seed_from_u64(16);
        let s0 = random_state(10, &mut rng);
        let s1 = random_state(10, &mut rng);
        let cache = m.q_forward(0, &[Some(&s0), Some(&s1)]).unwrap();
        assert_eq!(cache.gate(), 1.0);
        m.q_backward(&cache, 2, 1.5, GradRoute::All).unwrap();
        assert!(m.params().grad("c1to0.msg.w").values().iter().all(|&g| g == 0.0));
        assert!(m.params().grad("c1to0.msg.b").values().iter().all(|&g| g == 0.0));
        // the sender trunk is reached only through the message path
        assert!(m.params().grad("a1.trunk.l1.w").values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn receiver_loss_never_touches_other_agents_own_heads() {
        let mut m = model(HeadMode::Linear, true, 2, 17);
        let mut rng = StdRng::seed_from_u64(18);
        let s0 = random_state(10, &mut rng);
        let s1 = random_state(10, &mut rng);
        let cache = m.q_forward(0, &[Some(&s0), Some(&s1)]).unwrap();
        m.q_backward(&cache, 5, 0.7, GradRoute::All).unwrap();
        for name in ["a1.head.w", "a1.head.b", "a1.gate.w", "a1.gate.b"] {
            assert!(m.params().grad(name).values().iter().all(|&g| g == 0.0));
        }
        // while the sender trunk and channel do receive gradient
        assert!(m.params().grad("a1.trunk.l1.w").values().iter().any(|&g| g != 0.0));
        assert!(m.params().grad("c1to0.msg.w").values().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn grad_routes_partition_the_full_gradient() {
        let mut rng = StdRng::seed_from_u64(19);
        let s0 = random_state(10, &mut rng);
        let s1 = random_state(10, &mut rng);
        let states = [Some(&s0), Some(&s1)];

        let mut all = model(HeadMode::Linear, true, 2, 20);
        let cache = all.q_forward(0, &states).unwrap();
        all.q_backward(&cache, 1, 0.9, GradRoute::All).unwrap();

        let mut routed = model(HeadMode::Linear, true, 2, 20);
        let cache = routed.q_forward(0, &states).unwrap();
        routed.q_backward(&cache, 1, 0.9, GradRoute::OwnOnly).unwrap();
        routed
            .q_backward(&cache, 1, 0.9, GradRoute::SenderOnly(1))
            .unwrap();

        for name in all.params().names() {
            let full = all.params().grad(name);
            let got = if let Some(rest) = name.strip_prefix("c1to0.trunk.") {
                // the virtual route redirects sender-trunk gradient into the
                // channel copy
                routed.params().grad(&format!("c1to0.trunk.{rest}"))
            } else {
                routed.params().grad(name)
            };
            if name.starts_with("a1.trunk.") {
                let redirected = routed
                    .params()
                    .grad(&name.replace("a1.trunk.", "c1to0.trunk."));
                for (f, g) in full.values().iter().zip(redirected.values()) {
                    assert!((f - g).abs() < 1e-15);
                }
            } else if !name.starts_with("c1to0.trunk.") {
                for (f, g) in full.values().iter().zip(got.values()) {
                    assert!((f - g).abs() < 1e-15, "{name}");
                }
            }
        }
    }

    /// The central oracle: analytic gradients of the full joint TD loss match
    /// central finite differences on every touched parameter.
    #[test]
    fn joint_td_loss_gradient_matches_finite_differences() {
        for (seed, head_mode) in [(21u64, HeadMode::Linear), (22, HeadMode::Faithful)] {
            let mut m = model(head_mode, true, 2, seed);
            let mut rng = StdRng::seed_from_u64(seed + 100);
            let s0 = random_state(10, &mut rng);
            let s1 = random_state(10, &mut rng);
            let states = [Some(&s0), Some(&s1)];
            let action = 4;
            let y = 0.8;

            let m_ref = m.clone();
            let states_cl = [Some(&s0), Some(&s1)];
            let loss = move |p: &ParameterSet| {
                let f = m_ref.q_forward_with_params(p, 0, &states_cl).unwrap();
                0.5 * (f.q()[action] - y).powi(2)
            };
            let fd = finite_difference_gradient(loss, m.params(), 1e-5).unwrap();

            let cache = m.q_forward(0, &states).unwrap();
            let td = cache.q()[action] - y;
            m.q_backward(&cache, action, td, GradRoute::All).unwrap();

            let mut checked = 0;
            for (name, numeric) in &fd {
                let analytic = m.params().grad(name);
                for (a, n) in analytic.values().iter().zip(numeric.values()) {
                    if a.abs() > 1e-8 {
                        assert!(
                            relative_error(*a, *n) < 1e-4,
                            "{name}: analytic {a} vs numeric {n}"
                        );
                        checked += 1;
                    }
                }
            }
            assert!(checked > 50, "only {checked} gradients were exercised");
        }
    }

    #[test]
    fn copy_shared_and_copy_back_keep_trunks_bit_identical() {
        let mut m = model(HeadMode::Linear, true, 2, 23);
        // desync by mutating agent 0's trunk
        m.params_mut().get_mut("a0.trunk.l1.w").values_mut()[0] += 0.25;
        assert!(!m.trunk_in_sync(0, 1));
        m.copy_shared(0).unwrap();
        assert!(m.trunk_in_sync(0, 1));

        m.params_mut().get_mut("c1to0.trunk.l2.b").values_mut()[2] -= 0.5;
        assert!(!m.trunk_in_sync(1, 0));
        m.copy_back(1, 0).unwrap();
        assert!(m.trunk_in_sync(1, 0));
    }

    #[test]
    fn sync_target_freezes_a_snapshot() {
        let mut m = model(HeadMode::Linear, true, 2, 24);
        let mut rng = StdRng::seed_from_u64(25);
        let s0 = random_state(10, &mut rng);
        let s1 = random_state(10, &mut rng);
        m.sync_target();
        let online = m.q_forward(0, &[Some(&s0), Some(&s1)]).unwrap();
        let target = m.q_forward_target(0, &[Some(&s0), Some(&s1)]).unwrap();
        assert_eq!(online.q(), target.q());

        // a training step moves the online net but not θ⁻
        let cache = m.q_forward(0, &[Some(&s0), Some(&s1)]).unwrap();
        let td = cache.q()[0] - 2.0;
        m.q_backward(&cache, 0, td, GradRoute::All).unwrap();
        m.sgd(0.05).unwrap();
        let online2 = m.q_forward(0, &[Some(&s0), Some(&s1)]).unwrap();
        let target2 = m.q_forward_target(0, &[Some(&s0), Some(&s1)]).unwrap();
        assert_eq!(target.q(), target2.q());
        assert_ne!(online2.q(), target2.q());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = model(HeadMode::Linear, true, 2, 26);
        let s = AgentState { values: vec![0.2; 10] };
        let cache = m.q_forward(0, &[Some(&s), Some(&s)]).unwrap();
        m.copy_shared(0).unwrap();
        let err = m.q_backward(&cache, 0, 1.0, GradRoute::All).unwrap_err();
        assert!(err.to_string().contains("stale"));
    }

    #[test]
    fn faithful_q_values_stay_in_unit_interval() {
        let m = model(HeadMode::Faithful, true, 2, 27);
        let mut rng = StdRng::seed_from_u64(28);
        for _ in 0..50 {
            let s0 = random_state(10, &mut rng);
            let s1 = random_state(10, &mut rng);
            let q = m.q_joint(0, &[Some(&s0), Some(&s1)]).unwrap();
            assert!(q.iter().all(|&v| v > 0.0 && v < 1.0 && v.is_finite()));
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = std::env::temp_dir().join("cosearch-qnet-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");

        let m = model(HeadMode::Linear, true, 2, 29);
        m.save_checkpoint(&path).unwrap();
        let loaded = JointModel::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config(), m.config());
        for (name, tensor) in m.params().iter() {
            let other = loaded.params().get(name);
            assert_eq!(tensor.shape(), other.shape());
            for (a, b) in tensor.values().iter().zip(other.values()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        // a mangled shape line must be rejected
        let bytes = std::fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes[..200]).to_string();
        let mangled_head = text.replace("hidden_dim 6", "hidden_dim 7");
        let mut mangled = mangled_head.into_bytes();
        mangled.extend_from_slice(&bytes[200..]);
        let bad_path = dir.join("mangled.ckpt");
        std::fs::write(&bad_path, mangled).unwrap();
        assert!(JointModel::load_checkpoint(&bad_path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
