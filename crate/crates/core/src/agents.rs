//! Deterministic actor-critic agents with an optional adversary whose
//! action is mixed into the executed command.
//!
//! All four variants share one update path; they differ only in the
//! feature network in front of the actor, adversary and critic heads:
//! none (raw kinematics), a recurrent cell, or the visual encoder. The
//! feature network is trained through the critic loss; the policy heads
//! read detached features.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Env, EnvError, Observation};
use crate::nn::{
    soft_update, Activation, AdamState, Checkpoint, CheckpointError, EncoderCache, Mlp, Module, NnError, Param,
    RnnCell, Tensor, VisualEncoder, VisualEncoderConfig,
};
use crate::perception::CoeffRegressor;
use crate::vehicle::{Action, VehicleState, Verdict};

pub const ACTION_DIM: usize = 2;
pub const KINEMATIC_DIM: usize = 3;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite {what} during update {update}")]
    NonFinite { what: String, update: u64 },
    #[error("observation lacks an image but the agent is visual")]
    MissingImage,
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("batch is empty")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Ddpg,
    ArDdpg,
    ArRdpg,
    ArCadpg,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ddpg, Variant::ArDdpg, Variant::ArRdpg, Variant::ArCadpg];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ddpg => "ddpg",
            Variant::ArDdpg => "ar-ddpg",
            Variant::ArRdpg => "ar-rdpg",
            Variant::ArCadpg => "ar-cadpg",
        }
    }

    /// Whether an adversary is trained and mixed in.
    pub fn robust(self) -> bool {
        self != Variant::Ddpg
    }

    pub fn recurrent(self) -> bool {
        self == Variant::ArRdpg
    }

    pub fn visual(self) -> bool {
        self == Variant::ArCadpg
    }

    /// Mixing weight actually used: plain DDPG never mixes.
    pub fn effective_alpha(self, alpha: f64) -> f64 {
        if self.robust() {
            alpha
        } else {
            0.0
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("unknown variant {given:?}; expected one of ddpg, ar-ddpg, ar-rdpg, ar-cadpg")]
pub struct UnknownVariant {
    pub given: String,
}

impl FromStr for Variant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| UnknownVariant { given: s.to_string() })
    }
}

/// `(1 − α)·a_mu + α·a_adv` without clamping.
pub fn mix_unclamped(a_mu: [f64; 2], a_adv: [f64; 2], alpha: f64) -> [f64; 2] {
    std::array::from_fn(|i| (1.0 - alpha) * a_mu[i] + alpha * a_adv[i])
}

/// Executed action: the mixture clamped to the unit box.
pub fn mix_actions(a_mu: [f64; 2], a_adv: [f64; 2], alpha: f64) -> [f64; 2] {
    mix_unclamped(a_mu, a_adv, alpha).map(|v| v.clamp(-1.0, 1.0))
}

/// `r + γ·(1 − done)·Q'(s', μ'(s'))`.
pub fn critic_target(reward: f64, gamma: f64, done: bool, next_q: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * next_q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub rnn_hidden: usize,
    pub encoder: VisualEncoderConfig,
    pub gamma: f64,
    pub alpha: f64,
    pub actor_lr: f64,
    pub adversary_lr: f64,
    pub critic_lr: f64,
    pub tau: f64,
    pub bptt: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            rnn_hidden: 32,
            encoder: VisualEncoderConfig::default(),
            gamma: 0.95,
            alpha: 0.1,
            actor_lr: 2e-5,
            adversary_lr: 2e-5,
            critic_lr: 2e-4,
            tau: 0.01,
            bptt: 8,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::Config(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        for (name, lr) in
            [("actor_lr", self.actor_lr), ("adversary_lr", self.adversary_lr), ("critic_lr", self.critic_lr)]
        {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.rnn_hidden == 0 || self.bptt == 0 {
            return bad("layer sizes and bptt must be positive".into());
        }
        Ok(())
    }
}

/// What sits between the observation and the policy/critic heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureNet {
    Kinematic,
    Recurrent(RnnCell),
    Visual(VisualEncoder),
}

impl FeatureNet {
    pub fn outputs(&self) -> usize {
        match self {
            FeatureNet::Kinematic => KINEMATIC_DIM,
            FeatureNet::Recurrent(c) => c.hidden,
            FeatureNet::Visual(e) => e.outputs(),
        }
    }
}

impl Module for FeatureNet {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        match self {
            FeatureNet::Kinematic => {}
            FeatureNet::Recurrent(c) => c.collect(prefix, out),
            FeatureNet::Visual(e) => e.collect(prefix, out),
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        match self {
            FeatureNet::Kinematic => {}
            FeatureNet::Recurrent(c) => c.collect_mut(out),
            FeatureNet::Visual(e) => e.collect_mut(out),
        }
    }
}

/// Independent RNG stream per network so that adding or removing one
/// network never shifts another's initialization.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn image_tensor(obs: &Observation) -> Result<Tensor, AgentError> {
    let img = obs.image.as_ref().ok_or(AgentError::MissingImage)?;
    let (c, h, w) = img.shape();
    Ok(Tensor::new(&[c, h, w], img.to_f64())?)
}

fn concat(f: &[f64], a: &[f64]) -> Vec<f64> {
    f.iter().chain(a).copied().collect()
}

/// Critic value and its gradient with respect to the action input.
pub fn critic_value_and_action_grad(
    critic: &Mlp,
    features: &[f64],
    action: &[f64],
) -> Result<(f64, Vec<f64>), NnError> {
    let cache = critic.forward_cached(&concat(features, action))?;
    let q = cache.output()[0];
    let d_in = critic.input_grad(&cache, &[1.0]);
    Ok((q, d_in[features.len()..].to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Maximize the critic (the agent).
    Ascend,
    /// Minimize the critic (the adversary).
    Descend,
}

/// Zeroes `policy`'s gradients and accumulates the gradient of the loss
/// `∓ mean Q(f, π(f))` whose descent moves the policy in `direction`.
/// Returns `mean Q(f, π(f))` before any step.
pub fn policy_gradient<C>(
    policy: &mut Mlp,
    features: &[Vec<f64>],
    critic: C,
    direction: Direction,
) -> Result<f64, NnError>
where
    C: Fn(&[f64], &[f64]) -> Result<(f64, Vec<f64>), NnError>,
{
    policy.zero_grad();
    let n = features.len() as f64;
    let sign = match direction {
        Direction::Ascend => -1.0,
        Direction::Descend => 1.0,
    };
    let mut objective = 0.0;
    for f in features {
        let cache = policy.forward_cached(f)?;
        let (q, dq_da) = critic(f, cache.output())?;
        objective += q / n;
        let dy: Vec<f64> = dq_da.iter().map(|g| sign * g / n).collect();
        policy.backward(&cache, &dy);
    }
    Ok(objective)
}

/// One stored step for the flat (non-recurrent) variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: [f64; 2],
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceStep {
    pub obs: [f64; 3],
    pub action: [f64; 2],
    pub reward: f64,
    pub next_obs: [f64; 3],
    pub done: bool,
}

/// Contiguous steps of one episode with the hidden state that preceded
/// the first of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub h0: Vec<f64>,
    pub steps: Vec<SequenceStep>,
}

/// Fixed-capacity ring; the oldest item is overwritten first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    next: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: Vec::new(), next: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Items from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `n` items drawn uniformly with replacement.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<&T> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

/// Gaussian exploration whose standard deviation falls linearly from
/// `initial` to `final_std` over `decay_episodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplorationNoise {
    pub initial: f64,
    pub final_std: f64,
    pub decay_episodes: usize,
}

impl Default for ExplorationNoise {
    fn default() -> Self {
        Self { initial: 0.2, final_std: 0.02, decay_episodes: 500 }
    }
}

impl ExplorationNoise {
    pub fn std_at(&self, episode: usize) -> f64 {
        let frac = if self.decay_episodes == 0 { 1.0 } else { (episode as f64 / self.decay_episodes as f64).min(1.0) };
        (self.initial + (self.final_std - self.initial) * frac).max(0.0)
    }

    pub fn sample<R: Rng>(std: f64, rng: &mut R) -> [f64; 2] {
        if std <= 0.0 {
            return [0.0; 2];
        }
        let n = Normal::new(0.0, std).expect("positive std");
        [n.sample(rng), n.sample(rng)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    pub mixed: [f64; 2],
    pub a_mu: [f64; 2],
    pub a_adv: [f64; 2],
    /// Recurrent state after this observation (empty for other variants).
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_objective: f64,
    pub adversary_objective: f64,
}

enum FeatureCache {
    None,
    Visual(Vec<EncoderCache>),
    Recurrent(Vec<WindowCache>),
}

struct WindowCache {
    /// Hidden states `h0, h1, …, hL`.
    hs: Vec<Vec<f64>>,
    obs: Vec<[f64; 3]>,
    /// Index of this window's first step in the flattened batch.
    offset: usize,
}

/// A minibatch turned into features, executed actions and TD targets.
struct Prepared {
    features: Vec<Vec<f64>>,
    actions: Vec<[f64; 2]>,
    targets: Vec<f64>,
    cache: FeatureCache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub variant: Variant,
    pub cfg: AgentConfig,
    pub features: FeatureNet,
    pub actor: Mlp,
    pub adversary: Mlp,
    pub critic: Mlp,
    pub target_features: FeatureNet,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    pub critic_opt: AdamState,
    pub actor_opt: AdamState,
    pub adversary_opt: AdamState,
    pub updates: u64,
}

impl Agent {
    pub fn new(variant: Variant, cfg: &AgentConfig, seed: u64) -> Result<Self, AgentError> {
        cfg.validate()?;
        let features = match variant {
            Variant::Ddpg | Variant::ArDdpg => FeatureNet::Kinematic,
            Variant::ArRdpg => {
                FeatureNet::Recurrent(RnnCell::new(KINEMATIC_DIM, cfg.rnn_hidden, &mut stream_rng(seed, 1)))
            }
            Variant::ArCadpg => {
                let mut enc = cfg.encoder.clone();
                enc.kinematic_inputs = KINEMATIC_DIM;
                FeatureNet::Visual(VisualEncoder::new(&enc, &mut stream_rng(seed, 1)))
            }
        };
        let nf = features.outputs();
        let sizes = |input: usize, output: usize| {
            let mut s = vec![input];
            s.extend(&cfg.hidden);
            s.push(output);
            s
        };
        let actor = Mlp::new(&sizes(nf, ACTION_DIM), Activation::Relu, Activation::Tanh, &mut stream_rng(seed, 2));
        let critic =
            Mlp::new(&sizes(nf + ACTION_DIM, 1), Activation::Relu, Activation::Identity, &mut stream_rng(seed, 3));
        let adversary = Mlp::new(&sizes(nf, ACTION_DIM), Activation::Relu, Activation::Tanh, &mut stream_rng(seed, 4));
        Ok(Self {
            variant,
            cfg: cfg.clone(),
            target_features: features.clone(),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            features,
            actor,
            adversary,
            critic,
            critic_opt: AdamState::new(),
            actor_opt: AdamState::new(),
            adversary_opt: AdamState::new(),
            updates: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.variant.effective_alpha(self.cfg.alpha)
    }

    pub fn feature_dim(&self) -> usize {
        self.features.outputs()
    }

    pub fn initial_hidden(&self) -> Vec<f64> {
        match &self.features {
            FeatureNet::Recurrent(c) => vec![0.0; c.hidden],
            _ => Vec::new(),
        }
    }

    /// Features for one observation; for the recurrent variant also the
    /// advanced hidden state.
    pub fn features_of(&self, obs: &Observation, h_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>), AgentError> {
        Self::features_with(&self.features, obs, h_prev)
    }

    fn features_with(net: &FeatureNet, obs: &Observation, h_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>), AgentError> {
        match net {
            FeatureNet::Kinematic => Ok((obs.kinematics.to_vec(), Vec::new())),
            FeatureNet::Recurrent(cell) => {
                let h = cell.step(h_prev, &obs.kinematics)?;
                Ok((h.clone(), h))
            }
            FeatureNet::Visual(enc) => {
                let out = enc.forward(&image_tensor(obs)?, &obs.kinematics)?;
                Ok((out.output().to_vec(), Vec::new()))
            }
        }
    }

    /// Actor output plus `noise`, mixed with the adversary at weight `alpha`.
    pub fn act(&self, obs: &Observation, h_prev: &[f64], noise: [f64; 2], alpha: f64) -> Result<ActOutput, AgentError> {
        let (f, hidden) = self.features_of(obs, h_prev)?;
        let mu = self.actor.forward(&f)?;
        let a_mu = [mu[0] + noise[0], mu[1] + noise[1]];
        let a_adv = if alpha > 0.0 {
            let adv = self.adversary.forward(&f)?;
            [adv[0], adv[1]]
        } else {
            [0.0; 2]
        };
        let mixed = mix_actions(a_mu, a_adv, alpha);
        if !mixed.iter().chain(&a_adv).all(|v| v.is_finite()) {
            return Err(AgentError::NonFinite { what: "action".into(), update: self.updates });
        }
        Ok(ActOutput { mixed, a_mu, a_adv, hidden })
    }

    fn target_value(&self, features: &[f64]) -> Result<f64, NnError> {
        let a = self.target_actor.forward(features)?;
        Ok(self.target_critic.forward(&concat(features, &a))?[0])
    }

    fn prepare_flat(&self, batch: &[&Transition]) -> Result<Prepared, AgentError> {
        let gamma = self.cfg.gamma;
        let mut features = Vec::with_capacity(batch.len());
        let mut caches = Vec::new();
        let mut targets = Vec::with_capacity(batch.len());
        for t in batch {
            match &self.features {
                FeatureNet::Visual(enc) => {
                    let cache = enc.forward(&image_tensor(&t.obs)?, &t.obs.kinematics)?;
                    features.push(cache.output().to_vec());
                    caches.push(cache);
                }
                net => features.push(Self::features_with(net, &t.obs, &[])?.0),
            }
            let next_q = if t.done {
                0.0
            } else {
                let (nf, _) = Self::features_with(&self.target_features, &t.next_obs, &[])?;
                self.target_value(&nf)?
            };
            targets.push(critic_target(t.reward, gamma, t.done, next_q));
        }
        let cache = if caches.is_empty() { FeatureCache::None } else { FeatureCache::Visual(caches) };
        Ok(Prepared { features, actions: batch.iter().map(|t| t.action).collect(), targets, cache })
    }

    fn prepare_recurrent(&self, batch: &[&SequenceSample]) -> Result<Prepared, AgentError> {
        let (FeatureNet::Recurrent(cell), FeatureNet::Recurrent(target_cell)) = (&self.features, &self.target_features)
        else {
            return Err(AgentError::Config("sequence batches need a recurrent agent".into()));
        };
        let gamma = self.cfg.gamma;
        let mut prep =
            Prepared { features: Vec::new(), actions: Vec::new(), targets: Vec::new(), cache: FeatureCache::None };
        let mut windows = Vec::with_capacity(batch.len());
        for w in batch {
            let offset = prep.features.len();
            let mut hs = vec![w.h0.clone()];
            for st in &w.steps {
                let h = cell.step(hs.last().expect("non-empty"), &st.obs)?;
                let next_q = if st.done {
                    0.0
                } else {
                    let h_next = target_cell.step(&h, &st.next_obs)?;
                    self.target_value(&h_next)?
                };
                prep.targets.push(critic_target(st.reward, gamma, st.done, next_q));
                prep.actions.push(st.action);
                prep.features.push(h.clone());
                hs.push(h);
            }
            windows.push(WindowCache { hs, obs: w.steps.iter().map(|s| s.obs).collect(), offset });
        }
        prep.cache = FeatureCache::Recurrent(windows);
        Ok(prep)
    }

    /// Zeroes and accumulates critic and feature-network gradients of the
    /// mean squared TD error; returns the loss.
    fn critic_gradients(&mut self, prep: &Prepared) -> Result<f64, AgentError> {
        let n = prep.features.len();
        if n == 0 {
            return Err(AgentError::EmptyBatch);
        }
        self.critic.zero_grad();
        self.features.zero_grad();
        let nf = self.feature_dim();
        let mut loss = 0.0;
        let mut d_features = Vec::with_capacity(n);
        for i in 0..n {
            let cache = self.critic.forward_cached(&concat(&prep.features[i], &prep.actions[i]))?;
            let diff = cache.output()[0] - prep.targets[i];
            loss += diff * diff / n as f64;
            let d_in = self.critic.backward(&cache, &[2.0 * diff / n as f64]);
            d_features.push(d_in[..nf].to_vec());
        }
        match (&prep.cache, &mut self.features) {
            (FeatureCache::Visual(caches), FeatureNet::Visual(enc)) => {
                for (c, d) in caches.iter().zip(&d_features) {
                    enc.backward(c, d);
                }
            }
            (FeatureCache::Recurrent(windows), FeatureNet::Recurrent(cell)) => {
                for w in windows {
                    let mut carry = vec![0.0; cell.hidden];
                    for t in (0..w.obs.len()).rev() {
                        let dh: Vec<f64> = carry.iter().zip(&d_features[w.offset + t]).map(|(a, b)| a + b).collect();
                        carry = cell.backward(&w.hs[t], &w.obs[t], &w.hs[t + 1], &dh).0;
                    }
                }
            }
            _ => {}
        }
        Ok(loss)
    }

    /// Raw gradient (flattened) of the actor's descent loss `−mean Q(f, μ(f))`.
    pub fn actor_gradient(&mut self, features: &[Vec<f64>]) -> Result<(f64, Vec<f64>), AgentError> {
        let critic = &self.critic;
        let obj = policy_gradient(
            &mut self.actor,
            features,
            |f, a| critic_value_and_action_grad(critic, f, a),
            Direction::Ascend,
        )?;
        Ok((obj, self.actor.flat_grads()))
    }

    /// Raw gradient (flattened) of the adversary's descent loss `+mean Q(f, μ̄(f))`.
    pub fn adversary_gradient(&mut self, features: &[Vec<f64>]) -> Result<(f64, Vec<f64>), AgentError> {
        let critic = &self.critic;
        let obj = policy_gradient(
            &mut self.adversary,
            features,
            |f, a| critic_value_and_action_grad(critic, f, a),
            Direction::Descend,
        )?;
        Ok((obj, self.adversary.flat_grads()))
    }

    fn check_finite(&self, what: &str, values: &[f64]) -> Result<(), AgentError> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(AgentError::NonFinite { what: what.into(), update: self.updates })
        }
    }

    fn step_critic(&mut self) -> Result<(), AgentError> {
        let mut params = self.critic.params_mut();
        params.extend(self.features.params_mut());
        self.critic_opt.update(&mut params, self.cfg.critic_lr)?;
        Ok(())
    }

    fn soft_update_targets(&mut self) -> Result<(), AgentError> {
        let tau = self.cfg.tau;
        if tau > 0.0 {
            soft_update(&mut self.target_critic, &self.critic, tau)?;
            soft_update(&mut self.target_actor, &self.actor, tau)?;
            soft_update(&mut self.target_features, &self.features, tau)?;
        }
        Ok(())
    }

    /// Critic, actor and (for robust variants) adversary gradients are all
    /// taken at the current parameters, then every network steps once and
    /// the targets track the online networks.
    fn apply(&mut self, prep: Prepared) -> Result<UpdateStats, AgentError> {
        let critic_loss = self.critic_gradients(&prep)?;
        self.check_finite("critic loss", &[critic_loss])?;
        self.check_finite("critic gradient", &self.critic.flat_grads())?;
        self.check_finite("feature gradient", &self.features.flat_grads())?;
        let (actor_objective, g) = self.actor_gradient(&prep.features)?;
        self.check_finite("actor gradient", &g)?;
        let mut adversary_objective = 0.0;
        if self.variant.robust() {
            let (obj, g) = self.adversary_gradient(&prep.features)?;
            self.check_finite("adversary gradient", &g)?;
            adversary_objective = obj;
        }
        self.step_critic()?;
        self.actor_opt.step_module(&mut self.actor, self.cfg.actor_lr)?;
        if self.variant.robust() {
            self.adversary_opt.step_module(&mut self.adversary, self.cfg.adversary_lr)?;
        }
        self.soft_update_targets()?;
        self.updates += 1;
        Ok(UpdateStats { critic_loss, actor_objective, adversary_objective })
    }

    /// One full minibatch iteration on flat transitions.
    pub fn update_flat(&mut self, batch: &[&Transition]) -> Result<UpdateStats, AgentError> {
        let prep = self.prepare_flat(batch)?;
        self.apply(prep)
    }

    /// One full minibatch iteration on recurrent windows.
    pub fn update_recurrent(&mut self, batch: &[&SequenceSample]) -> Result<UpdateStats, AgentError> {
        let prep = self.prepare_recurrent(batch)?;
        self.apply(prep)
    }

    /// A single Adam step on the critic (and feature network) alone;
    /// returns the loss before the step.
    pub fn update_critic(&mut self, batch: &[&Transition]) -> Result<f64, AgentError> {
        let prep = self.prepare_flat(batch)?;
        let loss = self.critic_gradients(&prep)?;
        self.check_finite("critic loss", &[loss])?;
        self.step_critic()?;
        Ok(loss)
    }

    /// A single Adam step ascending the critic; returns the objective
    /// before the step.
    pub fn update_actor(&mut self, features: &[Vec<f64>]) -> Result<f64, AgentError> {
        let (obj, g) = self.actor_gradient(features)?;
        self.check_finite("actor gradient", &g)?;
        self.actor_opt.step_module(&mut self.actor, self.cfg.actor_lr)?;
        Ok(obj)
    }

    /// A single Adam step descending the critic; returns the objective
    /// before the step.
    pub fn update_adversary(&mut self, features: &[Vec<f64>]) -> Result<f64, AgentError> {
        let (obj, g) = self.adversary_gradient(features)?;
        self.check_finite("adversary gradient", &g)?;
        self.adversary_opt.step_module(&mut self.adversary, self.cfg.adversary_lr)?;
        Ok(obj)
    }

    pub fn all_finite(&self) -> bool {
        self.features.all_finite() && self.actor.all_finite() && self.adversary.all_finite() && self.critic.all_finite()
    }

    /// Online and target parameters as named tensors.
    pub fn to_checkpoint(&self) -> Result<Checkpoint, AgentError> {
        let mut ck = Checkpoint::new();
        ck.add("features", &self.features)?;
        ck.add("actor", &self.actor)?;
        ck.add("adversary", &self.adversary)?;
        ck.add("critic", &self.critic)?;
        ck.add("target_features", &self.target_features)?;
        ck.add("target_actor", &self.target_actor)?;
        ck.add("target_critic", &self.target_critic)?;
        Ok(ck)
    }

    /// Rebuilds an agent from a checkpoint; optimizer state starts fresh.
    pub fn from_checkpoint(variant: Variant, cfg: &AgentConfig, ck: &Checkpoint) -> Result<Self, AgentError> {
        let mut agent = Agent::new(variant, cfg, 0)?;
        ck.load("features", &mut agent.features)?;
        ck.load("actor", &mut agent.actor)?;
        ck.load("adversary", &mut agent.adversary)?;
        ck.load("critic", &mut agent.critic)?;
        ck.load("target_features", &mut agent.target_features)?;
        ck.load("target_actor", &mut agent.target_actor)?;
        ck.load("target_critic", &mut agent.target_critic)?;
        Ok(agent)
    }
}

/// Everything observed and done at one step of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub obs: Observation,
    pub hidden_before: Vec<f64>,
    pub action: [f64; 2],
    pub a_mu: [f64; 2],
    pub a_adv: [f64; 2],
    pub reward: f64,
    pub next_obs: Observation,
    /// Bootstrapping stops here (lane departure only).
    pub done: bool,
    /// Vehicle state after the step.
    pub state: VehicleState,
    /// True lateral deviation after the step.
    pub lateral: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeRecord {
    pub total_return: f64,
    pub steps: Vec<StepRecord>,
    pub verdict: Option<Verdict>,
    /// Set when the episode was aborted by an environment or agent fault.
    pub fault: Option<String>,
}

impl EpisodeRecord {
    pub fn lateral_errors(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.lateral).collect()
    }

    pub fn actions(&self) -> Vec<[f64; 2]> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn completed(&self) -> bool {
        self.verdict == Some(Verdict::RouteComplete)
    }

    pub fn into_transitions(self) -> Vec<Transition> {
        self.steps
            .into_iter()
            .map(|s| Transition { obs: s.obs, action: s.action, reward: s.reward, next_obs: s.next_obs, done: s.done })
            .collect()
    }

    /// Consecutive non-overlapping windows of at most `len` steps.
    pub fn into_windows(self, len: usize) -> Vec<SequenceSample> {
        self.steps
            .chunks(len.max(1))
            .map(|chunk| SequenceSample {
                h0: chunk[0].hidden_before.clone(),
                steps: chunk
                    .iter()
                    .map(|s| SequenceStep {
                        obs: s.obs.kinematics,
                        action: s.action,
                        reward: s.reward,
                        next_obs: s.next_obs.kinematics,
                        done: s.done,
                    })
                    .collect(),
            })
            .collect()
    }
}

/// Exploration for one episode: noise level and its RNG.
pub struct Exploration<'a> {
    pub std: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Plays `env` to termination. Faults end the episode early and are
/// recorded; the steps taken so far are kept.
pub fn run_episode(
    agent: &Agent,
    env: &mut Env,
    mut exploration: Option<Exploration<'_>>,
    alpha: f64,
    perception: Option<&CoeffRegressor>,
) -> EpisodeRecord {
    let mut record = EpisodeRecord::default();
    let visual = agent.variant.visual();
    let mut obs = match env.observe(visual, perception) {
        Ok(o) => o,
        Err(e) => {
            record.fault = Some(e.to_string());
            return record;
        }
    };
    let mut hidden = agent.initial_hidden();
    while !env.finished {
        let noise = match exploration.as_mut() {
            Some(x) => ExplorationNoise::sample(x.std, x.rng),
            None => [0.0; 2],
        };
        let out = match agent.act(&obs, &hidden, noise, alpha) {
            Ok(o) => o,
            Err(e) => {
                record.fault = Some(e.to_string());
                break;
            }
        };
        let outcome = match env.step(Action::from_slice(&out.mixed)) {
            Ok(o) => o,
            Err(e) => {
                record.fault = Some(e.to_string());
                break;
            }
        };
        let next_obs = match env.observe(visual, perception) {
            Ok(o) => o,
            Err(EnvError::Finished) => obs.clone(),
            Err(e) => {
                record.fault = Some(e.to_string());
                break;
            }
        };
        record.total_return += outcome.reward;
        record.verdict = Some(outcome.verdict);
        record.steps.push(StepRecord {
            obs: std::mem::replace(&mut obs, next_obs.clone()),
            hidden_before: std::mem::replace(&mut hidden, out.hidden),
            action: out.mixed,
            a_mu: out.a_mu,
            a_adv: out.a_adv,
            reward: outcome.reward,
            next_obs,
            done: outcome.verdict == Verdict::LaneDeparture,
            state: env.state,
            lateral: outcome.err.d,
            verdict: outcome.verdict,
        });
    }
    record
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>(), Ok(v));
        }
        let err = "ar-dpg".parse::<Variant>().unwrap_err();
        assert!(err.to_string().contains("ar-cadpg"));
    }

    #[test]
    fn mixing_extremes() {
        let (mu, adv) = ([0.3, -0.2], [-0.9, 0.7]);
        assert_eq!(mix_actions(mu, adv, 0.0), mu);
        assert_eq!(mix_actions(mu, adv, 1.0), adv);
        let m = mix_actions([1.0, 0.0], [-1.0, 0.0], 0.1);
        assert!((m[0] - 0.8).abs() < 1e-15 && m[1] == 0.0);
        assert_eq!(mix_actions([1.4, 0.0], [1.4, 0.0], 0.5), [1.0, 0.0]);
    }

    #[test]
    fn target_arithmetic() {
        assert_eq!(critic_target(1.5, 0.0, false, 7.0), 1.5);
        assert_eq!(critic_target(1.5, 0.95, true, 7.0), 1.5);
        assert!((critic_target(1.0, 0.95, false, 2.0) - 2.9).abs() < 1e-15);
    }

    #[test]
    fn replay_ring_evicts_oldest() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(i);
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.iter().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(buf.sample(50, &mut rng).iter().all(|&&v| (2..5).contains(&v)));
    }

    #[test]
    fn noise_schedule_is_linear() {
        let n = ExplorationNoise { initial: 0.2, final_std: 0.02, decay_episodes: 10 };
        assert_eq!(n.std_at(0), 0.2);
        assert!((n.std_at(5) - 0.11).abs() < 1e-12);
        assert!((n.std_at(50) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn ddpg_never_mixes() {
        assert_eq!(Variant::Ddpg.effective_alpha(0.1), 0.0);
        assert_eq!(Variant::ArCadpg.effective_alpha(0.1), 0.1);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = AgentConfig { gamma: 1.0, ..AgentConfig::default() };
        assert!(Agent::new(Variant::Ddpg, &cfg, 0).is_err());
    }
}
