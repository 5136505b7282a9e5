//! Deep deterministic policy gradient agent.
//!
//! Actions are stored and learned in normalized units `[-1, 1]`; the applied
//! force is the normalized action times the environment's force limit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{StateVector, STATE_DIM};
use crate::env::Env;
use crate::error::{Error, Result};
use crate::neural::{
    adam_step, read_exact, soft_update, Activation, AdamConfig, AdamState, Mlp, MlpSpec,
};
use crate::stochastic::{derive_seed, stream_rng, OuParams, OuProcess, Stream};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: [f64; STATE_DIM],
    /// Normalized action in `[-1, 1]`.
    pub action: f64,
    pub reward: f64,
    pub next_state: [f64; STATE_DIM],
    /// True only for terminal transitions (observation limit breached);
    /// time-limit truncation still bootstraps.
    pub done: bool,
}

/// Column-stacked minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub dones: Array1<f64>,
}

impl Batch {
    pub fn from_transitions<'a>(items: impl ExactSizeIterator<Item = &'a Transition>) -> Self {
        let n = items.len();
        let mut batch = Batch {
            states: Array2::zeros((n, STATE_DIM)),
            actions: Array2::zeros((n, 1)),
            rewards: Array1::zeros(n),
            next_states: Array2::zeros((n, STATE_DIM)),
            dones: Array1::zeros(n),
        };
        for (i, t) in items.enumerate() {
            for j in 0..STATE_DIM {
                batch.states[[i, j]] = t.state[j];
                batch.next_states[[i, j]] = t.next_state[j];
            }
            batch.actions[[i, 0]] = t.action;
            batch.rewards[i] = t.reward;
            batch.dones[i] = if t.done { 1.0 } else { 0.0 };
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Fixed-capacity FIFO ring with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("buffer_capacity", "must be >= 1"));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 20)),
            next: 0,
            rng,
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stored transitions, oldest first.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity {
            0
        } else {
            self.next
        };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// Uniform sample with replacement.
    pub fn sample(&mut self, batch_size: usize) -> Result<Batch> {
        if batch_size == 0 || self.items.len() < batch_size {
            return Err(Error::InsufficientSamples {
                len: self.items.len(),
                needed: batch_size.max(1),
            });
        }
        let n = self.items.len();
        let picks: Vec<&Transition> = (0..batch_size)
            .map(|_| &self.items[self.rng.random_range(0..n)])
            .collect();
        Ok(Batch::from_transitions(picks.into_iter()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Transitions collected before the first gradient update.
    pub warmup_steps: usize,
    pub total_train_steps: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// Per-step mean reversion of the exploration OU process.
    pub exploration_kappa: f64,
    /// Per-step noise magnitude of the exploration OU process (normalized action units).
    pub exploration_sigma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of training over which ε decays linearly.
    pub epsilon_decay_fraction: f64,
    /// Rewards are multiplied by this before critic regression. Keeps Q
    /// values of order one; the greedy policy is unaffected.
    pub reward_scale: f64,
    /// Network inputs are `state / obs_scale`.
    pub obs_scale: [f64; STATE_DIM],
    /// Half-width of the uniform initialization of both output layers.
    pub final_layer_init: f64,
    /// Use the odd policy `μ(s) = (net(s) − net(−s)) / 2`. The plant is
    /// mirror symmetric, so this loses nothing and forces zero push at rest.
    pub mirror_actor: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl AgentConfig {
    /// Small networks and a short run suitable for a laptop.
    pub fn desk() -> Self {
        Self {
            gamma: 0.99,
            actor_lr: 0.001,
            critic_lr: 0.001,
            tau: 0.005,
            batch_size: 512,
            buffer_capacity: 100_000,
            warmup_steps: 1_000,
            total_train_steps: 30_000,
            actor_hidden: vec![64, 64],
            critic_hidden: vec![128, 128],
            exploration_kappa: 0.15,
            exploration_sigma: 0.05,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_decay_fraction: 0.8,
            reward_scale: 0.01,
            // Angles and rates of order 0.01 reach the network at order 0.1-1.
            obs_scale: [0.1, 0.1, 0.01, 0.1, 0.01, 0.1],
            final_layer_init: 3e-3,
            mirror_actor: false,
        }
    }

    /// Twenty hidden layers of 256 (actor) and 512 (critic), 100k steps.
    pub fn paper() -> Self {
        Self {
            total_train_steps: 100_000,
            actor_hidden: vec![256; 20],
            critic_hidden: vec![512; 20],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(
                "gamma",
                format!("must be in (0, 1), got {}", self.gamma),
            ));
        }
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::invalid(name, format!("must be > 0, got {lr}")));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::invalid(
                "tau",
                format!("must be in [0, 1], got {}", self.tau),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if self.buffer_capacity < self.batch_size {
            return Err(Error::invalid("buffer_capacity", "must be >= batch_size"));
        }
        if self.actor_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return Err(Error::invalid("hidden layers", "widths must be >= 1"));
        }
        OuParams {
            kappa: self.exploration_kappa,
            mu: 0.0,
            sigma: self.exploration_sigma,
        }
        .validate()?;
        if !(self.epsilon_start >= 0.0 && self.epsilon_end >= 0.0) {
            return Err(Error::invalid("epsilon", "schedule endpoints must be >= 0"));
        }
        if !(self.epsilon_decay_fraction > 0.0 && self.epsilon_decay_fraction <= 1.0) {
            return Err(Error::invalid(
                "epsilon_decay_fraction",
                "must be in (0, 1]",
            ));
        }
        if !(self.reward_scale.is_finite() && self.reward_scale > 0.0) {
            return Err(Error::invalid("reward_scale", "must be finite and > 0"));
        }
        if self.obs_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(
                "obs_scale",
                "entries must be finite and > 0",
            ));
        }
        if !(self.final_layer_init.is_finite() && self.final_layer_init >= 0.0) {
            return Err(Error::invalid("final_layer_init", "must be >= 0"));
        }
        Ok(())
    }

    pub fn actor_spec(&self) -> MlpSpec {
        MlpSpec::new(STATE_DIM, self.actor_hidden.clone(), 1, Activation::Tanh)
    }

    pub fn critic_spec(&self) -> MlpSpec {
        MlpSpec::new(
            STATE_DIM + 1,
            self.critic_hidden.clone(),
            1,
            Activation::Linear,
        )
    }

    /// Linear decay from `epsilon_start` to `epsilon_end` over the first
    /// `epsilon_decay_fraction` of training, constant afterwards.
    pub fn epsilon(&self, step: usize) -> f64 {
        let horizon = self.epsilon_decay_fraction * self.total_train_steps as f64;
        if horizon <= 0.0 {
            return self.epsilon_end;
        }
        let frac = (step as f64 / horizon).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }

    fn exploration(&self) -> OuParams {
        OuParams {
            kappa: self.exploration_kappa,
            mu: 0.0,
            sigma: self.exploration_sigma,
        }
    }
}

/// Actor output for one scaled state row, odd-symmetrized when `mirror` is set.
fn actor_single(actor: &Mlp, input: &[f64; STATE_DIM], mirror: bool) -> Result<f64> {
    let out = actor.predict(input)?[0];
    if !mirror {
        return Ok(out);
    }
    let negated = input.map(|v| -v);
    Ok(0.5 * (out - actor.predict(&negated)?[0]))
}

/// Batched actor outputs without caching activations.
fn actor_inference(actor: &Mlp, states: &Array2<f64>, mirror: bool) -> Result<Array2<f64>> {
    if !mirror {
        return actor.forward_inference(states.view());
    }
    let out = actor.forward_inference(mirrored_stack(states).view())?;
    Ok(fold_mirrored(&out))
}

/// Rows of `states` followed by their negations.
fn mirrored_stack(states: &Array2<f64>) -> Array2<f64> {
    let negated = states.mapv(|v| -v);
    ndarray::concatenate(Axis(0), &[states.view(), negated.view()]).expect("column counts match")
}

/// `(top − bottom) / 2` over a stacked output.
fn fold_mirrored(out: &Array2<f64>) -> Array2<f64> {
    let n = out.nrows() / 2;
    (&out.slice(s![..n, ..]) - &out.slice(s![n.., ..])).mapv(|v| 0.5 * v)
}

/// Bellman regression targets `c·r + γ (1 − done) Q′(s′, μ′(s′))`, where `c`
/// is `reward_scale`.
pub fn critic_target(
    batch: &Batch,
    target_actor: &Mlp,
    target_critic: &Mlp,
    gamma: f64,
    reward_scale: f64,
    obs_scale: &[f64; STATE_DIM],
    mirror_actor: bool,
) -> Result<Array1<f64>> {
    if batch.is_empty() {
        return Err(Error::InsufficientSamples { len: 0, needed: 1 });
    }
    let next = scale_states(&batch.next_states, obs_scale);
    let next_actions = actor_inference(target_actor, &next, mirror_actor)?;
    let q_next = target_critic.forward_inference(concat_action(&next, &next_actions).view())?;
    let q_next = q_next.column(0);
    let mut y = batch.rewards.mapv(|r| reward_scale * r);
    for i in 0..y.len() {
        if batch.dones[i] == 0.0 {
            y[i] += gamma * q_next[i];
        }
    }
    Ok(y)
}

fn scale_states(states: &Array2<f64>, obs_scale: &[f64; STATE_DIM]) -> Array2<f64> {
    let mut out = states.clone();
    for mut row in out.rows_mut() {
        for (v, s) in row.iter_mut().zip(obs_scale) {
            *v /= s;
        }
    }
    out
}

fn concat_action(states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[states.view(), actions.view()]).expect("row counts match")
}

/// Loss diagnostics from one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainDiagnostics {
    pub critic_loss: f64,
    /// Mean `Q(s, μ(s))` over the batch before the actor update.
    pub actor_objective: f64,
}

/// Read-only deterministic policy, shareable across evaluation workers.
#[derive(Clone, Debug)]
pub struct Policy {
    actor: Mlp,
    force_limit: f64,
    obs_scale: [f64; STATE_DIM],
    mirror: bool,
}

impl Policy {
    pub fn new(actor: Mlp, force_limit: f64, obs_scale: [f64; STATE_DIM]) -> Self {
        Self {
            actor,
            force_limit,
            obs_scale,
            mirror: false,
        }
    }

    /// Evaluate the actor as the odd function `(net(s) − net(−s)) / 2`.
    pub fn mirrored(mut self, mirror: bool) -> Self {
        self.mirror = mirror;
        self
    }

    /// Actor output in `[-1, 1]`.
    pub fn normalized_action(&self, state: &StateVector) -> f64 {
        let mut input = [0.0; STATE_DIM];
        for (i, v) in input.iter_mut().enumerate() {
            *v = state.0[i] / self.obs_scale[i];
        }
        actor_single(&self.actor, &input, self.mirror).unwrap_or(0.0)
    }

    /// Force in newtons.
    pub fn force(&self, state: &StateVector) -> f64 {
        self.force_limit * self.normalized_action(state)
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn force_limit(&self) -> f64 {
        self.force_limit
    }
}

#[derive(Clone, Debug)]
pub struct Agent {
    config: AgentConfig,
    force_limit: f64,
    actor: Mlp,
    critic: Mlp,
    target_actor: Mlp,
    target_critic: Mlp,
    actor_opt: AdamState,
    critic_opt: AdamState,
    noise: OuProcess,
    updates: u64,
}

impl Agent {
    pub fn new(config: AgentConfig, force_limit: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(force_limit.is_finite() && force_limit > 0.0) {
            return Err(Error::invalid("force_limit", "must be > 0"));
        }
        let mut rng = stream_rng(seed, Stream::NetworkInit);
        let actor = Mlp::init(config.actor_spec(), &mut rng, config.final_layer_init)?;
        let critic = Mlp::init(config.critic_spec(), &mut rng, config.final_layer_init)?;
        let actor_opt = AdamState::new(
            &actor,
            AdamConfig {
                learning_rate: config.actor_lr,
                ..AdamConfig::default()
            },
        );
        let critic_opt = AdamState::new(
            &critic,
            AdamConfig {
                learning_rate: config.critic_lr,
                ..AdamConfig::default()
            },
        );
        let noise = OuProcess::new(
            config.exploration(),
            0.0,
            stream_rng(seed, Stream::Exploration),
        );
        Ok(Self {
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            actor_opt,
            critic_opt,
            noise,
            updates: 0,
            config,
            force_limit,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn force_limit(&self) -> f64 {
        self.force_limit
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    pub fn target_actor(&self) -> &Mlp {
        &self.target_actor
    }

    pub fn target_critic(&self) -> &Mlp {
        &self.target_critic
    }

    pub fn actor_mut(&mut self) -> &mut Mlp {
        &mut self.actor
    }

    pub fn critic_mut(&mut self) -> &mut Mlp {
        &mut self.critic
    }

    /// Number of gradient updates applied so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn policy(&self) -> Policy {
        Policy::new(self.actor.clone(), self.force_limit, self.config.obs_scale)
            .mirrored(self.config.mirror_actor)
    }

    fn normalized_action(&self, state: &StateVector) -> f64 {
        let mut input = [0.0; STATE_DIM];
        for (i, v) in input.iter_mut().enumerate() {
            *v = state.0[i] / self.config.obs_scale[i];
        }
        actor_single(&self.actor, &input, self.config.mirror_actor).unwrap_or(0.0)
    }

    /// Deterministic force `force_limit · μ(s)`.
    pub fn act(&self, state: &StateVector) -> f64 {
        self.force_limit * self.normalized_action(state)
    }

    /// Exploration force `clamp(μ(s) + ε(t)·n, −1, 1) · force_limit` where
    /// `n` is the exploration OU process, advanced once per call.
    pub fn act_noisy(&mut self, state: &StateVector, step: usize) -> f64 {
        let noise = self.noise.step(1.0);
        let eps = self.config.epsilon(step);
        let action = (self.normalized_action(state) + eps * noise).clamp(-1.0, 1.0);
        action * self.force_limit
    }

    pub fn reset_noise(&mut self) {
        self.noise.set_value(0.0);
    }

    pub fn noise_value(&self) -> f64 {
        self.noise.value()
    }

    pub fn critic_target(&self, batch: &Batch) -> Result<Array1<f64>> {
        critic_target(
            batch,
            &self.target_actor,
            &self.target_critic,
            self.config.gamma,
            self.config.reward_scale,
            &self.config.obs_scale,
            self.config.mirror_actor,
        )
    }

    /// One critic regression step, one actor ascent step, then soft target updates.
    pub fn train_step(&mut self, buffer: &mut ReplayBuffer) -> Result<TrainDiagnostics> {
        let batch = buffer.sample(self.config.batch_size)?;
        self.train_on_batch(&batch)
    }

    pub fn train_on_batch(&mut self, batch: &Batch) -> Result<TrainDiagnostics> {
        let critic_loss = self.critic_update(batch)?;
        let actor_objective = self.actor_update(&batch.states)?;
        soft_update(&mut self.target_critic, &self.critic, self.config.tau)?;
        soft_update(&mut self.target_actor, &self.actor, self.config.tau)?;
        self.updates += 1;

        debug_assert!(
            self.actor.all_finite() && self.critic.all_finite(),
            "non-finite parameters after update {}",
            self.updates
        );
        Ok(TrainDiagnostics {
            critic_loss,
            actor_objective,
        })
    }

    /// One Adam step of the critic on mean (Q(s, a) − y)². Returns the loss
    /// before the step.
    pub fn critic_update(&mut self, batch: &Batch) -> Result<f64> {
        let n = batch.len() as f64;
        let targets = self.critic_target(batch)?;
        let states = scale_states(&batch.states, &self.config.obs_scale);
        let q = self
            .critic
            .forward(concat_action(&states, &batch.actions).view())?;
        let err = &q.column(0) - &targets;
        let loss = err.mapv(|e| e * e).sum() / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "critic loss",
                detail: format!("update {}: loss {loss}", self.updates),
            });
        }
        let upstream = err.mapv(|e| 2.0 * e / n).insert_axis(Axis(1));
        self.critic.backward(upstream.view())?;
        adam_step(&mut self.critic, &mut self.critic_opt).map(|_| loss)
    }

    /// One Adam step of the actor ascending mean Q(s, μ(s)) through
    /// ∇ₐQ · ∇θ μ, with the critic held fixed. `states` are raw (unscaled)
    /// rows. Returns the objective before the step.
    pub fn actor_update(&mut self, states: &Array2<f64>) -> Result<f64> {
        let n = states.nrows() as f64;
        let states = scale_states(states, &self.config.obs_scale);
        let mirror = self.config.mirror_actor;
        let actions = if mirror {
            fold_mirrored(&self.actor.forward(mirrored_stack(&states).view())?)
        } else {
            self.actor.forward(states.view())?
        };
        let q_pi = self
            .critic
            .forward(concat_action(&states, &actions).view())?;
        let objective = q_pi.sum() / n;
        let dq_dinput = self
            .critic
            .backward(Array2::from_elem((states.nrows(), 1), -1.0 / n).view())?;
        let dq_da = dq_dinput.slice(s![.., STATE_DIM..]).to_owned();
        if mirror {
            let half = dq_da.mapv(|g| 0.5 * g);
            let upstream = ndarray::concatenate(Axis(0), &[half.view(), half.mapv(|g| -g).view()])
                .expect("column counts match");
            self.actor.backward(upstream.view())?;
        } else {
            self.actor.backward(dq_da.view())?;
        }
        adam_step(&mut self.actor, &mut self.actor_opt)?;
        Ok(objective)
    }

    /// Saves networks, optimizer moments and the update counter.
    ///
    /// ```text
    /// b"FIPWCAGT"  u32 version=1  f64 force_limit  u64 updates  u64 env_steps
    /// u32 n + n bytes of TOML-encoded AgentConfig
    /// actor, critic, target actor, target critic (network layout)
    /// actor Adam, critic Adam: u64 step, first moments, second moments (f64, layer order)
    /// ```
    pub fn save(&self, path: &Path, env_steps: u64) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w, env_steps)
            .map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W, env_steps: u64) -> std::io::Result<()> {
        w.write_all(AGENT_MAGIC)?;
        w.write_all(&AGENT_VERSION.to_le_bytes())?;
        w.write_all(&self.force_limit.to_le_bytes())?;
        w.write_all(&self.updates.to_le_bytes())?;
        w.write_all(&env_steps.to_le_bytes())?;
        let echo = toml::to_string(&self.config).map_err(std::io::Error::other)?;
        w.write_all(&(echo.len() as u32).to_le_bytes())?;
        w.write_all(echo.as_bytes())?;
        for net in [
            &self.actor,
            &self.critic,
            &self.target_actor,
            &self.target_critic,
        ] {
            net.write_to(w)?;
        }
        self.actor_opt.write_to(w)?;
        self.critic_opt.write_to(w)
    }

    /// Loads a checkpoint; returns the agent and the environment step count
    /// it was saved at. Exploration noise restarts at zero.
    pub fn load(path: &Path, seed: u64) -> Result<(Self, u64)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file), seed)
    }

    pub fn read_from<R: Read>(r: &mut R, seed: u64) -> Result<(Self, u64)> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != AGENT_MAGIC {
            return Err(Error::Checkpoint("not an agent checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        read_exact(r, &mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != AGENT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported agent version {version}"
            )));
        }
        let mut b8 = [0u8; 8];
        read_exact(r, &mut b8)?;
        let force_limit = f64::from_le_bytes(b8);
        read_exact(r, &mut b8)?;
        let updates = u64::from_le_bytes(b8);
        read_exact(r, &mut b8)?;
        let env_steps = u64::from_le_bytes(b8);
        read_exact(r, &mut b4)?;
        let len = u32::from_le_bytes(b4) as usize;
        let mut text = vec![0u8; len];
        read_exact(r, &mut text)?;
        let text = String::from_utf8(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let config: AgentConfig =
            toml::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let actor = Mlp::read_from(r)?;
        let critic = Mlp::read_from(r)?;
        let target_actor = Mlp::read_from(r)?;
        let target_critic = Mlp::read_from(r)?;
        if actor.spec() != &config.actor_spec() || critic.spec() != &config.critic_spec() {
            return Err(Error::Checkpoint(
                "network shapes disagree with stored config".into(),
            ));
        }
        let actor_opt = AdamState::read_from(
            r,
            &actor,
            AdamConfig {
                learning_rate: config.actor_lr,
                ..AdamConfig::default()
            },
        )?;
        let critic_opt = AdamState::read_from(
            r,
            &critic,
            AdamConfig {
                learning_rate: config.critic_lr,
                ..AdamConfig::default()
            },
        )?;
        let noise = OuProcess::new(
            config.exploration(),
            0.0,
            stream_rng(seed, Stream::Exploration),
        );
        let agent = Self {
            config,
            force_limit,
            actor,
            critic,
            target_actor,
            target_critic,
            actor_opt,
            critic_opt,
            noise,
            updates,
        };
        Ok((agent, env_steps))
    }
}

const AGENT_MAGIC: &[u8; 8] = b"FIPWCAGT";
const AGENT_VERSION: u32 = 1;

/// One row of the training log, written when an episode ends.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpisodeLog {
    pub step: usize,
    pub episode: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    /// Mean critic loss over the episode's updates (NaN before warmup ends).
    pub critic_loss: f64,
    pub actor_objective: f64,
    pub epsilon: f64,
}

/// Runs the training loop from `start_step` to `config.total_train_steps`.
///
/// `on_episode` receives every finished episode; `on_checkpoint` is called
/// with the agent every `checkpoint_interval` environment steps (0 disables).
pub fn train(
    agent: &mut Agent,
    env: &mut Env,
    seed: u64,
    start_step: usize,
    checkpoint_interval: usize,
    mut on_episode: impl FnMut(&EpisodeLog) -> Result<()>,
    mut on_checkpoint: impl FnMut(&Agent, usize) -> Result<()>,
) -> Result<Vec<EpisodeLog>> {
    let total = agent.config.total_train_steps;
    let warmup = agent.config.warmup_steps.max(agent.config.batch_size);
    let mut buffer = ReplayBuffer::new(
        agent.config.buffer_capacity,
        stream_rng(derive_seed(seed, start_step as u64), Stream::Replay),
    )?;
    let episode_base = derive_seed(seed, Stream::EpisodeSeeds as u64);

    let mut logs = Vec::new();
    let mut episode = 0usize;
    let mut state = env.reset(derive_seed(episode_base, (start_step as u64) << 20));
    agent.reset_noise();
    let mut ep_return = 0.0;
    let mut loss_sum = 0.0;
    let mut objective_sum = 0.0;
    let mut updates = 0usize;
    let mut collected = 0usize;

    for step in start_step..total {
        let force = agent.act_noisy(&state, step);
        let result = env.step(force)?;
        buffer.push(Transition {
            state: state.0,
            action: result.info.force / agent.force_limit,
            reward: result.reward,
            next_state: result.next_state.0,
            done: result.info.violated,
        });
        collected += 1;
        ep_return += result.reward;
        state = result.next_state;

        if collected >= warmup {
            let diag = agent.train_step(&mut buffer)?;
            loss_sum += diag.critic_loss;
            objective_sum += diag.actor_objective;
            updates += 1;
        }

        if result.done {
            let log = EpisodeLog {
                step: step + 1,
                episode,
                episode_return: ep_return,
                critic_loss: if updates > 0 {
                    loss_sum / updates as f64
                } else {
                    f64::NAN
                },
                actor_objective: if updates > 0 {
                    objective_sum / updates as f64
                } else {
                    f64::NAN
                },
                epsilon: agent.config.epsilon(step),
            };
            on_episode(&log)?;
            logs.push(log);
            episode += 1;
            state = env.reset(derive_seed(
                episode_base,
                ((start_step as u64) << 20) + episode as u64,
            ));
            agent.reset_noise();
            ep_return = 0.0;
            loss_sum = 0.0;
            objective_sum = 0.0;
            updates = 0;
        }

        if checkpoint_interval > 0 && (step + 1) % checkpoint_interval == 0 {
            on_checkpoint(agent, step + 1)?;
        }
    }
    Ok(logs)
}
