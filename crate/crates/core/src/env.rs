//! Episode wrapper around the dynamics: disturbance injection, reward, and
//! observation limits.

use serde::{Deserialize, Serialize};

use crate::dynamics::{rk4_step, ModelParams, StateVector, STATE_DIM};
use crate::error::{Error, Result};
use crate::stochastic::{
    make_disturbances, sample_params, DisturbanceConfig, Disturbances, UncertaintySpec,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Integration and control step (s).
    pub dt: f64,
    pub episode_steps: usize,
    /// Actions are clamped to `±force_limit` newtons.
    pub force_limit: f64,
    pub enable_cart_disturbance: bool,
    /// Any state entry beyond this magnitude ends the episode.
    pub obs_limit: f64,
    /// Reward returned on the step that breaches `obs_limit`.
    pub violation_reward: f64,
    /// Weights on `[z, ż, φ, φ̇, θ, θ̇]`.
    pub reward_weights: [f64; STATE_DIM],
    pub control_effort_weight: f64,
    pub desired_state: [f64; STATE_DIM],
    /// Nominal plant; uncertain coefficients are resampled on every reset.
    pub model: ModelParams,
    pub uncertainty: UncertaintySpec,
    pub disturbances: DisturbanceConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            episode_steps: 1000,
            force_limit: 10.0,
            enable_cart_disturbance: true,
            obs_limit: 1e9,
            violation_reward: -1e7,
            reward_weights: [0.1, 0.5, 1.0, 1.0, 1.2, 1.0],
            control_effort_weight: 0.1,
            desired_state: [0.0; STATE_DIM],
            model: ModelParams::default(),
            uncertainty: UncertaintySpec::default(),
            disturbances: DisturbanceConfig::default(),
        }
    }
}

impl EnvConfig {
    /// Nominal plant, no disturbances: useful for deterministic checks.
    pub fn quiet() -> Self {
        Self {
            uncertainty: UncertaintySpec {
                relative_spread: 0.0,
            },
            disturbances: DisturbanceConfig::silent(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::invalid(
                "dt",
                format!("must be > 0, got {}", self.dt),
            ));
        }
        if self.episode_steps == 0 {
            return Err(Error::invalid("episode_steps", "must be > 0"));
        }
        if !(self.force_limit.is_finite() && self.force_limit > 0.0) {
            return Err(Error::invalid(
                "force_limit",
                format!("must be > 0, got {}", self.force_limit),
            ));
        }
        if self.obs_limit.is_nan() || self.obs_limit <= 0.0 {
            return Err(Error::invalid("obs_limit", "must be > 0"));
        }
        if !self.violation_reward.is_finite() {
            return Err(Error::invalid("violation_reward", "must be finite"));
        }
        if self
            .reward_weights
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::invalid("reward_weights", "must be finite and >= 0"));
        }
        if !(self.control_effort_weight.is_finite() && self.control_effort_weight >= 0.0) {
            return Err(Error::invalid(
                "control_effort_weight",
                "must be finite and >= 0",
            ));
        }
        if self.desired_state.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("desired_state", "must be finite"));
        }
        self.model.validate()?;
        self.uncertainty.validate()?;
        self.disturbances.validate()
    }

    pub fn episode_duration(&self) -> f64 {
        self.dt * self.episode_steps as f64
    }
}

/// `-dt · (Σ wᵢ (xᵢ - x_des,ᵢ)² + c · F²)`
pub fn reward(state: &StateVector, force: f64, config: &EnvConfig) -> f64 {
    let tracking: f64 = state
        .0
        .iter()
        .zip(config.desired_state.iter())
        .zip(config.reward_weights.iter())
        .map(|((x, d), w)| w * (x - d) * (x - d))
        .sum();
    -config.dt * (tracking + config.control_effort_weight * force * force)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Force actually applied after clamping (N).
    pub force: f64,
    /// Disturbance values added this step to `[ż, φ̇, θ̇]`.
    pub disturbances: [f64; 3],
    /// The observation limit was breached.
    pub violated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: StateVector,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Clone, Debug)]
pub struct Env {
    config: EnvConfig,
    params: ModelParams,
    state: StateVector,
    disturbances: Disturbances,
    steps: usize,
    done: bool,
}

impl Env {
    /// Validates `config` and resets with seed 0.
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let params = config.model;
        let disturbances = make_disturbances(&config.disturbances, 0);
        let mut env = Self {
            config,
            params,
            state: StateVector::ZERO,
            disturbances,
            steps: 0,
            done: false,
        };
        env.reset(0);
        Ok(env)
    }

    /// Starts a new episode at rest with freshly sampled plant coefficients
    /// and disturbance processes restarted at zero.
    pub fn reset(&mut self, seed: u64) -> StateVector {
        self.params = sample_params(&self.config.model, &self.config.uncertainty, seed);
        self.disturbances = make_disturbances(&self.config.disturbances, seed);
        self.state = StateVector::ZERO;
        self.steps = 0;
        self.done = false;
        self.state
    }

    pub fn step(&mut self, action: f64) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        if !action.is_finite() {
            return Err(Error::NonFinite {
                context: "action",
                detail: format!("{action}"),
            });
        }
        let limit = self.config.force_limit;
        let force = action.clamp(-limit, limit);
        let dt = self.config.dt;

        let mut next = rk4_step(&self.state, force, &self.params, dt)?;

        let cart = if self.config.enable_cart_disturbance {
            self.disturbances.cart.step(dt)
        } else {
            0.0
        };
        let phi = self.disturbances.phi.step(dt);
        let theta = self.disturbances.theta.step(dt);
        next[StateVector::Z_DOT] += cart;
        next[StateVector::PHI_DOT] += phi;
        next[StateVector::THETA_DOT] += theta;

        self.steps += 1;
        // NaN entries count as infinite.
        let violated = next.max_abs() > self.config.obs_limit;
        let reward = if violated {
            self.config.violation_reward
        } else {
            reward(&next, force, &self.config)
        };
        self.done = violated || self.steps >= self.config.episode_steps;
        self.state = next;

        Ok(StepResult {
            next_state: next,
            reward,
            done: self.done,
            info: StepInfo {
                force,
                disturbances: [cart, phi, theta],
                violated,
            },
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    /// Plant coefficients sampled for the current episode.
    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn state(&self) -> &StateVector {
        &self.state
    }

    /// Overrides the current state, e.g. to start from a tilted pendulum.
    pub fn set_state(&mut self, state: StateVector) {
        self.state = state;
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }
}
