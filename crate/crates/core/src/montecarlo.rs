//! Seeded episode runner and campaign statistics.

use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddpg::Policy;
use crate::dynamics::StateVector;
use crate::env::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::stochastic::derive_seed;

/// Anything that maps a state to a cart force.
pub trait Controller: Sync {
    fn force(&self, state: &StateVector) -> f64;
}

/// Applies no force.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroController;

impl Controller for ZeroController {
    fn force(&self, _state: &StateVector) -> f64 {
        0.0
    }
}

impl Controller for Policy {
    fn force(&self, state: &StateVector) -> f64 {
        Policy::force(self, state)
    }
}

impl<C: Controller + ?Sized> Controller for &C {
    fn force(&self, state: &StateVector) -> f64 {
        (**self).force(state)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeResult {
    /// Undiscounted sum of rewards.
    pub episode_return: f64,
    pub violated: bool,
    pub steps: usize,
    /// Largest |θ| seen (rad).
    pub max_abs_theta: f64,
    /// Largest |φ| seen (rad).
    pub max_abs_phi: f64,
}

/// One simulated step, as streamed to trajectory files.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    /// Time at the end of the step (s).
    pub time: f64,
    pub state: StateVector,
    pub force: f64,
    pub disturbances: [f64; 3],
    pub reward: f64,
}

pub fn run_episode(
    controller: &dyn Controller,
    env_config: &EnvConfig,
    seed: u64,
) -> Result<EpisodeResult> {
    run_episode_traced(controller, env_config, seed, |_| Ok(()))
}

/// Runs one episode from rest, calling `on_step` after every step.
pub fn run_episode_traced(
    controller: &dyn Controller,
    env_config: &EnvConfig,
    seed: u64,
    mut on_step: impl FnMut(&TraceRow) -> Result<()>,
) -> Result<EpisodeResult> {
    let mut env = Env::new(env_config.clone())?;
    let mut state = env.reset(seed);
    let mut result = EpisodeResult {
        episode_return: 0.0,
        violated: false,
        steps: 0,
        max_abs_theta: 0.0,
        max_abs_phi: 0.0,
    };
    loop {
        let step = env.step(controller.force(&state))?;
        state = step.next_state;
        result.episode_return += step.reward;
        result.steps += 1;
        result.violated |= step.info.violated;
        result.max_abs_theta = result.max_abs_theta.max(state.theta().abs());
        result.max_abs_phi = result.max_abs_phi.max(state.phi().abs());
        on_step(&TraceRow {
            step: result.steps,
            time: result.steps as f64 * env_config.dt,
            state,
            force: step.info.force,
            disturbances: step.info.disturbances,
            reward: step.reward,
        })?;
        if step.done {
            return Ok(result);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignSpec {
    pub n_runs: usize,
    pub master_seed: u64,
    pub enable_cart_disturbance: bool,
}

impl Default for CampaignSpec {
    fn default() -> Self {
        Self {
            n_runs: 100,
            master_seed: 2024,
            enable_cart_disturbance: true,
        }
    }
}

impl CampaignSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::invalid("n_runs", "must be >= 1"));
        }
        Ok(())
    }

    /// Seed of run `index`; depends only on the master seed and the index.
    pub fn run_seed(&self, index: usize) -> u64 {
        derive_seed(self.master_seed, index as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_index: usize,
    pub seed: u64,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub violated: bool,
    pub max_theta_deg: f64,
    pub max_phi_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CampaignResult {
    pub runs: Vec<RunRecord>,
    pub mean: f64,
    /// Sample standard deviation; `None` with fewer than two runs.
    pub std: Option<f64>,
    pub violations: usize,
    /// Runs that raised an error, with the message. They are excluded from the statistics.
    pub failures: Vec<(usize, String)>,
    pub wall_clock: Duration,
}

impl CampaignResult {
    pub fn returns(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.episode_return).collect()
    }
}

/// Mean and sample (n − 1) standard deviation, summed in slice order.
pub fn mean_and_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(var.sqrt()))
}

/// Thread pool with `workers` threads (0 means one per core).
pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Runs `spec.n_runs` independent episodes in parallel. Results do not
/// depend on `workers`.
pub fn run_campaign(
    spec: &CampaignSpec,
    env_config: &EnvConfig,
    controller: &dyn Controller,
    workers: usize,
) -> Result<CampaignResult> {
    spec.validate()?;
    let config = EnvConfig {
        enable_cart_disturbance: spec.enable_cart_disturbance,
        ..env_config.clone()
    };
    config.validate()?;
    let started = Instant::now();
    let pool = worker_pool(workers)?;
    let outcomes: Vec<(usize, u64, Result<EpisodeResult>)> = pool.install(|| {
        (0..spec.n_runs)
            .into_par_iter()
            .map(|i| {
                let seed = spec.run_seed(i);
                (i, seed, run_episode(controller, &config, seed))
            })
            .collect()
    });

    let mut runs = Vec::with_capacity(spec.n_runs);
    let mut failures = Vec::new();
    for (run_index, seed, outcome) in outcomes {
        match outcome {
            Ok(ep) => runs.push(RunRecord {
                run_index,
                seed,
                episode_return: ep.episode_return,
                violated: ep.violated,
                max_theta_deg: ep.max_abs_theta.to_degrees(),
                max_phi_deg: ep.max_abs_phi.to_degrees(),
            }),
            Err(e) => failures.push((run_index, e.to_string())),
        }
    }
    let returns: Vec<f64> = runs.iter().map(|r| r.episode_return).collect();
    let (mean, std) = mean_and_std(&returns);
    Ok(CampaignResult {
        violations: runs.iter().filter(|r| r.violated).count(),
        runs,
        mean,
        std,
        failures,
        wall_clock: started.elapsed(),
    })
}

/// Per-run CSV: `run_index,seed,return,violated,max_theta_deg,max_phi_deg`.
pub fn write_runs_csv(path: &Path, runs: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in runs {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Key-value summary of one campaign.
pub fn write_summary(path: &Path, label: &str, result: &CampaignResult) -> Result<()> {
    let std = result
        .std
        .map_or_else(|| "absent".to_string(), |s| format!("{s:.17e}"));
    let text = format!(
        "label = {label}\nn_runs = {}\nmean = {:.17e}\nstd = {std}\nviolations = {}\nfailures = {}\nwall_clock_s = {:.3}\n",
        result.runs.len(),
        result.mean,
        result.violations,
        result.failures.len(),
        result.wall_clock.as_secs_f64()
    );
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
