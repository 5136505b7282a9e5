//! Proportional-derivative baseline controller and its grid-search tuner.

use std::path::Path;

use nalgebra::SMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{jacobian, ModelParams, StateVector, STATE_DIM};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::montecarlo::{run_episode, worker_pool, Controller};
use crate::stochastic::derive_seed;

/// `F = kp_theta·θ + kd_theta·θ̇ + kp_z·z + kd_z·ż`. Positive θ tips the
/// pendulum towards +z, so a positive `kp_theta` drives the cart under it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdGains {
    pub kp_theta: f64,
    pub kd_theta: f64,
    #[serde(default)]
    pub kp_z: f64,
    #[serde(default)]
    pub kd_z: f64,
}

impl PdGains {
    pub fn new(kp_theta: f64, kd_theta: f64, kp_z: f64, kd_z: f64) -> Self {
        Self {
            kp_theta,
            kd_theta,
            kp_z,
            kd_z,
        }
    }

    /// Feedback row over the state ordering `[z, ż, φ, φ̇, θ, θ̇]`.
    pub fn as_state_gain(&self) -> [f64; STATE_DIM] {
        [self.kp_z, self.kd_z, 0.0, 0.0, self.kp_theta, self.kd_theta]
    }

    pub fn is_finite(&self) -> bool {
        self.as_state_gain().iter().all(|g| g.is_finite())
    }
}

/// Unclamped PD law.
pub fn pd_raw(gains: &PdGains, state: &StateVector) -> f64 {
    gains.kp_theta * state.theta()
        + gains.kd_theta * state.theta_dot()
        + gains.kp_z * state.z()
        + gains.kd_z * state.z_dot()
}

/// PD law clamped to `±force_limit`.
pub fn pd_force(gains: &PdGains, state: &StateVector, force_limit: f64) -> f64 {
    pd_raw(gains, state).clamp(-force_limit, force_limit)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdController {
    pub gains: PdGains,
    pub force_limit: f64,
}

impl Controller for PdController {
    fn force(&self, state: &StateVector) -> f64 {
        pd_force(&self.gains, state, self.force_limit)
    }
}

/// Largest real part among the eigenvalues of the closed loop linearized
/// about upright rest.
pub fn closed_loop_abscissa(gains: &PdGains, params: &ModelParams) -> Result<f64> {
    let (a, b) = jacobian(&StateVector::ZERO, 0.0, params, 1e-6)?;
    let k = gains.as_state_gain();
    let closed = SMatrix::<f64, STATE_DIM, STATE_DIM>::from_fn(|i, j| a[i][j] + b[i] * k[j]);
    Ok(closed
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Stable or marginal (an undriven cart-position integrator is allowed).
pub fn is_stabilizing(gains: &PdGains, params: &ModelParams) -> bool {
    gains.is_finite() && closed_loop_abscissa(gains, params).is_ok_and(|re| re < 1e-6)
}

/// Candidate values per gain; the grid is their Cartesian product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdSearchSpec {
    pub kp_theta: Vec<f64>,
    pub kd_theta: Vec<f64>,
    pub kp_z: Vec<f64>,
    pub kd_z: Vec<f64>,
    /// Episodes scored per grid point.
    pub episodes: usize,
}

impl Default for PdSearchSpec {
    fn default() -> Self {
        Self {
            kp_theta: vec![-1.0, -0.5, 0.0, 0.5, 1.0, 2.0],
            kd_theta: vec![-0.2, -0.1, 0.0, 0.1, 0.2],
            kp_z: vec![-2.0, -1.0, 0.0],
            kd_z: vec![-2.0, -1.0, 0.0],
            episodes: 100,
        }
    }
}

impl PdSearchSpec {
    pub fn grid(&self) -> Vec<PdGains> {
        let mut out = Vec::with_capacity(
            self.kp_theta.len() * self.kd_theta.len() * self.kp_z.len() * self.kd_z.len(),
        );
        for &kp in &self.kp_theta {
            for &kd in &self.kd_theta {
                for &kpz in &self.kp_z {
                    for &kdz in &self.kd_z {
                        out.push(PdGains::new(kp, kd, kpz, kdz));
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::invalid("episodes", "must be >= 1"));
        }
        if self.grid().is_empty() {
            return Err(Error::invalid(
                "grid",
                "every gain needs at least one candidate",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridScore {
    pub gains: PdGains,
    pub stabilizing: bool,
    /// Mean episode reward; `None` for candidates rejected as non-stabilizing.
    pub mean_reward: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub gains: PdGains,
    pub mean_reward: f64,
    pub scores: Vec<GridScore>,
}

/// Mean return of `gains` over `episodes` episodes seeded from `seed`.
pub fn score_gains(
    gains: &PdGains,
    env_config: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let controller = PdController {
        gains: *gains,
        force_limit: env_config.force_limit,
    };
    let mut total = 0.0;
    for i in 0..episodes {
        total += run_episode(&controller, env_config, derive_seed(seed, i as u64))?.episode_return;
    }
    Ok(total / episodes as f64)
}

/// Grid search maximizing mean episode reward. Candidates that do not
/// stabilize the nominal linearized plant are skipped. The cart disturbance
/// is switched off while tuning. Ties go to the earliest grid point.
pub fn tune_gains(
    env_config: &EnvConfig,
    search: &PdSearchSpec,
    seed: u64,
    workers: usize,
) -> Result<TuneResult> {
    search.validate()?;
    let config = EnvConfig {
        enable_cart_disturbance: false,
        ..env_config.clone()
    };
    config.validate()?;
    let grid = search.grid();
    let pool = worker_pool(workers)?;
    let scores: Vec<Result<GridScore>> = pool.install(|| {
        grid.par_iter()
            .map(|gains| {
                let stabilizing = is_stabilizing(gains, &config.model);
                let mean_reward = if stabilizing {
                    Some(score_gains(gains, &config, search.episodes, seed)?)
                } else {
                    None
                };
                Ok(GridScore {
                    gains: *gains,
                    stabilizing,
                    mean_reward,
                })
            })
            .collect()
    });
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;

    let mut best: Option<(PdGains, f64)> = None;
    for s in &scores {
        if let Some(r) = s.mean_reward {
            if best.map_or(true, |(_, b)| r > b) {
                best = Some((s.gains, r));
            }
        }
    }
    let (gains, mean_reward) = best.ok_or(Error::NoFeasibleGains {
        evaluated: scores.len(),
    })?;
    Ok(TuneResult {
        gains,
        mean_reward,
        scores,
    })
}

/// Human-readable gains file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsFile {
    pub kp_theta: f64,
    pub kd_theta: f64,
    pub kp_z: f64,
    pub kd_z: f64,
    /// Tuning score, when the file came from the tuner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<f64>,
}

impl GainsFile {
    pub fn gains(&self) -> PdGains {
        PdGains::new(self.kp_theta, self.kd_theta, self.kp_z, self.kd_z)
    }
}

pub fn write_gains(path: &Path, gains: &PdGains, mean_reward: Option<f64>) -> Result<()> {
    let file = GainsFile {
        kp_theta: gains.kp_theta,
        kd_theta: gains.kd_theta,
        kp_z: gains.kp_z,
        kd_z: gains.kd_z,
        mean_reward,
    };
    let text = toml::to_string(&file).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_gains(path: &Path) -> Result<GainsFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
