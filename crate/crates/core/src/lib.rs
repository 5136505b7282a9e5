//! Flexible inverted pendulum with a compliant base on a cart: simulation,
//! disturbance models, a DDPG controller, a PD baseline, and Monte Carlo
//! evaluation.

pub mod config;
pub mod ddpg;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod montecarlo;
pub mod neural;
pub mod pd;
pub mod stochastic;

pub use config::{Profile, RunConfig};
pub use ddpg::{Agent, AgentConfig, Policy, ReplayBuffer, Transition};
pub use dynamics::{ModelParams, StateVector};
pub use env::{Env, EnvConfig, StepResult};
pub use error::{Error, Result};
pub use montecarlo::{
    run_campaign, run_episode, CampaignResult, CampaignSpec, Controller, ZeroController,
};
pub use pd::{PdController, PdGains, PdSearchSpec};
