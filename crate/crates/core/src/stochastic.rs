//! Ornstein-Uhlenbeck disturbances, folded-normal parameter sampling, and
//! seed derivation.
//!
//! Every stochastic consumer draws from its own ChaCha stream keyed by a
//! [`Stream`] id, so the numbers one consumer sees never depend on how many
//! draws another consumer made.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::ModelParams;
use crate::error::{Error, Result};

/// Identifies an independent random stream derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    CartDisturbance = 1,
    PhiDisturbance = 2,
    ThetaDisturbance = 3,
    Uncertainty = 4,
    Exploration = 5,
    Replay = 6,
    NetworkInit = 7,
    EpisodeSeeds = 8,
}

/// Builds the generator for `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// SplitMix64 finalizer.
fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for the `index`-th child of `master`, independent of evaluation order.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix64(mix64(master) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuParams {
    /// Mean-reversion rate (1/s, or 1/step when stepped with `dt = 1`).
    pub kappa: f64,
    /// Long-term mean.
    pub mu: f64,
    /// Brownian magnitude (units per √s).
    pub sigma: f64,
}

impl OuParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(Error::invalid(
                "kappa",
                format!("must be >= 0, got {}", self.kappa),
            ));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::invalid(
                "sigma",
                format!("must be >= 0, got {}", self.sigma),
            ));
        }
        if !self.mu.is_finite() {
            return Err(Error::invalid("mu", "must be finite"));
        }
        Ok(())
    }

    /// Variance of the continuous-time process at stationarity, `σ²/(2κ)`.
    pub fn stationary_variance(&self) -> f64 {
        self.sigma * self.sigma / (2.0 * self.kappa)
    }
}

/// A scalar Ornstein-Uhlenbeck process discretized by Euler-Maruyama.
#[derive(Clone, Debug)]
pub struct OuProcess {
    params: OuParams,
    value: f64,
    rng: ChaCha8Rng,
}

impl OuProcess {
    pub fn new(params: OuParams, initial: f64, rng: ChaCha8Rng) -> Self {
        Self {
            params,
            value: initial,
            rng,
        }
    }

    pub fn params(&self) -> &OuParams {
        &self.params
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn set_value(&mut self, value: f64) {
        self.value = value;
    }

    /// Advances by `dt` and returns the new value. Draws exactly one normal
    /// variate whatever the parameters.
    pub fn step(&mut self, dt: f64) -> f64 {
        let noise: f64 = self.rng.sample(StandardNormal);
        let OuParams { kappa, mu, sigma } = self.params;
        self.value += kappa * (mu - self.value) * dt + sigma * dt.sqrt() * noise;
        self.value
    }
}

/// OU parameters for the three rate disturbances. Angular values are given
/// in degrees and converted to radians when the processes are built.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceConfig {
    pub cart_kappa: f64,
    /// m/s
    pub cart_mu: f64,
    /// m/s per √s
    pub cart_sigma: f64,
    pub angular_kappa: f64,
    /// deg/s
    pub angular_mu_deg: f64,
    /// deg/s per √s
    pub angular_sigma_deg: f64,
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        Self {
            cart_kappa: 0.01,
            cart_mu: 0.0,
            cart_sigma: 0.1,
            angular_kappa: 10.0,
            angular_mu_deg: 0.0,
            angular_sigma_deg: 1.0,
        }
    }
}

impl DisturbanceConfig {
    /// All disturbances switched off.
    pub fn silent() -> Self {
        Self {
            cart_sigma: 0.0,
            angular_sigma_deg: 0.0,
            ..Self::default()
        }
    }

    pub fn cart(&self) -> OuParams {
        OuParams {
            kappa: self.cart_kappa,
            mu: self.cart_mu,
            sigma: self.cart_sigma,
        }
    }

    pub fn angular(&self) -> OuParams {
        OuParams {
            kappa: self.angular_kappa,
            mu: self.angular_mu_deg.to_radians(),
            sigma: self.angular_sigma_deg.to_radians(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cart().validate()?;
        self.angular().validate()
    }
}

/// The disturbances added to ż, φ̇ and θ̇.
#[derive(Clone, Debug)]
pub struct Disturbances {
    pub cart: OuProcess,
    pub phi: OuProcess,
    pub theta: OuProcess,
}

impl Disturbances {
    pub fn values(&self) -> [f64; 3] {
        [self.cart.value(), self.phi.value(), self.theta.value()]
    }
}

/// Three independent processes starting at zero.
pub fn make_disturbances(config: &DisturbanceConfig, seed: u64) -> Disturbances {
    let angular = config.angular();
    Disturbances {
        cart: OuProcess::new(
            config.cart(),
            0.0,
            stream_rng(seed, Stream::CartDisturbance),
        ),
        phi: OuProcess::new(angular, 0.0, stream_rng(seed, Stream::PhiDisturbance)),
        theta: OuProcess::new(angular, 0.0, stream_rng(seed, Stream::ThetaDisturbance)),
    }
}

/// Gaussian spread applied to the stiffness and damping coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintySpec {
    /// Standard deviation as a fraction of the nominal value.
    pub relative_spread: f64,
}

impl Default for UncertaintySpec {
    fn default() -> Self {
        Self {
            relative_spread: 0.5,
        }
    }
}

impl UncertaintySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.relative_spread.is_finite() && self.relative_spread >= 0.0) {
            return Err(Error::invalid(
                "relative_spread",
                format!("must be >= 0, got {}", self.relative_spread),
            ));
        }
        Ok(())
    }
}

/// Draws `k1, k2, b1, b2, b3` from `|N(nominal, (spread · nominal)²)|`;
/// every other parameter is copied from `nominal`.
pub fn sample_params(nominal: &ModelParams, spec: &UncertaintySpec, seed: u64) -> ModelParams {
    if spec.relative_spread == 0.0 {
        return *nominal;
    }
    let mut rng = stream_rng(seed, Stream::Uncertainty);
    let mut draw = |mean: f64| -> f64 {
        let std = spec.relative_spread * mean.abs();
        if std == 0.0 {
            return mean.abs();
        }
        loop {
            let x: f64 = rng.sample(StandardNormal);
            let v = (mean + std * x).abs();
            // |X| = 0 has probability zero; redraw to keep the support open.
            if v > 0.0 {
                return v;
            }
        }
    };
    ModelParams {
        k1: draw(nominal.k1),
        k2: draw(nominal.k2),
        b1: draw(nominal.b1),
        b2: draw(nominal.b2),
        b3: draw(nominal.b3),
        ..*nominal
    }
}
