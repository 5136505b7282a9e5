//! Nonlinear equations of motion for the flexible inverted pendulum on a cart.
//!
//! The pendulum is a beam (mass `beam_mass`, centre of mass at `length / 2`)
//! carrying a tip mass, with linear springs at the tip (`k1`) and the beam
//! centre of mass (`k2`). Generalized coordinates are the tip angle θ, the
//! beam angle φ and the cart position z. Structural and cart friction enter as
//! Rayleigh damping with coefficients `b1` (tip), `b2` (beam) and `b3` (cart).
//!
//! The equations are written as `M(q) q̈ = f(q, q̇, F)` with the rows ordered
//! (θ, φ, z) and solved directly for the accelerations each evaluation.

// Dense 3×3 algebra reads best with explicit indices.
#![allow(clippy::needless_range_loop)]

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 6;

/// Mass matrices above this condition estimate are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Physical parameters of the pendulum-cart system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    /// Tip mass (kg).
    pub tip_mass: f64,
    /// Beam mass (kg).
    pub beam_mass: f64,
    /// Cart mass (kg).
    pub cart_mass: f64,
    /// Pendulum length (m). The beam centre of mass sits at half this length.
    pub length: f64,
    /// Tip spring stiffness (N/m).
    pub k1: f64,
    /// Beam spring stiffness (N/m).
    pub k2: f64,
    /// Tip damping (N·s/m).
    pub b1: f64,
    /// Beam damping (N·s/m).
    pub b2: f64,
    /// Cart friction damping (N·s/m).
    pub b3: f64,
    /// Gravitational acceleration (m/s²).
    pub gravity: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            tip_mass: 0.019,
            beam_mass: 0.0215,
            cart_mass: 0.18,
            length: 0.32,
            k1: 2.0,
            k2: 8.0,
            b1: 0.001,
            b2: 0.001,
            b3: 12.0,
            gravity: 9.81,
        }
    }
}

impl ModelParams {
    /// Distance from the pivot to the beam centre of mass.
    #[inline]
    pub fn com_offset(&self) -> f64 {
        0.5 * self.length
    }

    pub fn total_mass(&self) -> f64 {
        self.cart_mass + self.beam_mass + self.tip_mass
    }

    /// Same parameters with every damping coefficient set to zero.
    pub fn undamped(mut self) -> Self {
        self.b1 = 0.0;
        self.b2 = 0.0;
        self.b3 = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tip_mass", self.tip_mass),
            ("beam_mass", self.beam_mass),
            ("cart_mass", self.cart_mass),
            ("length", self.length),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::invalid(
                    name,
                    format!("must be finite and > 0, got {value}"),
                ));
            }
        }
        let non_negative = [
            ("k1", self.k1),
            ("k2", self.k2),
            ("b1", self.b1),
            ("b2", self.b2),
            ("b3", self.b3),
        ];
        for (name, value) in non_negative {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::invalid(
                    name,
                    format!("must be finite and >= 0, got {value}"),
                ));
            }
        }
        if !self.gravity.is_finite() {
            return Err(Error::invalid("gravity", "must be finite"));
        }
        Ok(())
    }
}

/// System state ordered `[z, ż, φ, φ̇, θ, θ̇]`. Angles are in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateVector(pub [f64; STATE_DIM]);

impl StateVector {
    pub const Z: usize = 0;
    pub const Z_DOT: usize = 1;
    pub const PHI: usize = 2;
    pub const PHI_DOT: usize = 3;
    pub const THETA: usize = 4;
    pub const THETA_DOT: usize = 5;

    pub const ZERO: StateVector = StateVector([0.0; STATE_DIM]);

    pub fn new(z: f64, z_dot: f64, phi: f64, phi_dot: f64, theta: f64, theta_dot: f64) -> Self {
        Self([z, z_dot, phi, phi_dot, theta, theta_dot])
    }

    #[inline]
    pub fn z(&self) -> f64 {
        self.0[Self::Z]
    }
    #[inline]
    pub fn z_dot(&self) -> f64 {
        self.0[Self::Z_DOT]
    }
    #[inline]
    pub fn phi(&self) -> f64 {
        self.0[Self::PHI]
    }
    #[inline]
    pub fn phi_dot(&self) -> f64 {
        self.0[Self::PHI_DOT]
    }
    #[inline]
    pub fn theta(&self) -> f64 {
        self.0[Self::THETA]
    }
    #[inline]
    pub fn theta_dot(&self) -> f64 {
        self.0[Self::THETA_DOT]
    }

    pub fn as_array(&self) -> &[f64; STATE_DIM] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// Largest absolute entry; NaN propagates as infinity.
    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .map(|x| if x.is_nan() { f64::INFINITY } else { x.abs() })
            .fold(0.0, f64::max)
    }

    /// `self + h * other`
    #[inline]
    fn add_scaled(&self, h: f64, other: &StateVector) -> StateVector {
        let mut out = *self;
        for (o, d) in out.0.iter_mut().zip(other.0.iter()) {
            *o += h * d;
        }
        out
    }
}

impl Index<usize> for StateVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for StateVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<[f64; STATE_DIM]> for StateVector {
    fn from(v: [f64; STATE_DIM]) -> Self {
        Self(v)
    }
}

/// Second derivatives of the generalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accelerations {
    pub theta_ddot: f64,
    pub phi_ddot: f64,
    pub z_ddot: f64,
}

pub type Matrix3 = [[f64; 3]; 3];

/// Coefficient matrix of `(θ̈, φ̈, z̈)`.
pub fn mass_matrix(state: &StateVector, params: &ModelParams) -> Matrix3 {
    let (mt, mb, mc) = (params.tip_mass, params.beam_mass, params.cart_mass);
    let big_l = params.length;
    let l = params.com_offset();
    let (theta, phi) = (state.theta(), state.phi());

    let m00 = mt * big_l * big_l;
    let m01 = mt * big_l * l * (theta - phi).cos();
    let m02 = mt * big_l * theta.cos();
    let m11 = (mt + mb) * l * l;
    let m12 = (mt + mb) * l * phi.cos();
    let m22 = mc + mb + mt;

    [[m00, m01, m02], [m01, m11, m12], [m02, m12, m22]]
}

/// Right-hand side of `M(q) q̈ = f`: the applied force minus every
/// velocity, stiffness, gravity and damping term, rows ordered (θ, φ, z).
pub fn generalized_forces(state: &StateVector, force: f64, params: &ModelParams) -> [f64; 3] {
    let (mt, mb) = (params.tip_mass, params.beam_mass);
    let big_l = params.length;
    let l = params.com_offset();
    let g = params.gravity;
    let (k1, k2) = (params.k1, params.k2);
    let (b1, b2, b3) = (params.b1, params.b2, params.b3);

    let z_dot = state.z_dot();
    let (phi, phi_dot) = (state.phi(), state.phi_dot());
    let (theta, theta_dot) = (state.theta(), state.theta_dot());

    let (sin_t, cos_t) = theta.sin_cos();
    let (sin_p, cos_p) = phi.sin_cos();
    let (sin_tp, cos_tp) = (theta - phi).sin_cos();

    let theta_row = mt * big_l * l * phi_dot * phi_dot * sin_tp
        + 0.5 * k1 * big_l * big_l * (2.0 * theta).sin()
        - mt * g * big_l * sin_t
        + b1 * big_l * z_dot * cos_t
        + b1 * big_l * big_l * theta_dot
        + b1 * big_l * l * phi_dot * cos_tp;

    let phi_row = (b1 + b2) * l * z_dot * cos_p
        + (b1 + b2) * l * l * phi_dot
        + b1 * big_l * l * theta_dot * cos_tp
        - mt * big_l * l * theta_dot * theta_dot * sin_tp
        + 0.5 * k2 * l * l * (2.0 * phi).sin()
        - mb * g * l * sin_p;

    let z_row = -(mt + mb) * l * phi_dot * phi_dot * sin_p
        - mt * big_l * theta_dot * theta_dot * sin_t
        + (b1 + b2 + b3) * z_dot
        + (b1 + b2) * l * phi_dot * cos_p
        + b1 * big_l * theta_dot * cos_t;

    [-theta_row, -phi_row, force - z_row]
}

/// Solves the equations of motion for the accelerations.
pub fn accelerations(
    state: &StateVector,
    force: f64,
    params: &ModelParams,
) -> Result<Accelerations> {
    let m = mass_matrix(state, params);
    let rhs = generalized_forces(state, force, params);
    let a = solve3(&m, &rhs)?;
    Ok(Accelerations {
        theta_ddot: a[0],
        phi_ddot: a[1],
        z_ddot: a[2],
    })
}

/// Time derivative of the state, `[ż, z̈, φ̇, φ̈, θ̇, θ̈]`.
pub fn derivative(state: &StateVector, force: f64, params: &ModelParams) -> Result<StateVector> {
    let acc = accelerations(state, force, params)?;
    Ok(StateVector([
        state.z_dot(),
        acc.z_ddot,
        state.phi_dot(),
        acc.phi_ddot,
        state.theta_dot(),
        acc.theta_ddot,
    ]))
}

/// One classical fourth-order Runge-Kutta step with the force held constant.
pub fn rk4_step(
    state: &StateVector,
    force: f64,
    params: &ModelParams,
    dt: f64,
) -> Result<StateVector> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid(
            "dt",
            format!("must be finite and > 0, got {dt}"),
        ));
    }
    let k1 = derivative(state, force, params)?;
    let k2 = derivative(&state.add_scaled(0.5 * dt, &k1), force, params)?;
    let k3 = derivative(&state.add_scaled(0.5 * dt, &k2), force, params)?;
    let k4 = derivative(&state.add_scaled(dt, &k3), force, params)?;

    let mut next = *state;
    for i in 0..STATE_DIM {
        next.0[i] += dt / 6.0 * (k1.0[i] + 2.0 * k2.0[i] + 2.0 * k3.0[i] + k4.0[i]);
    }
    Ok(next)
}

/// Kinetic energy `½ q̇ᵀ M(q) q̇`.
pub fn kinetic_energy(state: &StateVector, params: &ModelParams) -> f64 {
    let (mt, mb, mc) = (params.tip_mass, params.beam_mass, params.cart_mass);
    let big_l = params.length;
    let l = params.com_offset();
    let z_dot = state.z_dot();
    let (phi, phi_dot) = (state.phi(), state.phi_dot());
    let (theta, theta_dot) = (state.theta(), state.theta_dot());

    let cart = 0.5 * mc * z_dot * z_dot;
    let beam = 0.5
        * mb
        * (z_dot * z_dot + 2.0 * l * z_dot * phi_dot * phi.cos() + l * l * phi_dot * phi_dot);
    let tip = 0.5
        * mt
        * (z_dot * z_dot
            + 2.0 * z_dot * (big_l * theta_dot * theta.cos() + l * phi_dot * phi.cos())
            + big_l * big_l * theta_dot * theta_dot
            + l * l * phi_dot * phi_dot
            + 2.0 * big_l * l * theta_dot * phi_dot * (theta - phi).cos());
    cart + beam + tip
}

/// Gravity plus spring potential, zero at the upright rest configuration.
pub fn potential_energy(state: &StateVector, params: &ModelParams) -> f64 {
    let big_l = params.length;
    let l = params.com_offset();
    let g = params.gravity;
    let (theta, phi) = (state.theta(), state.phi());
    params.tip_mass * g * big_l * (theta.cos() - 1.0)
        + params.beam_mass * g * l * (phi.cos() - 1.0)
        + 0.5 * params.k1 * (big_l * theta.sin()).powi(2)
        + 0.5 * params.k2 * (l * phi.sin()).powi(2)
}

pub fn total_energy(state: &StateVector, params: &ModelParams) -> f64 {
    kinetic_energy(state, params) + potential_energy(state, params)
}

/// Central-difference Jacobians `(∂ẋ/∂x, ∂ẋ/∂F)` of [`derivative`].
pub fn jacobian(
    state: &StateVector,
    force: f64,
    params: &ModelParams,
    step: f64,
) -> Result<([[f64; STATE_DIM]; STATE_DIM], [f64; STATE_DIM])> {
    let mut a = [[0.0; STATE_DIM]; STATE_DIM];
    for j in 0..STATE_DIM {
        let mut plus = *state;
        let mut minus = *state;
        plus[j] += step;
        minus[j] -= step;
        let dp = derivative(&plus, force, params)?;
        let dm = derivative(&minus, force, params)?;
        for (i, row) in a.iter_mut().enumerate() {
            row[j] = (dp[i] - dm[i]) / (2.0 * step);
        }
    }
    let dp = derivative(state, force + step, params)?;
    let dm = derivative(state, force - step, params)?;
    let mut b = [0.0; STATE_DIM];
    for (i, v) in b.iter_mut().enumerate() {
        *v = (dp[i] - dm[i]) / (2.0 * step);
    }
    Ok((a, b))
}

/// Gaussian elimination with partial pivoting on a 3×3 system, rejecting
/// matrices whose 1-norm condition number exceeds [`MAX_CONDITION`].
pub fn solve3(m: &Matrix3, rhs: &[f64; 3]) -> Result<[f64; 3]> {
    let lu = Lu3::factor(m)?;
    let condition = norm1(m) * lu.inverse_norm1();
    if !(condition.is_finite() && condition <= MAX_CONDITION) {
        return Err(Error::SingularMassMatrix { condition });
    }
    Ok(lu.solve(rhs))
}

fn norm1(m: &Matrix3) -> f64 {
    (0..3)
        .map(|j| (0..3).map(|i| m[i][j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

struct Lu3 {
    lu: Matrix3,
    perm: [usize; 3],
}

impl Lu3 {
    fn factor(m: &Matrix3) -> Result<Self> {
        let mut lu = *m;
        let mut perm = [0, 1, 2];
        for col in 0..3 {
            let pivot = (col..3)
                .max_by(|&a, &b| lu[a][col].abs().total_cmp(&lu[b][col].abs()))
                .unwrap_or(col);
            if lu[pivot][col] == 0.0 || !lu[pivot][col].is_finite() {
                return Err(Error::SingularMassMatrix {
                    condition: f64::INFINITY,
                });
            }
            lu.swap(col, pivot);
            perm.swap(col, pivot);
            for row in col + 1..3 {
                let factor = lu[row][col] / lu[col][col];
                lu[row][col] = factor;
                for k in col + 1..3 {
                    lu[row][k] -= factor * lu[col][k];
                }
            }
        }
        Ok(Self { lu, perm })
    }

    fn solve(&self, rhs: &[f64; 3]) -> [f64; 3] {
        let lu = &self.lu;
        let mut x = [rhs[self.perm[0]], rhs[self.perm[1]], rhs[self.perm[2]]];
        for i in 1..3 {
            for k in 0..i {
                x[i] -= lu[i][k] * x[k];
            }
        }
        for i in (0..3).rev() {
            for k in i + 1..3 {
                x[i] -= lu[i][k] * x[k];
            }
            x[i] /= lu[i][i];
        }
        x
    }

    fn inverse_norm1(&self) -> f64 {
        let mut norm: f64 = 0.0;
        for j in 0..3 {
            let mut e = [0.0; 3];
            e[j] = 1.0;
            let col = self.solve(&e);
            norm = norm.max(col.iter().map(|v| v.abs()).sum());
        }
        norm
    }
}
