//! Independent oracles shared by the domain test files and the acceptance
//! runner. Each check returns `Ok(summary)` or `Err(summary)`.

#![allow(dead_code, clippy::needless_range_loop)]

use fipwc::ddpg::{Batch, Transition};
use fipwc::dynamics::{derivative, jacobian, mass_matrix, rk4_step, total_energy};
use fipwc::env::{reward, Env, EnvConfig};
use fipwc::neural::{adam_step, Activation, AdamConfig, AdamState, Mlp, MlpSpec};
use fipwc::stochastic::{sample_params, stream_rng, OuParams, OuProcess, Stream, UncertaintySpec};
use fipwc::{Agent, AgentConfig, ModelParams, StateVector};
use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

pub type Check = Result<String, String>;

fn verdict(ok: bool, summary: String) -> Check {
    if ok {
        Ok(summary)
    } else {
        Err(summary)
    }
}

/// Panics with the check's message on failure.
pub fn pass(check: Check) {
    if let Err(msg) = check {
        panic!("{msg}");
    }
}

// ---- physics ------------------------------------------------------------

pub fn rest_is_equilibrium() -> Check {
    let d =
        derivative(&StateVector::ZERO, 0.0, &ModelParams::default()).map_err(|e| e.to_string())?;
    verdict(
        d == StateVector::ZERO,
        format!("derivative(0, 0) = {:?}", d.0),
    )
}

/// Symmetry and Sylvester's criterion on random configurations.
pub fn mass_matrix_spd(samples: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_pi = std::f64::consts::FRAC_PI_2;
    for i in 0..samples {
        let params = ModelParams {
            tip_mass: rng.random_range(0.005..0.1),
            beam_mass: rng.random_range(0.005..0.1),
            cart_mass: rng.random_range(0.05..1.0),
            length: rng.random_range(0.1..1.0),
            ..ModelParams::default()
        };
        let state = StateVector::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-half_pi..=half_pi),
            rng.random_range(-5.0..5.0),
            rng.random_range(-half_pi..=half_pi),
            rng.random_range(-5.0..5.0),
        );
        let m = mass_matrix(&state, &params);
        for r in 0..3 {
            for c in 0..3 {
                if m[r][c] != m[c][r] {
                    return Err(format!("sample {i}: M[{r}][{c}] != M[{c}][{r}]"));
                }
            }
        }
        let minor1 = m[0][0];
        let minor2 = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let minor3 = Matrix3::from_fn(|r, c| m[r][c]).determinant();
        if !(minor1 > 0.0 && minor2 > 0.0 && minor3 > 0.0) {
            return Err(format!(
                "sample {i}: leading minors {minor1:e}, {minor2:e}, {minor3:e} at {:?}",
                state.0
            ));
        }
    }
    Ok(format!(
        "{samples} random states symmetric positive definite"
    ))
}

/// Largest relative energy drift over `duration` seconds without damping,
/// force or disturbance. Initial states sweep a grid of tilts with
/// |φ|, |θ| ≤ 0.2 rad at rest.
pub fn energy_drift(duration: f64, dt: f64) -> Result<(f64, [f64; 2]), String> {
    let params = ModelParams::default().undamped();
    let steps = (duration / dt).round() as usize;
    let grid: Vec<f64> = (0..=8).map(|i| -0.2 + 0.05 * i as f64).collect();
    let mut worst = (0.0, [0.0; 2]);
    for &phi in &grid {
        for &theta in &grid {
            if phi == 0.0 && theta == 0.0 {
                continue;
            }
            let start = StateVector::new(0.0, 0.0, phi, 0.0, theta, 0.0);
            let e0 = total_energy(&start, &params);
            let mut s = start;
            for _ in 0..steps {
                s = rk4_step(&s, 0.0, &params, dt).map_err(|e| e.to_string())?;
                let drift = ((total_energy(&s, &params) - e0) / e0).abs();
                if drift > worst.0 {
                    worst = (drift, [phi, theta]);
                }
            }
        }
    }
    Ok(worst)
}

pub fn energy_conservation() -> Check {
    let (drift, [phi, theta]) = energy_drift(10.0, 0.01)?;
    verdict(
        drift < 1e-5,
        format!("max relative drift {drift:.3e} over 10 s at dt 0.01 (limit 1e-5; worst start φ={phi:.2}, θ={theta:.2})"),
    )
}

fn integrate(
    start: StateVector,
    force: f64,
    params: &ModelParams,
    horizon: f64,
    dt: f64,
) -> StateVector {
    let steps = (horizon / dt).round() as usize;
    (0..steps).fold(start, |s, _| {
        rk4_step(&s, force, params, dt).expect("finite step")
    })
}

/// Observed convergence orders from successive halvings of the step.
pub fn rk4_observed_orders() -> Vec<f64> {
    let params = ModelParams::default();
    let start = StateVector::new(0.0, 0.0, 0.1, 0.0, 0.2, 0.0);
    let (force, horizon) = (0.5, 1.0);
    let reference = integrate(start, force, &params, horizon, 1e-4);
    let err = |dt: f64| {
        let s = integrate(start, force, &params, horizon, dt);
        s.0.iter()
            .zip(reference.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    let steps = [0.01, 0.005, 0.0025];
    let errors: Vec<f64> = steps.iter().map(|&h| err(h)).collect();
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

pub fn rk4_order() -> Check {
    let orders = rk4_observed_orders();
    let ok = orders.iter().all(|p| (3.7..=4.3).contains(p));
    verdict(
        ok,
        format!("observed orders {orders:.3?} (band [3.7, 4.3])"),
    )
}

/// Linearization about upright rest derived from the energy expressions:
/// `M₀ q̈ + D q̇ + K q = e_z F` with `q = (θ, φ, z)`, `K` the Hessian of the
/// potential and `D` the Hessian of the Rayleigh function
/// `½b1(ż + Lθ̇ + lφ̇)² + ½b2(ż + lφ̇)² + ½b3 ż²`.
pub fn analytic_linearization(p: &ModelParams) -> ([[f64; 6]; 6], [f64; 6]) {
    let (mt, mb, mc) = (p.tip_mass, p.beam_mass, p.cart_mass);
    let (big_l, l, g) = (p.length, 0.5 * p.length, p.gravity);
    let m0 = Matrix3::new(
        mt * big_l * big_l,
        mt * big_l * l,
        mt * big_l,
        mt * big_l * l,
        (mt + mb) * l * l,
        (mt + mb) * l,
        mt * big_l,
        (mt + mb) * l,
        mc + mb + mt,
    );
    let k = Matrix3::from_diagonal(&Vector3::new(
        p.k1 * big_l * big_l - mt * g * big_l,
        p.k2 * l * l - mb * g * l,
        0.0,
    ));
    let (b1, b2, b3) = (p.b1, p.b2, p.b3);
    // Hessians of the three squared velocity terms in (θ̇, φ̇, ż).
    let tip = Vector3::new(big_l, l, 1.0);
    let mid = Vector3::new(0.0, l, 1.0);
    let cart = Vector3::new(0.0, 0.0, 1.0);
    let d = tip * tip.transpose() * b1 + mid * mid.transpose() * b2 + cart * cart.transpose() * b3;
    let m_inv = m0.try_inverse().expect("upright mass matrix is invertible");
    let stiff = -m_inv * k;
    let damp = -m_inv * d;

    // Generalized coordinate i sits at state index pos[i], its rate at pos[i] + 1.
    let pos = [4usize, 2, 0];
    let mut a = [[0.0; 6]; 6];
    let mut b = [0.0; 6];
    for i in 0..3 {
        a[pos[i]][pos[i] + 1] = 1.0;
        for j in 0..3 {
            a[pos[i] + 1][pos[j]] = stiff[(i, j)];
            a[pos[i] + 1][pos[j] + 1] = damp[(i, j)];
        }
        b[pos[i] + 1] = m_inv[(i, 2)];
    }
    (a, b)
}

/// Max-norm relative mismatch between the numeric and analytic Jacobians.
pub fn jacobian_mismatch(params: &ModelParams) -> Result<f64, String> {
    let (a_num, b_num) =
        jacobian(&StateVector::ZERO, 0.0, params, 1e-6).map_err(|e| e.to_string())?;
    let (a_ref, b_ref) = analytic_linearization(params);
    let flat = |a: &[[f64; 6]; 6], b: &[f64; 6]| -> Vec<f64> {
        a.iter().flatten().chain(b.iter()).copied().collect()
    };
    let num = flat(&a_num, &b_num);
    let reference = flat(&a_ref, &b_ref);
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = num
        .iter()
        .zip(&reference)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    Ok(diff / scale)
}

pub fn jacobian_check() -> Check {
    let mut worst: f64 = 0.0;
    let soft = ModelParams {
        k1: 0.4,
        k2: 1.5,
        b1: 0.05,
        b2: 0.02,
        ..ModelParams::default()
    };
    for p in [ModelParams::default(), soft] {
        worst = worst.max(jacobian_mismatch(&p)?);
    }
    verdict(
        worst < 1e-6,
        format!("relative mismatch {worst:.3e} (limit 1e-6)"),
    )
}

// ---- stochastic ---------------------------------------------------------

/// Sample variance of an OU path started at zero.
pub fn ou_sample_variance(params: OuParams, dt: f64, steps: usize, seed: u64) -> f64 {
    let mut p = OuProcess::new(params, 0.0, stream_rng(seed, Stream::ThetaDisturbance));
    let path: Vec<f64> = (0..steps).map(|_| p.step(dt)).collect();
    let mean = path.iter().sum::<f64>() / steps as f64;
    path.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (steps - 1) as f64
}

pub fn ou_lag1(params: OuParams, dt: f64, steps: usize, seed: u64) -> f64 {
    let mut p = OuProcess::new(params, 0.0, stream_rng(seed, Stream::PhiDisturbance));
    let path: Vec<f64> = (0..steps).map(|_| p.step(dt)).collect();
    let mean = path.iter().sum::<f64>() / steps as f64;
    let num: f64 = path.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    let den: f64 = path.iter().map(|v| (v - mean) * (v - mean)).sum();
    num / den
}

pub const OU_REFERENCE: OuParams = OuParams {
    kappa: 10.0,
    mu: 0.0,
    sigma: 1.0,
};

/// Continuous-time stationary variance, checked with a step small enough
/// that the Euler–Maruyama bias (factor `1/(1 − κ·dt/2)`) stays far below
/// the tolerance.
pub fn ou_stationary_variance() -> Check {
    let analytic = OU_REFERENCE.sigma * OU_REFERENCE.sigma / (2.0 * OU_REFERENCE.kappa);
    let var = ou_sample_variance(OU_REFERENCE, 1e-3, 1_000_000, 11);
    let rel = (var - analytic).abs() / analytic;
    verdict(
        rel < 0.05,
        format!("variance {var:.5} vs σ²/(2κ) = {analytic} (rel {rel:.4}, dt 1e-3, 1e6 steps)"),
    )
}

pub fn ou_autocorrelation() -> Check {
    let dt = 0.01;
    let rho = ou_lag1(OU_REFERENCE, dt, 100_000, 12);
    let expected = 1.0 - OU_REFERENCE.kappa * dt;
    verdict(
        (rho - expected).abs() < 0.02,
        format!("lag-1 {rho:.4} vs 1 − κ·dt = {expected}"),
    )
}

/// Mean of |X| for X ~ N(mu, sigma²).
pub fn folded_normal_mean(mu: f64, sigma: f64) -> f64 {
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    sigma * (2.0 / std::f64::consts::PI).sqrt() * (-mu * mu / (2.0 * sigma * sigma)).exp()
        + mu * (1.0 - 2.0 * std_normal.cdf(-mu / sigma))
}

pub fn folded_normal_sampler() -> Check {
    let nominal = ModelParams::default();
    let spec = UncertaintySpec::default();
    let draws = 100_000;
    let mut sum = 0.0;
    for i in 0..draws {
        let p = sample_params(&nominal, &spec, i as u64);
        for (name, v) in [
            ("k1", p.k1),
            ("k2", p.k2),
            ("b1", p.b1),
            ("b2", p.b2),
            ("b3", p.b3),
        ] {
            if v.is_nan() || v <= 0.0 {
                return Err(format!("draw {i}: {name} = {v} is not strictly positive"));
            }
        }
        sum += p.k1;
    }
    let mean = sum / draws as f64;
    let analytic = folded_normal_mean(nominal.k1, spec.relative_spread * nominal.k1);
    let rel = (mean - analytic).abs() / analytic;
    verdict(
        rel < 0.02,
        format!("k1 mean {mean:.4} vs folded-normal {analytic:.4} (rel {rel:.4}), all draws > 0"),
    )
}

// ---- learning machinery -------------------------------------------------

/// Max relative error of backprop gradients (parameters and inputs) against
/// central finite differences on randomized small networks.
pub fn mlp_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let shapes: [(usize, Vec<usize>, usize, Activation, Activation); 4] = [
        (3, vec![5], 2, Activation::Tanh, Activation::Linear),
        (4, vec![6, 5], 1, Activation::Relu, Activation::Tanh),
        (2, vec![4, 4, 3], 3, Activation::Tanh, Activation::Tanh),
        (7, vec![8, 8], 1, Activation::Relu, Activation::Linear),
    ];
    for (input, hidden, output, hidden_act, output_act) in shapes {
        let spec = MlpSpec {
            hidden_activation: hidden_act,
            ..MlpSpec::new(input, hidden, output, output_act)
        };
        let mut net = Mlp::init(spec, &mut rng, 0.5).expect("valid spec");
        let batch = 3;
        let x = Array2::from_shape_fn((batch, input), |_| rng.random_range(-1.0..1.0));
        let upstream = Array2::from_shape_fn((batch, output), |_| rng.random_range(-1.0..1.0));
        let loss = |net: &Mlp, x: &Array2<f64>| {
            (net.forward_inference(x.view()).expect("dims") * &upstream).sum()
        };

        net.forward(x.view()).expect("dims");
        let dx = net.backward(upstream.view()).expect("cached");
        let grads = net.flat_grads();
        let params = net.flat_params();
        let h = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);

        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            net.set_flat_params(&p).expect("len");
            let up = loss(&net, &x);
            p[i] -= 2.0 * h;
            net.set_flat_params(&p).expect("len");
            let down = loss(&net, &x);
            worst = worst.max(rel(grads[i], (up - down) / (2.0 * h)));
        }
        net.set_flat_params(&params).expect("len");
        for r in 0..batch {
            for c in 0..input {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let up = loss(&net, &xp);
                xp[[r, c]] -= 2.0 * h;
                let down = loss(&net, &xp);
                worst = worst.max(rel(dx[[r, c]], (up - down) / (2.0 * h)));
            }
        }
    }
    worst
}

pub fn gradient_check() -> Check {
    let worst = (0..5).map(mlp_gradient_error).fold(0.0f64, f64::max);
    verdict(
        worst < 1e-4,
        format!("max relative error {worst:.3e} over 20 random nets (limit 1e-4)"),
    )
}

/// First Adam step on a 1→1 linear unit, compared with the textbook update.
pub fn adam_first_step() -> Check {
    let mut net =
        Mlp::zeros(MlpSpec::new(1, vec![], 1, Activation::Linear)).map_err(|e| e.to_string())?;
    net.set_flat_params(&[0.5, -0.25])
        .map_err(|e| e.to_string())?;
    let cfg = AdamConfig::default();
    let mut opt = AdamState::new(&net, cfg);
    let (x, g) = (2.0, 0.3);
    net.forward(Array2::from_elem((1, 1), x).view())
        .map_err(|e| e.to_string())?;
    net.backward(Array2::from_elem((1, 1), g).view())
        .map_err(|e| e.to_string())?;
    adam_step(&mut net, &mut opt).map_err(|e| e.to_string())?;

    let expected = |p0: f64, grad: f64| {
        let m_hat = (1.0 - cfg.beta1) * grad / (1.0 - cfg.beta1);
        let v_hat = (1.0 - cfg.beta2) * grad * grad / (1.0 - cfg.beta2);
        p0 - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon)
    };
    let got = net.flat_params();
    let want = [expected(0.5, g * x), expected(-0.25, g)];
    let err = got
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    verdict(
        err < 1e-15,
        format!("params {got:?} vs hand-computed {want:?}"),
    )
}

pub fn small_agent_config() -> AgentConfig {
    AgentConfig {
        batch_size: 8,
        buffer_capacity: 64,
        warmup_steps: 8,
        total_train_steps: 100,
        actor_hidden: vec![16, 16],
        critic_hidden: vec![16, 16],
        reward_scale: 1.0,
        ..AgentConfig::desk()
    }
}

pub fn random_transitions(n: usize, done: bool, seed: u64) -> Vec<Transition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Transition {
            state: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
            action: rng.random_range(-1.0..1.0),
            reward: rng.random_range(-2.0..0.0),
            next_state: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
            done,
        })
        .collect()
}

/// Terminal transitions regress to the bare reward; others bootstrap.
pub fn critic_target_cutoff() -> Check {
    let agent = Agent::new(small_agent_config(), 10.0, 5).map_err(|e| e.to_string())?;
    let terminal = random_transitions(6, true, 1);
    let y = agent
        .critic_target(&Batch::from_transitions(terminal.iter()))
        .map_err(|e| e.to_string())?;
    for (t, y) in terminal.iter().zip(y.iter()) {
        if *y != t.reward {
            return Err(format!("terminal target {y} != reward {}", t.reward));
        }
    }
    let open = random_transitions(6, false, 2);
    let y = agent
        .critic_target(&Batch::from_transitions(open.iter()))
        .map_err(|e| e.to_string())?;
    let gamma = agent.config().gamma;
    let scale = agent.config().obs_scale;
    for (t, y) in open.iter().zip(y.iter()) {
        let next: Vec<f64> = t.next_state.iter().zip(scale).map(|(x, s)| x / s).collect();
        let a = agent
            .target_actor()
            .predict(&next)
            .map_err(|e| e.to_string())?[0];
        let mut input = next;
        input.push(a);
        let q = agent
            .target_critic()
            .predict(&input)
            .map_err(|e| e.to_string())?[0];
        let want = t.reward + gamma * q;
        if (y - want).abs() > 1e-12 {
            return Err(format!("bootstrapped target {y} != {want}"));
        }
    }
    Ok("y = r on terminal transitions, r + γQ′ otherwise".into())
}

/// Sets an all-ReLU critic to compute exactly Q(s, a) = a.
pub fn make_identity_critic(critic: &mut Mlp) {
    let action = critic.spec().input_dim - 1;
    let n_layers = critic.layers().len();
    for (idx, layer) in critic.layers_mut().iter_mut().enumerate() {
        layer.weights.fill(0.0);
        layer.bias.fill(0.0);
        if idx == 0 {
            layer.weights[[0, action]] = 1.0;
            layer.weights[[1, action]] = -1.0;
        } else if idx + 1 < n_layers {
            layer.weights[[0, 0]] = 1.0;
            layer.weights[[1, 1]] = 1.0;
        } else {
            layer.weights[[0, 0]] = 1.0;
            layer.weights[[0, 1]] = -1.0;
        }
    }
}

/// With a frozen critic Q(s, a) = a, one actor step raises μ(s) for every
/// state in the batch.
pub fn actor_ascends_frozen_critic() -> Check {
    let mut agent = Agent::new(small_agent_config(), 10.0, 9).map_err(|e| e.to_string())?;
    make_identity_critic(agent.critic_mut());
    let batch = Batch::from_transitions(random_transitions(32, false, 3).iter());
    let probe = |x: Array2<f64>| x.column(0).to_vec();
    let before = probe(
        agent
            .actor()
            .forward_inference(batch.states.view())
            .map_err(|e| e.to_string())?,
    );
    let critic_before = agent.critic().flat_params();
    agent
        .actor_update(&batch.states)
        .map_err(|e| e.to_string())?;
    let after = probe(
        agent
            .actor()
            .forward_inference(batch.states.view())
            .map_err(|e| e.to_string())?,
    );
    if agent.critic().flat_params() != critic_before {
        return Err("critic changed during the actor step".into());
    }
    let min_gain = before
        .iter()
        .zip(&after)
        .map(|(b, a)| a - b)
        .fold(f64::INFINITY, f64::min);
    verdict(
        min_gain > 0.0,
        format!("smallest increase of μ(s) over 32 states: {min_gain:.3e}"),
    )
}

// ---- reward -------------------------------------------------------------

pub fn reward_exactness() -> Check {
    let cfg = EnvConfig::default();
    let ones = reward(&StateVector([1.0; 6]), 1.0, &cfg);
    // Σw = 4.8, control term 0.1 · 1² = 0.1, scaled by dt = 0.01.
    let expected = -(0.1 + 0.5 + 1.0 + 1.0 + 1.2 + 1.0 + 0.1) * 0.01;
    let zero = reward(&StateVector::ZERO, 0.0, &cfg);
    let mut env = Env::new(EnvConfig::quiet()).map_err(|e| e.to_string())?;
    env.reset(0);
    env.set_state(StateVector::new(0.0, 0.0, 0.0, 2e9, 0.0, 0.0));
    let step = env.step(0.0).map_err(|e| e.to_string())?;
    let ok = (ones - expected).abs() < 1e-12
        && (ones + 0.049).abs() < 1e-12
        && zero == 0.0
        && step.reward == -1e7
        && step.done;
    verdict(
        ok,
        format!(
            "r(1, F=1) = {ones:.15}, r(0, 0) = {zero}, violation reward {} (done {})",
            step.reward, step.done
        ),
    )
}
