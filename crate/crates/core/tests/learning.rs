mod common;

use common::{pass, random_transitions, small_agent_config};
use fipwc::ddpg::{critic_target, train, Batch};
use fipwc::neural::soft_update;
use fipwc::{Agent, AgentConfig, Env, EnvConfig};

#[test]
fn mlp_gradients_match_finite_differences() {
    pass(common::gradient_check());
}

#[test]
fn adam_first_step_matches_hand_computation() {
    pass(common::adam_first_step());
}

#[test]
fn terminal_transitions_do_not_bootstrap() {
    pass(common::critic_target_cutoff());
}

#[test]
fn actor_step_ascends_a_frozen_critic() {
    pass(common::actor_ascends_frozen_critic());
}

#[test]
fn critic_fits_a_frozen_batch() {
    let config = AgentConfig {
        tau: 0.0,
        critic_lr: 3e-3,
        ..small_agent_config()
    };
    let mut agent = Agent::new(config, 10.0, 4).unwrap();
    let batch = Batch::from_transitions(random_transitions(32, false, 8).iter());
    let first = agent.critic_update(&batch).unwrap();
    let mut last = first;
    for _ in 0..500 {
        last = agent.critic_update(&batch).unwrap();
    }
    assert!(last * 100.0 <= first, "loss {first} -> {last}");
}

#[test]
fn reward_scale_multiplies_only_the_reward_term() {
    let agent = Agent::new(small_agent_config(), 10.0, 12).unwrap();
    let batch = Batch::from_transitions(random_transitions(10, false, 5).iter());
    let obs_scale = agent.config().obs_scale;
    let unit = critic_target(
        &batch,
        agent.target_actor(),
        agent.target_critic(),
        0.9,
        1.0,
        &obs_scale,
        false,
    )
    .unwrap();
    let scaled = critic_target(
        &batch,
        agent.target_actor(),
        agent.target_critic(),
        0.9,
        0.25,
        &obs_scale,
        false,
    )
    .unwrap();
    for ((u, s), r) in unit.iter().zip(scaled.iter()).zip(batch.rewards.iter()) {
        // Same bootstrap term, reward shrunk by 0.75 r.
        assert!((u - s - 0.75 * r).abs() < 1e-12);
    }
}

#[test]
fn soft_update_interpolates_parameters() {
    let mut a = Agent::new(small_agent_config(), 10.0, 1).unwrap();
    let b = Agent::new(small_agent_config(), 10.0, 2).unwrap();
    let before = a.critic().flat_params();
    let online = b.critic().flat_params();
    soft_update(a.critic_mut(), b.critic(), 0.3).unwrap();
    for ((t, o), new) in before.iter().zip(&online).zip(a.critic().flat_params()) {
        assert!((new - (0.3 * o + 0.7 * t)).abs() < 1e-15);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut agent = Agent::new(small_agent_config(), 10.0, 3).unwrap();
    let batch = Batch::from_transitions(random_transitions(8, false, 4).iter());
    agent.train_on_batch(&batch).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agent.ckpt");
    agent.save(&path, 123).unwrap();
    let (mut loaded, steps) = Agent::load(&path, 3).unwrap();
    assert_eq!(steps, 123);
    assert_eq!(loaded.config(), agent.config());
    assert_eq!(loaded.actor().flat_params(), agent.actor().flat_params());
    assert_eq!(
        loaded.target_critic().flat_params(),
        agent.target_critic().flat_params()
    );
    // Optimizer moments survive too: the next update agrees bit for bit.
    agent.train_on_batch(&batch).unwrap();
    loaded.train_on_batch(&batch).unwrap();
    assert_eq!(loaded.critic().flat_params(), agent.critic().flat_params());
}

fn short_training(seed: u64) -> (Vec<u64>, Vec<f64>) {
    let config = AgentConfig {
        batch_size: 16,
        warmup_steps: 32,
        total_train_steps: 400,
        ..small_agent_config()
    };
    let env_config = EnvConfig {
        episode_steps: 100,
        ..EnvConfig::default()
    };
    let mut agent = Agent::new(config, env_config.force_limit, seed).unwrap();
    let mut env = Env::new(env_config).unwrap();
    let logs = train(&mut agent, &mut env, seed, 0, 0, |_| Ok(()), |_, _| Ok(())).unwrap();
    let returns = logs.iter().map(|l| l.episode_return.to_bits()).collect();
    (returns, agent.actor().flat_params())
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let (returns_a, actor_a) = short_training(21);
    let (returns_b, actor_b) = short_training(21);
    assert_eq!(returns_a.len(), 4);
    assert_eq!(returns_a, returns_b);
    assert_eq!(actor_a, actor_b);
    let (returns_c, _) = short_training(22);
    assert_ne!(returns_a, returns_c);
}

#[test]
fn mirrored_actor_gradient_matches_finite_differences() {
    let config = AgentConfig {
        mirror_actor: true,
        ..small_agent_config()
    };
    let mut agent = Agent::new(config, 10.0, 21).unwrap();
    let states = Batch::from_transitions(random_transitions(12, false, 4).iter()).states;
    let obs_scale = agent.config().obs_scale;
    let critic = agent.critic().clone();
    let actor = agent.actor().clone();
    // Mean Q(s, (net(s) − net(−s)) / 2), evaluated one row at a time.
    let objective = |actor: &fipwc::neural::Mlp| -> f64 {
        let mut total = 0.0;
        for row in states.rows() {
            let s: Vec<f64> = row.iter().zip(&obs_scale).map(|(v, k)| v / k).collect();
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let a = 0.5 * (actor.predict(&s).unwrap()[0] - actor.predict(&neg).unwrap()[0]);
            let mut input = s.clone();
            input.push(a);
            total += critic.predict(&input).unwrap()[0];
        }
        total / states.nrows() as f64
    };
    agent.actor_update(&states).unwrap();
    // The stored gradient is of the loss −J.
    let grads = agent.actor().flat_grads();
    let params = actor.flat_params();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for idx in (0..params.len()).step_by(7) {
        let mut plus = actor.clone();
        let mut p = params.clone();
        p[idx] += h;
        plus.set_flat_params(&p).unwrap();
        let mut minus = actor.clone();
        p[idx] -= 2.0 * h;
        minus.set_flat_params(&p).unwrap();
        let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
        let err = (fd + grads[idx]).abs() / (fd.abs() + grads[idx].abs()).max(1e-12);
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "worst relative error {worst:.3e}");
}
