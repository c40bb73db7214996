use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use snowlane::agents::{
    critic_target, critic_value_and_action_grad, policy_gradient, Agent, AgentConfig, Direction, Transition, Variant,
};
use snowlane::env::Observation;
use snowlane::nn::{AdamState, Module, NnError, RnnCell};

fn features(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn obs(k: &[f64]) -> Observation {
    Observation { kinematics: [k[0], k[1], k[2]], image: None }
}

fn transitions(n: usize, seed: u64) -> Vec<Transition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = features(2 * n, seed + 1);
    (0..n)
        .map(|i| Transition {
            obs: obs(&fs[2 * i]),
            action: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            reward: rng.random_range(-1.0..1.0),
            next_obs: obs(&fs[2 * i + 1]),
            done: rng.random_bool(0.2),
        })
        .collect()
}

fn robust_agent(seed: u64) -> Agent {
    let mut agent = Agent::new(Variant::ArDdpg, &AgentConfig::default(), seed).unwrap();
    agent.adversary = agent.actor.clone();
    agent
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn actor_and_adversary_gradients_are_negations() {
    for seed in 0..5 {
        let mut agent = robust_agent(seed);
        let batch = features(32, seed + 100);
        let (q_actor, g_actor) = agent.actor_gradient(&batch).unwrap();
        let (q_adv, g_adv) = agent.adversary_gradient(&batch).unwrap();
        assert_eq!(q_actor, q_adv);
        assert!(g_actor.iter().any(|g| *g != 0.0));
        let negated: Vec<f64> = g_adv.iter().map(|g| -g).collect();
        assert!(max_abs_diff(&g_actor, &negated) < 1e-10);
    }
}

#[test]
fn first_step_deltas_are_negations() {
    let mut cfg = AgentConfig::default();
    cfg.adversary_lr = cfg.actor_lr;
    let mut agent = Agent::new(Variant::ArDdpg, &cfg, 3).unwrap();
    agent.adversary = agent.actor.clone();
    let before = agent.actor.flat_values();
    let batch = features(16, 9);
    agent.update_actor(&batch).unwrap();
    agent.update_adversary(&batch).unwrap();
    let d_actor: Vec<f64> = agent.actor.flat_values().iter().zip(&before).map(|(a, b)| a - b).collect();
    let d_adv: Vec<f64> = agent.adversary.flat_values().iter().zip(&before).map(|(a, b)| -(a - b)).collect();
    assert!(max_abs_diff(&d_actor, &d_adv) < 1e-15);
}

fn quadratic(_f: &[f64], a: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    Ok((-a.iter().map(|v| v * v).sum::<f64>(), a.iter().map(|v| -2.0 * v).collect()))
}

fn mean_norm(net: &snowlane::nn::Mlp, batch: &[Vec<f64>]) -> f64 {
    batch.iter().map(|f| net.forward(f).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>()
        / batch.len() as f64
}

#[test]
fn quadratic_critic_pulls_actor_in_and_pushes_adversary_out() {
    let agent = Agent::new(Variant::ArDdpg, &AgentConfig::default(), 1).unwrap();
    let batch = features(32, 4);
    let (mut actor, mut adversary) = (agent.actor.clone(), agent.adversary.clone());
    let (mut opt_a, mut opt_b) = (AdamState::new(), AdamState::new());
    let (a0, b0) = (mean_norm(&actor, &batch), mean_norm(&adversary, &batch));
    for _ in 0..300 {
        policy_gradient(&mut actor, &batch, quadratic, Direction::Ascend).unwrap();
        opt_a.step_module(&mut actor, 1e-3).unwrap();
        policy_gradient(&mut adversary, &batch, quadratic, Direction::Descend).unwrap();
        opt_b.step_module(&mut adversary, 1e-3).unwrap();
    }
    let (a1, b1) = (mean_norm(&actor, &batch), mean_norm(&adversary, &batch));
    assert!(a1 < 0.1 * a0, "actor norm {a0} -> {a1}");
    assert!(b1 > b0 && b1 > 0.9 * 2f64.sqrt(), "adversary norm {b0} -> {b1}");
}

#[test]
fn zero_critic_leaves_policies_unchanged() {
    let mut agent = Agent::new(Variant::ArDdpg, &AgentConfig::default(), 2).unwrap();
    for p in agent.critic.params_mut() {
        p.value.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let (actor, adversary) = (agent.actor.clone(), agent.adversary.clone());
    let batch = features(16, 1);
    agent.update_actor(&batch).unwrap();
    agent.update_adversary(&batch).unwrap();
    assert_eq!(agent.actor, actor);
    assert_eq!(agent.adversary, adversary);
}

#[test]
fn actor_gradient_matches_finite_differences() {
    let mut agent =
        Agent::new(Variant::Ddpg, &AgentConfig { hidden: vec![8, 8], ..AgentConfig::default() }, 6).unwrap();
    let batch = features(8, 2);
    let (_, grad) = agent.actor_gradient(&batch).unwrap();
    let loss = |a: &Agent| -> f64 {
        -batch
            .iter()
            .map(|f| critic_value_and_action_grad(&a.critic, f, &a.actor.forward(f).unwrap()).unwrap().0)
            .sum::<f64>()
            / batch.len() as f64
    };
    let h = 1e-6;
    let mut checked = 0;
    for i in 0..grad.len() {
        let mut plus = agent.clone();
        let mut minus = agent.clone();
        perturb(&mut plus, i, h);
        perturb(&mut minus, i, -h);
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let scale = grad[i].abs().max(numeric.abs());
        if scale < 1e-7 {
            continue;
        }
        assert!((grad[i] - numeric).abs() / scale < 1e-3, "param {i}: {} vs {numeric}", grad[i]);
        checked += 1;
    }
    assert!(checked > grad.len() / 2);
}

fn perturb(agent: &mut Agent, index: usize, h: f64) {
    let mut k = index;
    for p in agent.actor.params_mut() {
        if k < p.value.data.len() {
            p.value.data[k] += h;
            return;
        }
        k -= p.value.data.len();
    }
    panic!("index out of range");
}

#[test]
fn single_sample_critic_loss_is_squared_td_error() {
    let mut agent = Agent::new(Variant::Ddpg, &AgentConfig::default(), 8).unwrap();
    let t = &transitions(1, 3)[0];
    let q = agent.critic.forward(&[t.obs.kinematics.as_slice(), &t.action].concat()).unwrap()[0];
    let next_a = agent.target_actor.forward(&t.next_obs.kinematics).unwrap();
    let next_q = agent.target_critic.forward(&[t.next_obs.kinematics.as_slice(), &next_a].concat()).unwrap()[0];
    let y = critic_target(t.reward, agent.cfg.gamma, t.done, next_q);
    let loss = agent.update_critic(&[t]).unwrap();
    assert!((loss - (q - y).powi(2)).abs() < 1e-12);
}

#[test]
fn critic_loss_falls_on_a_fixed_batch() {
    let mut cfg = AgentConfig::default();
    cfg.critic_lr = 1e-3;
    let mut agent = Agent::new(Variant::Ddpg, &cfg, 8).unwrap();
    let data = transitions(64, 7);
    let batch: Vec<&Transition> = data.iter().collect();
    let first = agent.update_critic(&batch).unwrap();
    let mut last = first;
    for _ in 0..200 {
        last = agent.update_critic(&batch).unwrap();
    }
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn zero_rate_keeps_targets_frozen() {
    let cfg = AgentConfig { tau: 0.0, ..AgentConfig::default() };
    let mut agent = Agent::new(Variant::ArDdpg, &cfg, 4).unwrap();
    let (ta, tc) = (agent.target_actor.clone(), agent.target_critic.clone());
    let data = transitions(32, 1);
    let batch: Vec<&Transition> = data.iter().collect();
    for _ in 0..5 {
        agent.update_flat(&batch).unwrap();
    }
    assert_ne!(agent.actor, ta);
    assert_eq!(agent.target_actor, ta);
    assert_eq!(agent.target_critic, tc);
}

#[test]
fn rnn_without_recurrence_forgets_history() {
    let mut cell = RnnCell::new(3, 16, &mut ChaCha8Rng::seed_from_u64(2));
    cell.w_h.value.data.iter_mut().for_each(|v| *v = 0.0);
    let o = [0.3, -0.2, 0.9];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let reference = cell.step(&[0.0; 16], &o).unwrap();
    for _ in 0..10 {
        let h: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(cell.step(&h, &o).unwrap(), reference);
    }
}

#[test]
fn ddpg_acts_identically_whatever_alpha() {
    let agent = Agent::new(Variant::Ddpg, &AgentConfig::default(), 0).unwrap();
    let o = obs(&[0.2, 0.1, 0.5]);
    let plain = agent.act(&o, &[], [0.0; 2], 0.0).unwrap();
    let mixed = agent.act(&o, &[], [0.0; 2], agent.alpha()).unwrap();
    assert_eq!(agent.alpha(), 0.0);
    assert_eq!(plain.mixed, mixed.mixed);
    assert_eq!(plain.mixed, plain.a_mu);
}
