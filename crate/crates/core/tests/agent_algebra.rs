use std::collections::VecDeque;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use snowlane::agents::{critic_target, mix_actions, mix_unclamped, ReplayBuffer};
use snowlane::nn::{soft_update, Activation, Mlp, Module};

#[test]
fn mixing_grid_matches_convex_combination() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let a_mu: [f64; 2] = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        let a_adv: [f64; 2] = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        assert_eq!(mix_actions(a_mu, a_adv, 0.0), a_mu);
        assert_eq!(mix_actions(a_mu, a_adv, 1.0), a_adv);
        for k in 0..=10 {
            let alpha = k as f64 / 10.0;
            let m = mix_unclamped(a_mu, a_adv, alpha);
            for i in 0..2 {
                let expected = (1.0 - alpha) * a_mu[i] + alpha * a_adv[i];
                assert!((m[i] - expected).abs() <= 1e-15, "alpha {alpha}: {} vs {expected}", m[i]);
            }
        }
    }
}

#[test]
fn mixing_hand_example() {
    let m = mix_actions([1.0, 0.0], [-1.0, 0.0], 0.1);
    assert!((m[0] - 0.8).abs() < 1e-15 && m[1] == 0.0);
}

proptest! {
    #[test]
    fn mixture_lies_on_segment_and_clamp_only_trims(
        mu0 in -2.0..2.0f64, mu1 in -2.0..2.0f64,
        adv0 in -1.0..1.0f64, adv1 in -1.0..1.0f64,
        alpha in 0.0..=1.0f64,
    ) {
        let (a_mu, a_adv) = ([mu0, mu1], [adv0, adv1]);
        let raw = mix_unclamped(a_mu, a_adv, alpha);
        let clamped = mix_actions(a_mu, a_adv, alpha);
        for i in 0..2 {
            let (lo, hi) = (a_mu[i].min(a_adv[i]), a_mu[i].max(a_adv[i]));
            prop_assert!(raw[i] >= lo - 1e-12 && raw[i] <= hi + 1e-12);
            if raw[i].abs() <= 1.0 {
                prop_assert_eq!(clamped[i], raw[i]);
            } else {
                prop_assert_eq!(clamped[i], raw[i].signum());
            }
        }
    }
}

#[test]
fn critic_target_matches_hand_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let r: f64 = rng.random_range(-20.0..20.0);
        let gamma: f64 = rng.random_range(0.0..1.0);
        let q: f64 = rng.random_range(-100.0..100.0);
        let done: bool = rng.random_bool(0.3);
        let hand = r + gamma * (1.0 - if done { 1.0 } else { 0.0 }) * q;
        assert!((critic_target(r, gamma, done, q) - hand).abs() <= 1e-12);
    }
}

fn net(seed: u64) -> Mlp {
    Mlp::new(&[3, 8, 2], Activation::Relu, Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn soft_update_with_unit_rate_copies() {
    let online = net(1);
    let mut target = net(2);
    soft_update(&mut target, &online, 1.0).unwrap();
    assert_eq!(target.flat_values(), online.flat_values());
}

#[test]
fn soft_update_gap_shrinks_geometrically() {
    let online = net(1);
    let mut target = net(2);
    let tau = 0.05;
    let gap = |t: &Mlp| -> Vec<f64> { t.flat_values().iter().zip(online.flat_values()).map(|(a, b)| a - b).collect() };
    let initial = gap(&target);
    for k in 1..=50 {
        soft_update(&mut target, &online, tau).unwrap();
        let ratio = (1.0 - tau).powi(k);
        for (g, g0) in gap(&target).iter().zip(&initial) {
            assert!((g - ratio * g0).abs() <= 1e-12 * (1.0 + g0.abs()), "iteration {k}");
        }
    }
}

#[test]
fn soft_update_rejects_bad_rate() {
    let online = net(1);
    let mut target = net(2);
    assert!(soft_update(&mut target, &online, 0.0).is_err());
    assert!(soft_update(&mut target, &online, 1.5).is_err());
}

proptest! {
    #[test]
    fn replay_is_fifo_with_bounded_capacity(capacity in 1usize..20, pushes in 0usize..80) {
        let mut buf = ReplayBuffer::new(capacity);
        let mut oracle = VecDeque::new();
        for i in 0..pushes {
            buf.push(i);
            oracle.push_back(i);
            if oracle.len() > capacity {
                oracle.pop_front();
            }
            prop_assert_eq!(buf.len(), oracle.len());
        }
        let got: Vec<usize> = buf.iter().copied().collect();
        let want: Vec<usize> = oracle.iter().copied().collect();
        prop_assert_eq!(got, want);
        if !oracle.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(pushes as u64);
            for s in buf.sample(32, &mut rng) {
                prop_assert!(oracle.contains(s));
            }
        }
    }
}
