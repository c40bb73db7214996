//! Per-step lane-keeping reward.

use serde::{Deserialize, Serialize};

use crate::track::LaneFrameError;
use crate::vehicle::{Action, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub lateral: f64,
    pub heading: f64,
    pub progress: f64,
    /// Penalty on the squared change of the action between steps.
    pub smoothness: f64,
    /// Penalty on squared throttle.
    pub throttle: f64,
    pub crash: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { lateral: 1.0, heading: 0.5, progress: 0.5, smoothness: 0.1, throttle: 0.05, crash: 10.0 }
    }
}

impl RewardWeights {
    pub fn is_valid(&self) -> bool {
        [self.lateral, self.heading, self.progress, self.smoothness, self.throttle, self.crash]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
    }

    /// Reward of a step on the centerline at top speed with an unchanged,
    /// zero-throttle action: the largest value `step_reward` can return.
    pub fn per_step_max(&self) -> f64 {
        self.progress
    }

    /// Bound on `|step_reward|` for actions inside the unit box.
    pub fn magnitude_bound(&self) -> f64 {
        use std::f64::consts::PI;
        self.progress + self.lateral + self.heading * PI * PI + 8.0 * self.smoothness + self.throttle + self.crash
    }
}

/// Everything the reward looks at for one step.
#[derive(Debug, Clone, Copy)]
pub struct RewardInput {
    pub err: LaneFrameError,
    pub speed: f64,
    pub max_speed: f64,
    pub lane_width: f64,
    pub action: Action,
    pub prev_action: Action,
    pub verdict: Verdict,
}

/// `w_v·(v/v_max)·cos φ − w_d·(d/(w/2))² − w_φ·φ² − λ₁‖Δa‖² − λ₂·throttle²`,
/// minus the crash penalty on lane departure. The normalized deviation is
/// capped at 1 so a departed vehicle is not penalized twice.
pub fn step_reward(input: &RewardInput, w: &RewardWeights) -> f64 {
    let RewardInput { err, speed, max_speed, lane_width, action, prev_action, verdict } = *input;
    let d_norm = (err.d / (lane_width / 2.0)).clamp(-1.0, 1.0);
    let ds = action.steer - prev_action.steer;
    let dt = action.throttle - prev_action.throttle;
    let mut r = w.progress * (speed / max_speed) * libm::cos(err.phi)
        - w.lateral * d_norm * d_norm
        - w.heading * err.phi * err.phi
        - w.smoothness * (ds * ds + dt * dt)
        - w.throttle * action.throttle * action.throttle;
    if verdict == Verdict::LaneDeparture {
        r -= w.crash;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(d: f64, phi: f64, v: f64, a: Action, prev: Action, verdict: Verdict) -> RewardInput {
        RewardInput {
            err: LaneFrameError { d, phi, s: 5.0 },
            speed: v,
            max_speed: 15.0,
            lane_width: 3.5,
            action: a,
            prev_action: prev,
            verdict,
        }
    }

    #[test]
    fn ideal_step_earns_progress_weight() {
        let w = RewardWeights::default();
        let a = Action::new(0.3, 0.0);
        let r = step_reward(&input(0.0, 0.0, 15.0, a, a, Verdict::Running), &w);
        assert_eq!(r, w.progress);
        assert_eq!(w.per_step_max(), r);
    }

    #[test]
    fn departure_costs_crash_penalty() {
        let w = RewardWeights::default();
        let a = Action::default();
        let running = step_reward(&input(1.0, 0.0, 10.0, a, a, Verdict::Running), &w);
        let crashed = step_reward(&input(1.0, 0.0, 10.0, a, a, Verdict::LaneDeparture), &w);
        assert!((running - crashed - w.crash).abs() < 1e-12);
    }

    #[test]
    fn larger_action_change_costs_exactly_smoothness_gap() {
        let w = RewardWeights::default();
        let prev = Action::new(0.1, 0.2);
        let a1 = Action::new(0.2, 0.2);
        let a2 = Action::new(0.6, 0.2);
        let r1 = step_reward(&input(0.2, 0.05, 8.0, a1, prev, Verdict::Running), &w);
        let r2 = step_reward(&input(0.2, 0.05, 8.0, a2, prev, Verdict::Running), &w);
        let gap = w.smoothness * (0.5f64.powi(2) - 0.1f64.powi(2));
        assert!(r2 < r1);
        assert!((r1 - r2 - gap).abs() < 1e-12);
    }
}
