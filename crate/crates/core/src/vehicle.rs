//! Friction-limited kinematic bicycle model and episode termination.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::track::{wrap_angle, LaneFrameError, Route};

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite vehicle state or action")]
    NonFinite,
    #[error("time step {0} outside (0, 0.1]")]
    BadTimeStep(f64),
    #[error("friction coefficient {0} outside (0, 1]")]
    BadFriction(f64),
}

/// Normalized steering and throttle commands.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub steer: f64,
    pub throttle: f64,
}

impl Action {
    pub fn new(steer: f64, throttle: f64) -> Self {
        Self { steer, throttle }
    }

    pub fn clamped(self) -> Self {
        Self { steer: self.steer.clamp(-1.0, 1.0), throttle: self.throttle.clamp(-1.0, 1.0) }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.steer, self.throttle]
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Self { steer: a[0], throttle: a[1] }
    }

    pub fn is_finite(&self) -> bool {
        self.steer.is_finite() && self.throttle.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
    pub last_action: Action,
}

impl VehicleState {
    pub fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.yaw.is_finite()
            && self.v.is_finite()
            && self.last_action.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrictionModel {
    pub mu: f64,
    pub g: f64,
}

impl FrictionModel {
    pub fn new(mu: f64) -> Result<Self, DynamicsError> {
        if !(mu > 0.0 && mu <= 1.0) {
            return Err(DynamicsError::BadFriction(mu));
        }
        Ok(Self { mu, g: 9.81 })
    }

    pub fn lateral_limit(&self) -> f64 {
        self.mu * self.g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub max_wheel_angle: f64,
    pub max_accel: f64,
    pub max_speed: f64,
    pub drag: f64,
    pub dt: f64,
    pub departure_margin: f64,
    pub initial_speed: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.5,
            max_wheel_angle: 0.5,
            max_accel: 3.0,
            max_speed: 15.0,
            drag: 0.05,
            dt: 0.05,
            departure_margin: 0.3,
            initial_speed: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub state: VehicleState,
    /// Set when the commanded lateral acceleration exceeded the friction limit.
    pub understeer: bool,
    /// Realized lateral acceleration at the start-of-step speed.
    pub lateral_accel: f64,
}

/// Advances the bicycle model by `dt`.
///
/// Path curvature is held constant over the step and the pose follows the
/// exact circular arc for the distance covered at the mean speed, which keeps
/// the discretization error second order in `dt`.
pub fn step(
    state: &VehicleState,
    action: Action,
    dt: f64,
    friction: &FrictionModel,
    params: &VehicleParams,
) -> Result<StepResult, DynamicsError> {
    if !state.is_finite() || !action.is_finite() {
        return Err(DynamicsError::NonFinite);
    }
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(DynamicsError::BadTimeStep(dt));
    }
    let action = action.clamped();
    let v = state.v;
    let delta = action.steer * params.max_wheel_angle;
    let mut curvature = libm::tan(delta) / params.wheelbase;
    let limit = friction.lateral_limit();
    let commanded = v * v * curvature;
    let understeer = commanded.abs() > limit;
    if understeer {
        curvature = limit.copysign(curvature) / (v * v);
    }
    let lateral_accel = v * v * curvature;

    let accel = action.throttle * params.max_accel - params.drag * v;
    let v_next = (v + accel * dt).clamp(0.0, params.max_speed);
    let distance = 0.5 * (v + v_next) * dt;
    let yaw = state.yaw;
    let turn = curvature * distance;
    let (x, y) = if turn.abs() < 1e-12 {
        (state.x + distance * libm::cos(yaw), state.y + distance * libm::sin(yaw))
    } else {
        let h = yaw + turn;
        (state.x + (libm::sin(h) - libm::sin(yaw)) / curvature, state.y - (libm::cos(h) - libm::cos(yaw)) / curvature)
    };
    let next = VehicleState { x, y, yaw: wrap_angle(yaw + turn), v: v_next, last_action: action };
    if !next.is_finite() {
        return Err(DynamicsError::NonFinite);
    }
    Ok(StepResult { state: next, understeer, lateral_accel })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Running,
    LaneDeparture,
    RouteComplete,
    Timeout,
}

impl Verdict {
    pub fn is_terminal(self) -> bool {
        self != Verdict::Running
    }
}

pub fn check_termination(
    err: &LaneFrameError,
    route: &Route,
    step_index: usize,
    max_steps: usize,
    params: &VehicleParams,
) -> Verdict {
    if !err.d.is_finite() || err.d.abs() > route.lane_width / 2.0 + params.departure_margin {
        Verdict::LaneDeparture
    } else if err.s >= route.s_total {
        Verdict::RouteComplete
    } else if step_index + 1 >= max_steps {
        Verdict::Timeout
    } else {
        Verdict::Running
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at_speed(v: f64) -> VehicleState {
        VehicleState { x: 0.0, y: 0.0, yaw: 0.0, v, last_action: Action::default() }
    }

    #[test]
    fn coasting_loses_drag_speed() {
        let p = VehicleParams::default();
        let f = FrictionModel::new(1.0).unwrap();
        let r = step(&at_speed(5.0), Action::new(0.0, 0.0), 0.05, &f, &p).unwrap();
        assert!((r.state.v - (5.0 - 0.05 * 5.0 * 0.05)).abs() < 1e-12);
        assert_eq!(r.state.y, 0.0);
        assert_eq!(r.state.yaw, 0.0);
        assert!(r.state.x > 0.0);
    }

    #[test]
    fn stationary_does_not_move() {
        let p = VehicleParams::default();
        let f = FrictionModel::new(0.6).unwrap();
        let r = step(&at_speed(0.0), Action::new(0.8, 0.0), 0.05, &f, &p).unwrap();
        assert_eq!((r.state.x, r.state.y), (0.0, 0.0));
    }

    #[test]
    fn low_friction_turns_less() {
        let p = VehicleParams::default();
        let s = at_speed(12.0);
        let hi = step(&s, Action::new(1.0, 0.0), 0.05, &FrictionModel::new(1.0).unwrap(), &p).unwrap();
        let lo = step(&s, Action::new(1.0, 0.0), 0.05, &FrictionModel::new(0.5).unwrap(), &p).unwrap();
        assert!(hi.understeer && lo.understeer);
        assert!(lo.state.yaw.abs() < hi.state.yaw.abs());
        assert!(lo.lateral_accel.abs() <= 0.5 * 9.81 + 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = VehicleParams::default();
        let f = FrictionModel::new(0.6).unwrap();
        assert_eq!(step(&at_speed(1.0), Action::new(f64::NAN, 0.0), 0.05, &f, &p), Err(DynamicsError::NonFinite));
        assert_eq!(step(&at_speed(1.0), Action::default(), 0.5, &f, &p), Err(DynamicsError::BadTimeStep(0.5)));
        assert!(FrictionModel::new(0.0).is_err());
        assert!(FrictionModel::new(1.2).is_err());
    }

    #[test]
    fn termination_verdicts() {
        let p = VehicleParams::default();
        let route = Route::straight(100.0, 3.5);
        let e = |d: f64, s: f64| LaneFrameError { d, phi: 0.0, s };
        assert_eq!(check_termination(&e(0.0, 10.0), &route, 0, 400, &p), Verdict::Running);
        assert_eq!(check_termination(&e(3.5, 10.0), &route, 0, 400, &p), Verdict::LaneDeparture);
        assert_eq!(check_termination(&e(0.0, 100.1), &route, 0, 400, &p), Verdict::RouteComplete);
        assert_eq!(check_termination(&e(0.0, 10.0), &route, 399, 400, &p), Verdict::Timeout);
    }
}
