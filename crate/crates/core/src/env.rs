//! One lane-keeping episode: route, vehicle, friction, occlusion and the
//! observations handed to an agent.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perception::CoeffRegressor;
use crate::reward::{step_reward, RewardInput, RewardWeights};
use crate::snow::{render, sample_occlusion, OcclusionConfig, OcclusionParams, RasterImage, RenderParams};
use crate::track::{generate_graph, sample_route, GraphSpec, LaneFrameError, Route, TrackError};
use crate::vehicle::{
    check_termination, step, Action, DynamicsError, FrictionModel, VehicleParams, VehicleState, Verdict,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("episode already finished")]
    Finished,
    #[error("perception model: {0}")]
    Perception(String),
}

/// Divisors that bring the kinematic observation to O(1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationScales {
    pub lateral: f64,
    pub heading: f64,
    pub speed: f64,
}

impl Default for ObservationScales {
    fn default() -> Self {
        Self { lateral: 1.75, heading: 0.5, speed: 15.0 }
    }
}

/// Where the lateral deviation fed to the agent comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LateralSource {
    #[default]
    GroundTruth,
    /// `d = −ĉ0` from the coefficient regressor run on the rendered frame.
    Perception,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub vehicle: VehicleParams,
    pub reward: RewardWeights,
    pub graph: GraphSpec,
    pub min_route_hops: usize,
    pub min_route_length: f64,
    pub occlusion: OcclusionParams,
    pub render: RenderParams,
    pub scales: ObservationScales,
    pub lateral_source: LateralSource,
    /// Initial lateral offset is drawn uniformly from ±this (m).
    pub initial_lateral: f64,
    /// Initial heading error is drawn uniformly from ±this (rad).
    pub initial_heading: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            vehicle: VehicleParams::default(),
            reward: RewardWeights::default(),
            graph: GraphSpec::default(),
            min_route_hops: 3,
            min_route_length: 0.0,
            occlusion: OcclusionParams::default(),
            render: RenderParams::default(),
            scales: ObservationScales::default(),
            lateral_source: LateralSource::GroundTruth,
            initial_lateral: 0.0,
            initial_heading: 0.0,
        }
    }
}

const MAX_GRAPH_DRAWS: usize = 64;

/// Everything random about an episode, fixed by one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSetup {
    pub seed: u64,
    pub route: Route,
    pub occlusion: OcclusionConfig,
    pub friction: FrictionModel,
    pub initial_lateral: f64,
    pub initial_heading: f64,
}

impl EpisodeSetup {
    /// Draws a fresh road graph, a route on it, an occlusion pattern and an
    /// initial offset.
    pub fn sample(cfg: &EnvConfig, seed: u64, mu: f64) -> Result<Self, EnvError> {
        let friction = FrictionModel::new(mu)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // a small graph may hold no route long enough; draw another one
        let mut attempts = 0;
        let route = loop {
            let graph = generate_graph(rng.random(), &cfg.graph)?;
            match sample_route(&graph, &mut rng, cfg.min_route_hops, cfg.min_route_length) {
                Err(TrackError::NoCandidatePair) if attempts < MAX_GRAPH_DRAWS => attempts += 1,
                other => break other?,
            }
        };
        let occlusion = sample_occlusion(rng.random(), &cfg.occlusion, route.s_total);
        let initial_lateral = symmetric(&mut rng, cfg.initial_lateral);
        let initial_heading = symmetric(&mut rng, cfg.initial_heading);
        Ok(Self { seed, route, occlusion, friction, initial_lateral, initial_heading })
    }

    /// A straight road with clear markers, starting centered.
    pub fn straight(length: f64, lane_width: f64, mu: f64) -> Result<Self, EnvError> {
        Ok(Self {
            seed: 0,
            route: Route::straight(length, lane_width),
            occlusion: OcclusionConfig::clear(0),
            friction: FrictionModel::new(mu)?,
            initial_lateral: 0.0,
            initial_heading: 0.0,
        })
    }

    /// Same episode with every random draw mirrored left to right.
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for (_, seg) in out.route.segments.iter_mut() {
            seg.start.y = -seg.start.y;
            seg.start.heading = -seg.start.heading;
            seg.curvature = -seg.curvature;
        }
        out.initial_lateral = -self.initial_lateral;
        out.initial_heading = -self.initial_heading;
        std::mem::swap(&mut out.occlusion.drop_left, &mut out.occlusion.drop_right);
        for g in out.occlusion.gaps.iter_mut() {
            g.side = match g.side {
                crate::snow::Side::Left => crate::snow::Side::Right,
                crate::snow::Side::Right => crate::snow::Side::Left,
            };
        }
        out
    }
}

fn symmetric(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..bound)
    } else {
        0.0
    }
}

/// What the agent sees at one step. Images are shared between the
/// transitions that refer to the same frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub kinematics: [f64; 3],
    pub image: Option<Arc<RasterImage>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub verdict: Verdict,
    pub err: LaneFrameError,
    pub understeer: bool,
}

#[derive(Debug, Clone)]
pub struct Env {
    pub cfg: EnvConfig,
    pub setup: EpisodeSetup,
    pub state: VehicleState,
    pub err: LaneFrameError,
    pub step_index: usize,
    pub max_steps: usize,
    pub finished: bool,
}

impl Env {
    pub fn new(cfg: &EnvConfig, setup: EpisodeSetup, max_steps: usize) -> Result<Self, EnvError> {
        let start = setup.route.pose_at(0.0);
        let (sin, cos) = (libm::sin(start.heading), libm::cos(start.heading));
        let state = VehicleState {
            x: start.x - setup.initial_lateral * sin,
            y: start.y + setup.initial_lateral * cos,
            yaw: crate::track::wrap_angle(start.heading + setup.initial_heading),
            v: cfg.vehicle.initial_speed,
            last_action: Action::default(),
        };
        let err = setup.route.lane_frame(&state, 0.0)?;
        Ok(Self { cfg: cfg.clone(), setup, state, err, step_index: 0, max_steps, finished: max_steps == 0 })
    }

    pub fn route(&self) -> &Route {
        &self.setup.route
    }

    pub fn render_frame(&self) -> RasterImage {
        render(
            &self.state,
            &self.setup.route,
            self.err.s,
            &self.setup.occlusion,
            self.step_index as u64,
            &self.cfg.render,
        )
    }

    /// Kinematic observation `[d, φ, v]`, scaled.
    pub fn kinematics(&self, lateral: f64) -> [f64; 3] {
        let s = &self.cfg.scales;
        [lateral / s.lateral, self.err.phi / s.heading, self.state.v / s.speed]
    }

    /// Builds the observation. The frame is rendered only when the agent
    /// looks at images or when perception supplies the lateral deviation.
    pub fn observe(&self, want_image: bool, perception: Option<&CoeffRegressor>) -> Result<Observation, EnvError> {
        let need_frame = want_image || self.cfg.lateral_source == LateralSource::Perception;
        let frame = need_frame.then(|| self.render_frame());
        let lateral = match self.cfg.lateral_source {
            LateralSource::GroundTruth => self.err.d,
            LateralSource::Perception => {
                let model = perception.ok_or_else(|| EnvError::Perception("no regressor supplied".into()))?;
                let coeffs = model
                    .predict(frame.as_ref().expect("frame rendered"))
                    .map_err(|e| EnvError::Perception(e.to_string()))?;
                -coeffs.c0
            }
        };
        Ok(Observation {
            kinematics: self.kinematics(lateral),
            image: if want_image { frame.map(Arc::new) } else { None },
        })
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome, EnvError> {
        if self.finished {
            return Err(EnvError::Finished);
        }
        let action = action.clamped();
        let prev_action = self.state.last_action;
        let result = step(&self.state, action, self.cfg.vehicle.dt, &self.setup.friction, &self.cfg.vehicle)?;
        self.state = result.state;
        let route = &self.setup.route;
        let err = match route.lane_frame(&self.state, self.err.s) {
            Ok(e) => e,
            // far outside the corridor: report a departure at the corridor edge
            Err(TrackError::OutOfCorridor { .. }) => {
                LaneFrameError { d: 3.0 * route.lane_width * self.err.d.signum(), ..self.err }
            }
            Err(e) => return Err(e.into()),
        };
        let verdict = check_termination(&err, route, self.step_index, self.max_steps, &self.cfg.vehicle);
        let reward = step_reward(
            &RewardInput {
                err,
                speed: self.state.v,
                max_speed: self.cfg.vehicle.max_speed,
                lane_width: route.lane_width,
                action,
                prev_action,
                verdict,
            },
            &self.cfg.reward,
        );
        self.err = err;
        self.step_index += 1;
        self.finished = verdict.is_terminal();
        Ok(StepOutcome { reward, verdict, err, understeer: result.understeer })
    }
}
