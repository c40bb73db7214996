//! Lane keeping on snow-covered roads: a route-graph simulator with
//! partially occluded marker observations, action-robust actor-critic
//! agents, a learned lane-geometry regressor, and evaluation tooling.

pub mod agents;
pub mod config;
pub mod env;
pub mod evaluation;
pub mod nn;
pub mod perception;
pub mod reward;
pub mod snow;
pub mod track;
pub mod training;
pub mod vehicle;
