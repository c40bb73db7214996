//! Monte Carlo validation on seeded routes: lateral-error metrics per
//! episode, per-variant aggregates, and the report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{run_episode, Agent, EpisodeRecord, StepRecord};
use crate::env::{Env, EnvConfig, EnvError, EpisodeSetup};
use crate::perception::CoeffRegressor;
use crate::track::{Route, TrackError};
use crate::training::episode_seed;
use crate::vehicle::{Action, VehicleState, Verdict};

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TABLE: &str = "report.txt";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metrics need at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("lane width must be positive")]
    LaneWidth,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid validation config: {0}")]
    Config(String),
}

/// Lateral error of each visited state against the true centerline.
pub fn lateral_error_series(trajectory: &[VehicleState], route: &Route) -> Result<Vec<f64>, TrackError> {
    let mut s = 0.0;
    trajectory
        .iter()
        .map(|state| {
            let err = route.lane_frame(state, s)?;
            s = err.s;
            Ok(err.d)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub rmse: f64,
    pub nrmse_lane: f64,
    /// Population standard deviation about the series mean.
    pub sigma: f64,
    pub mean: f64,
    pub completed: bool,
    pub steps: usize,
}

/// RMSE, mean and population σ of `series`; `completed` is left false.
pub fn compute_metrics(series: &[f64], lane_width: f64) -> Result<EpisodeMetrics, EvalError> {
    if series.len() < 2 {
        return Err(EvalError::TooShort(series.len()));
    }
    if !(lane_width > 0.0) {
        return Err(EvalError::LaneWidth);
    }
    let n = series.len() as f64;
    let mut mean = 0.0;
    let mut square = 0.0;
    for &e in series {
        mean += e;
        square += e * e;
    }
    mean /= n;
    let rmse = (square / n).sqrt();
    // Welford's update for the spread, to stay accurate when |mean| ≫ σ
    let mut m = 0.0;
    let mut m2 = 0.0;
    for (k, &e) in series.iter().enumerate() {
        let delta = e - m;
        m += delta / (k + 1) as f64;
        m2 += delta * (e - m);
    }
    Ok(EpisodeMetrics {
        rmse,
        nrmse_lane: rmse / lane_width,
        sigma: (m2 / n).sqrt(),
        mean,
        completed: false,
        steps: series.len(),
    })
}

/// What drives the vehicle during validation.
#[derive(Debug, Clone)]
pub enum Controller {
    Agent(Box<Agent>),
    /// Fixed command every step.
    Constant(Action),
    /// Proportional steering on the scaled kinematic observation.
    Linear {
        lateral_gain: f64,
        heading_gain: f64,
        throttle: f64,
    },
}

impl Controller {
    fn command(&self, kinematics: &[f64; 3]) -> Action {
        match *self {
            Controller::Constant(a) => a,
            Controller::Linear { lateral_gain, heading_gain, throttle } => {
                Action::new(-lateral_gain * kinematics[0] - heading_gain * kinematics[1], throttle).clamped()
            }
            Controller::Agent(_) => unreachable!("agents act through run_episode"),
        }
    }
}

/// Plays one noise-free episode.
pub fn rollout(
    controller: &Controller,
    env: &mut Env,
    alpha: f64,
    perception: Option<&CoeffRegressor>,
) -> EpisodeRecord {
    if let Controller::Agent(agent) = controller {
        return run_episode(agent, env, None, alpha, perception);
    }
    let mut record = EpisodeRecord::default();
    while !env.finished {
        let obs = match env.observe(false, perception) {
            Ok(o) => o,
            Err(e) => {
                record.fault = Some(e.to_string());
                break;
            }
        };
        let action = controller.command(&obs.kinematics);
        let outcome = match env.step(action) {
            Ok(o) => o,
            Err(e) => {
                record.fault = Some(e.to_string());
                break;
            }
        };
        record.total_return += outcome.reward;
        record.verdict = Some(outcome.verdict);
        record.steps.push(StepRecord {
            next_obs: obs.clone(),
            obs,
            hidden_before: Vec::new(),
            action: action.as_array(),
            a_mu: action.as_array(),
            a_adv: [0.0; 2],
            reward: outcome.reward,
            done: outcome.verdict == Verdict::LaneDeparture,
            state: env.state,
            lateral: outcome.err.d,
            verdict: outcome.verdict,
        });
    }
    record
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationConfig {
    pub routes: usize,
    pub friction: f64,
    /// Mixing weight of the adversary at evaluation time.
    pub alpha: f64,
    pub seed: u64,
    pub steps: usize,
    pub env: EnvConfig,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self { routes: 50, friction: 0.5, alpha: 0.0, seed: 1_000_003, steps: 400, env: EnvConfig::default() }
    }
}

impl ValidationConfig {
    pub fn route_seeds(&self) -> Vec<u64> {
        (0..self.routes).map(|i| episode_seed(self.seed, i)).collect()
    }

    /// The paired episode setups every controller is evaluated on.
    pub fn setups(&self) -> Result<Vec<EpisodeSetup>, EvalError> {
        Ok(self
            .route_seeds()
            .into_iter()
            .map(|s| EpisodeSetup::sample(&self.env, s, self.friction))
            .collect::<Result<_, _>>()?)
    }
}

/// One (variant, route) row of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub route_seed: u64,
    pub rmse: f64,
    pub nrmse: f64,
    pub sigma: f64,
    pub completed: bool,
    pub steps: usize,
    pub total_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub episodes: usize,
    pub rmse_mean: f64,
    /// Half-width of the normal 95% interval; absent for one episode.
    pub rmse_ci95: Option<f64>,
    pub nrmse_mean: f64,
    pub nrmse_ci95: Option<f64>,
    /// Per-episode σ, averaged over episodes.
    pub sigma_episode_mean: f64,
    /// σ of all lateral errors pooled across episodes.
    pub sigma_pooled: f64,
    pub completion_rate: f64,
    pub departure_rate: f64,
    /// 99th percentile of the per-step action change norm.
    pub action_delta_p99: f64,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub routes: usize,
    pub friction: f64,
    pub alpha: f64,
    pub seed: u64,
    pub route_seeds: Vec<u64>,
    pub summaries: Vec<VariantSummary>,
    pub rows: Vec<ReportRow>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard error of the mean; `None` below two samples.
pub fn standard_error(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    Some((var / xs.len() as f64).sqrt())
}

/// Nearest-rank percentile, `q` in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Norms of the change between consecutive executed actions.
pub fn action_deltas(actions: &[[f64; 2]]) -> Vec<f64> {
    actions.windows(2).map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt()).collect()
}

/// Evaluates every controller on the same seeded setups. Episodes shorter
/// than two steps are scored on what they have, padded with their last
/// error.
pub fn validate(
    controllers: &[(String, Controller)],
    cfg: &ValidationConfig,
    perception: Option<&CoeffRegressor>,
) -> Result<ValidationReport, EvalError> {
    if cfg.routes == 0 {
        return Err(EvalError::Config("routes must be at least 1".into()));
    }
    if !(cfg.friction > 0.0) {
        return Err(EvalError::Config("friction must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(EvalError::Config("alpha must be in [0, 1]".into()));
    }
    let setups = cfg.setups()?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (name, controller) in controllers {
        let alpha = match controller {
            Controller::Agent(a) => a.variant.effective_alpha(cfg.alpha),
            _ => 0.0,
        };
        let mut metrics = Vec::new();
        let mut pooled = Vec::new();
        let mut deltas = Vec::new();
        let mut returns = Vec::new();
        let mut departures = 0;
        for setup in &setups {
            let lane_width = setup.route.lane_width;
            let mut env = Env::new(&cfg.env, setup.clone(), cfg.steps)?;
            let record = rollout(controller, &mut env, alpha, perception);
            let mut series = record.lateral_errors();
            if series.is_empty() {
                series.push(env.err.d);
            }
            if series.len() < 2 {
                series.push(*series.last().expect("non-empty"));
            }
            let mut m = compute_metrics(&series, lane_width)?;
            m.completed = record.completed();
            m.steps = record.steps.len();
            if record.verdict == Some(Verdict::LaneDeparture) {
                departures += 1;
            }
            pooled.extend_from_slice(&series);
            deltas.extend(action_deltas(&record.actions()));
            returns.push(record.total_return);
            rows.push(ReportRow {
                variant: name.clone(),
                route_seed: setup.seed,
                rmse: m.rmse,
                nrmse: m.nrmse_lane,
                sigma: m.sigma,
                completed: m.completed,
                steps: m.steps,
                total_return: record.total_return,
            });
            metrics.push(m);
        }
        let rmse: Vec<f64> = metrics.iter().map(|m| m.rmse).collect();
        let nrmse: Vec<f64> = metrics.iter().map(|m| m.nrmse_lane).collect();
        let sigmas: Vec<f64> = metrics.iter().map(|m| m.sigma).collect();
        let n = metrics.len() as f64;
        summaries.push(VariantSummary {
            variant: name.clone(),
            episodes: metrics.len(),
            rmse_mean: mean(&rmse),
            rmse_ci95: standard_error(&rmse).map(|se| 1.96 * se),
            nrmse_mean: mean(&nrmse),
            nrmse_ci95: standard_error(&nrmse).map(|se| 1.96 * se),
            sigma_episode_mean: mean(&sigmas),
            sigma_pooled: compute_metrics(&pooled, 1.0)?.sigma,
            completion_rate: metrics.iter().filter(|m| m.completed).count() as f64 / n,
            departure_rate: departures as f64 / n,
            action_delta_p99: percentile(&deltas, 99.0),
            mean_return: mean(&returns),
        });
    }
    Ok(ValidationReport {
        routes: cfg.routes,
        friction: cfg.friction,
        alpha: cfg.alpha,
        seed: cfg.seed,
        route_seeds: setups.iter().map(|s| s.seed).collect(),
        summaries,
        rows,
    })
}

impl ValidationReport {
    pub fn summary(&self, variant: &str) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }

    pub fn rmse_of(&self, variant: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.variant == variant).map(|r| r.rmse).collect()
    }

    /// Mean and standard error of the per-route difference
    /// `rmse(a) − rmse(b)`.
    pub fn paired_difference(&self, a: &str, b: &str) -> Option<(f64, f64)> {
        let (ra, rb) = (self.rmse_of(a), self.rmse_of(b));
        if ra.len() != rb.len() || ra.is_empty() {
            return None;
        }
        let diff: Vec<f64> = ra.iter().zip(&rb).map(|(x, y)| x - y).collect();
        Some((mean(&diff), standard_error(&diff).unwrap_or(f64::NAN)))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,route_seed,rmse,nrmse,sigma,completed,steps,return\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.variant, r.route_seed, r.rmse, r.nrmse, r.sigma, r.completed, r.steps, r.total_return
            );
        }
        out
    }

    /// Table with one line per variant: RMSE, nRMSE and both σ readings.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "Lane tracking accuracy over {} routes (friction {}, alpha {})\n",
            self.routes, self.friction, self.alpha
        );
        let _ = writeln!(
            out,
            "{:<10} {:>14} {:>14} {:>10} {:>10} {:>9} {:>9}",
            "variant", "RMSE (m)", "nRMSE", "sigma_ep", "sigma_all", "complete", "p99 |da|"
        );
        for s in &self.summaries {
            let ci = |c: Option<f64>| c.map_or("n/a".to_string(), |c| format!("{c:.3}"));
            let _ = writeln!(
                out,
                "{:<10} {:>6.3} ± {:>5} {:>6.3} ± {:>5} {:>10.3} {:>10.3} {:>9.2} {:>9.3}",
                s.variant,
                s.rmse_mean,
                ci(s.rmse_ci95),
                s.nrmse_mean,
                ci(s.nrmse_ci95),
                s.sigma_episode_mean,
                s.sigma_pooled,
                s.completion_rate,
                s.action_delta_p99
            );
        }
        out
    }

    /// Writes the CSV, JSON and table files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| EvalError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let files = [
            (REPORT_CSV, self.to_csv()),
            (REPORT_JSON, serde_json::to_string_pretty(self).expect("report serializes")),
            (REPORT_TABLE, self.to_table()),
        ];
        for (name, text) in files {
            let path = dir.join(name);
            fs::write(&path, text).map_err(io(&path))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_of_symmetric_pair() {
        let m = compute_metrics(&[0.3, -0.3], 3.5).unwrap();
        assert!((m.rmse - 0.3).abs() < 1e-15);
        assert!(m.mean.abs() < 1e-15);
        assert!((m.sigma - 0.3).abs() < 1e-15);
        assert_eq!(m.nrmse_lane, m.rmse / 3.5);
    }

    #[test]
    fn metrics_need_two_samples() {
        assert!(matches!(compute_metrics(&[0.1], 3.5), Err(EvalError::TooShort(1))));
        let z = compute_metrics(&[0.0; 10], 3.5).unwrap();
        assert_eq!((z.rmse, z.sigma), (0.0, 0.0));
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&v, 100.0), 100.0);
        assert_eq!(percentile(&[5.0], 99.0), 5.0);
    }

    #[test]
    fn action_delta_norms() {
        let d = action_deltas(&[[0.0, 0.0], [0.3, 0.4], [0.3, 0.4]]);
        assert_eq!(d, vec![0.5, 0.0]);
    }
}
