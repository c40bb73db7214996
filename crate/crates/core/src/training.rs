//! Episodic training loop: play an episode, store it, then run a block of
//! minibatch updates. Every episode's randomness is derived from the run
//! seed and the episode index, so a resumed run matches an uninterrupted one.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    run_episode, Agent, AgentConfig, AgentError, Exploration, ExplorationNoise, ReplayBuffer, SequenceSample,
    Transition, Variant,
};
use crate::env::{Env, EnvConfig, EnvError, EpisodeSetup};
use crate::nn::{Checkpoint, CheckpointError};
use crate::perception::CoeffRegressor;

pub const CURVE_FILE: &str = "curve.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("non-finite values in episode {episode}: {detail}; last good checkpoint is from episode {last_good}")]
    NonFinite { episode: usize, last_good: usize, detail: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("run state: {0}")]
    State(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub agent: AgentConfig,
    pub env: EnvConfig,
    pub episodes: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub ma_window: usize,
    pub buffer_capacity: usize,
    pub friction: f64,
    /// Gradient iterations after each episode; by default the episode's
    /// step count divided by the batch size.
    pub updates_per_episode: Option<usize>,
    pub noise: ExplorationNoise,
    pub seed: u64,
    /// Write a checkpoint every this many episodes (0: only at the end).
    pub checkpoint_every: usize,
    /// End training once the moving-average return reaches this value.
    pub stop_at_moving_average: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            agent: AgentConfig::default(),
            env: EnvConfig::default(),
            episodes: 500,
            steps: 400,
            batch_size: 64,
            ma_window: 20,
            buffer_capacity: 800_000,
            friction: 0.6,
            updates_per_episode: None,
            noise: ExplorationNoise::default(),
            seed: 0,
            checkpoint_every: 50,
            stop_at_moving_average: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.agent.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.ma_window == 0 {
            return bad("ma_window must be positive");
        }
        if self.buffer_capacity < self.agent.bptt {
            return bad("buffer_capacity must hold at least one window");
        }
        if !(self.friction > 0.0 && self.friction.is_finite()) {
            return bad("friction must be positive");
        }
        if !self.env.reward.is_valid() {
            return bad("reward weights must be finite and non-negative");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Trailing mean over the last `min(window, i + 1)` values.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "window must be at least 1");
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (i, &x) in series.iter().enumerate() {
        sum += x;
        if i >= window {
            sum -= series[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Seed of episode `episode` in a run seeded with `run_seed`.
pub fn episode_seed(run_seed: u64, episode: usize) -> u64 {
    let mut z = run_seed ^ (episode as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn episode_rng(run_seed: u64, episode: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(run_seed, episode));
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Replay {
    Flat(ReplayBuffer<Transition>),
    Sequences(ReplayBuffer<SequenceSample>),
}

impl Replay {
    pub fn len(&self) -> usize {
        match self {
            Replay::Flat(b) => b.len(),
            Replay::Sequences(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        match self {
            Replay::Flat(b) => b.capacity(),
            Replay::Sequences(b) => b.capacity(),
        }
    }
}

/// Identifies a training run and how to rebuild its agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub variant: Variant,
    pub alpha: f64,
    pub gamma: f64,
    pub seed: u64,
    pub episodes_completed: usize,
    pub updates: u64,
    pub config_hash: String,
    /// SHA-256 of the config file the run was started from, if any.
    pub config_file_hash: Option<String>,
    pub package_version: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub total_return: f64,
    pub steps: usize,
    pub updates: usize,
    pub fault: Option<String>,
}

/// Complete state of a run; serializing it between episodes and loading
/// it back continues the run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub variant: Variant,
    pub cfg: TrainConfig,
    pub agent: Agent,
    pub replay: Replay,
    /// Returns of the episodes that took at least one step.
    pub returns: Vec<f64>,
    /// Every episode played, including empty ones.
    pub log: Vec<EpisodeLog>,
    pub config_file_hash: Option<String>,
}

impl Trainer {
    pub fn new(variant: Variant, cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let agent = Agent::new(variant, &cfg.agent, cfg.seed)?;
        let replay = if variant.recurrent() {
            Replay::Sequences(ReplayBuffer::new(cfg.buffer_capacity / cfg.agent.bptt))
        } else {
            Replay::Flat(ReplayBuffer::new(cfg.buffer_capacity))
        };
        Ok(Self {
            variant,
            cfg: cfg.clone(),
            agent,
            replay,
            returns: Vec::new(),
            log: Vec::new(),
            config_file_hash: None,
        })
    }

    pub fn episode(&self) -> usize {
        self.log.len()
    }

    pub fn moving_average(&self) -> Vec<f64> {
        moving_average(&self.returns, self.cfg.ma_window)
    }

    pub fn done(&self) -> bool {
        if self.episode() >= self.cfg.episodes {
            return true;
        }
        match (self.cfg.stop_at_moving_average, self.moving_average().last()) {
            (Some(goal), Some(&ma)) => self.returns.len() >= self.cfg.ma_window && ma >= goal,
            _ => false,
        }
    }

    /// Environment of episode `episode`: fresh route and occlusion.
    pub fn episode_env(&self, episode: usize) -> Result<Env, TrainError> {
        let setup = EpisodeSetup::sample(&self.cfg.env, episode_seed(self.cfg.seed, episode), self.cfg.friction)?;
        Ok(Env::new(&self.cfg.env, setup, self.cfg.steps)?)
    }

    /// Plays one episode and runs the update block that follows it.
    pub fn step_episode(&mut self, perception: Option<&CoeffRegressor>) -> Result<&EpisodeLog, TrainError> {
        let episode = self.episode();
        let mut env = self.episode_env(episode)?;
        let mut noise_rng = episode_rng(self.cfg.seed, episode, 1);
        let std = self.cfg.noise.std_at(episode);
        let alpha = self.agent.alpha();
        let record =
            run_episode(&self.agent, &mut env, Some(Exploration { std, rng: &mut noise_rng }), alpha, perception);
        let steps = record.steps.len();
        let total_return = record.total_return;
        let fault = record.fault.clone();
        if !total_return.is_finite() {
            return Err(TrainError::NonFinite { episode, last_good: episode, detail: "episode return".into() });
        }
        match &mut self.replay {
            Replay::Flat(buf) => record.into_transitions().into_iter().for_each(|t| buf.push(t)),
            Replay::Sequences(buf) => record.into_windows(self.cfg.agent.bptt).into_iter().for_each(|w| buf.push(w)),
        }

        let n_updates = self.cfg.updates_per_episode.unwrap_or(steps / self.cfg.batch_size);
        let mut update_rng = episode_rng(self.cfg.seed, episode, 2);
        let mut done_updates = 0;
        for _ in 0..n_updates {
            let result = match &self.replay {
                Replay::Flat(buf) if buf.len() >= self.cfg.batch_size => {
                    let batch = buf.sample(self.cfg.batch_size, &mut update_rng);
                    self.agent.update_flat(&batch)
                }
                Replay::Sequences(buf) if !buf.is_empty() => {
                    let windows = (self.cfg.batch_size / self.cfg.agent.bptt).max(1);
                    let batch = buf.sample(windows, &mut update_rng);
                    self.agent.update_recurrent(&batch)
                }
                _ => break,
            };
            match result {
                Ok(_) => done_updates += 1,
                Err(AgentError::NonFinite { what, .. }) => {
                    return Err(TrainError::NonFinite { episode, last_good: episode, detail: what })
                }
                Err(e) => return Err(e.into()),
            }
        }
        if !self.agent.all_finite() {
            return Err(TrainError::NonFinite { episode, last_good: episode, detail: "parameters".into() });
        }
        if steps > 0 {
            self.returns.push(total_return);
        }
        self.log.push(EpisodeLog { episode, total_return, steps, updates: done_updates, fault });
        Ok(self.log.last().expect("just pushed"))
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            variant: self.variant,
            alpha: self.agent.alpha(),
            gamma: self.cfg.agent.gamma,
            seed: self.cfg.seed,
            episodes_completed: self.episode(),
            updates: self.agent.updates,
            config_hash: self.cfg.hash(),
            config_file_hash: self.config_file_hash.clone(),
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.cfg.clone(),
        }
    }

    /// Return curve as CSV: `episode,return,moving_avg`.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("episode,return,moving_avg\n");
        let played = self.log.iter().filter(|l| l.steps > 0);
        for ((l, r), m) in played.zip(&self.returns).zip(self.moving_average()) {
            out.push_str(&format!("{},{},{}\n", l.episode + 1, r, m));
        }
        out
    }

    /// Writes checkpoint, manifest and curve into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let ck = self.agent.to_checkpoint()?;
        let ck_path = dir.join(CHECKPOINT_FILE);
        ck.write(&ck_path)?;
        let manifest_path = dir.join(MANIFEST_FILE);
        fs::write(&manifest_path, serde_json::to_string_pretty(&self.manifest())?).map_err(io_err(&manifest_path))?;
        let curve_path = dir.join(CURVE_FILE);
        fs::write(&curve_path, self.curve_csv()).map_err(io_err(&curve_path))?;
        Ok(())
    }

    pub fn save_state(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, serde_json::to_string(self)?).map_err(io_err(path))
    }

    pub fn load_state(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: Agent,
    pub returns: Vec<f64>,
    pub moving_average: Vec<f64>,
    pub episodes: usize,
}

/// Runs `trainer` until its episode budget or early-stop goal. With `out`
/// set, artifacts are written every `checkpoint_every` episodes and at the
/// end. On a non-finite fault the last good state is written (when `out`
/// is set) and the fault is returned.
pub fn run(
    trainer: &mut Trainer,
    out: Option<&Path>,
    perception: Option<&CoeffRegressor>,
) -> Result<TrainOutcome, TrainError> {
    let mut last_good = trainer.clone();
    while !trainer.done() {
        match trainer.step_episode(perception) {
            Ok(_) => {
                let ep = trainer.episode();
                if trainer.cfg.checkpoint_every > 0 && ep.is_multiple_of(trainer.cfg.checkpoint_every) {
                    if let Some(dir) = out {
                        trainer.write_artifacts(dir)?;
                    }
                    last_good = trainer.clone();
                }
            }
            Err(TrainError::NonFinite { episode, detail, .. }) => {
                if let Some(dir) = out {
                    last_good.write_artifacts(dir)?;
                }
                *trainer = last_good;
                return Err(TrainError::NonFinite { episode, last_good: trainer.episode(), detail });
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(dir) = out {
        trainer.write_artifacts(dir)?;
    }
    Ok(TrainOutcome {
        agent: trainer.agent.clone(),
        returns: trainer.returns.clone(),
        moving_average: trainer.moving_average(),
        episodes: trainer.episode(),
    })
}

/// Fresh run of `variant` under `cfg`.
pub fn train(variant: Variant, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(variant, cfg)?;
    run(&mut trainer, out, None)
}

/// Loads the agent of a finished run directory.
pub fn load_run(dir: &Path) -> Result<(RunManifest, Agent), TrainError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    let ck = Checkpoint::read(&dir.join(CHECKPOINT_FILE))?;
    let agent = Agent::from_checkpoint(manifest.variant, &manifest.config.agent, &ck)?;
    Ok((manifest, agent))
}
