//! Convolutional regressor from a rendered frame to the cubic centerline
//! coefficients, plus the labeled datasets it trains on.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvConfig, EnvError, EpisodeSetup};
use crate::nn::{join, Activation, AdamState, Conv2d, Mlp, MlpCache, Module, NnError, Param, Tensor};
use crate::snow::{render, sample_occlusion, OcclusionConfig, RasterImage};
use crate::track::{centerline_label, wrap_angle, CenterlineCoeffs, TrackError, LABEL_DEPTH};
use crate::vehicle::{Action, VehicleState};

/// Divisors applied to `(c0, c1, c2, c3)` before regression.
pub const COEFF_SCALES: [f64; 4] = [3.5, 0.5, 0.05, 0.005];

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("training diverged at epoch {epoch}: loss {loss:.4e} exceeds 10× the initial {initial:.4e}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },
}

pub fn normalize(c: &CenterlineCoeffs) -> [f64; 4] {
    let a = c.as_array();
    std::array::from_fn(|i| a[i] / COEFF_SCALES[i])
}

pub fn denormalize(n: &[f64]) -> CenterlineCoeffs {
    CenterlineCoeffs::from_array(std::array::from_fn(|i| n[i] * COEFF_SCALES[i]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorConfig {
    pub conv1_filters: usize,
    pub conv1_kernel: usize,
    pub conv2_filters: usize,
    pub conv2_kernel: usize,
    pub stride: usize,
    pub hidden: usize,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self { conv1_filters: 8, conv1_kernel: 5, conv2_filters: 16, conv2_kernel: 3, stride: 2, hidden: 64 }
    }
}

/// conv → relu → conv → relu → flatten → dense → relu → dense(4).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeffRegressor {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub head: Mlp,
    /// `(channels, height, width)` of accepted images.
    pub image_shape: (usize, usize, usize),
}

struct RegressorCache {
    input: Tensor,
    c1: Tensor,
    c2: Tensor,
    head: MlpCache,
}

fn relu(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

fn relu_grad(g: &mut [f64], out: &[f64]) {
    for (g, &y) in g.iter_mut().zip(out) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

impl CoeffRegressor {
    pub fn new<R: Rng>(cfg: &RegressorConfig, image_shape: (usize, usize, usize), rng: &mut R) -> Self {
        let mut m = Self::zeros(cfg, image_shape);
        let (c, h, w) = image_shape;
        m.conv1 = Conv2d::new(c, cfg.conv1_filters, cfg.conv1_kernel, cfg.stride, 0, rng);
        m.conv2 = Conv2d::new(cfg.conv1_filters, cfg.conv2_filters, cfg.conv2_kernel, cfg.stride, 0, rng);
        let (h1, w1) = m.conv1.output_size(h, w);
        let (h2, w2) = m.conv2.output_size(h1, w1);
        m.head = Mlp::new(&[cfg.conv2_filters * h2 * w2, cfg.hidden, 4], Activation::Relu, Activation::Identity, rng);
        m
    }

    /// All parameters zero: the output is the same for every image.
    pub fn zeros(cfg: &RegressorConfig, image_shape: (usize, usize, usize)) -> Self {
        let (c, h, w) = image_shape;
        let conv1 = Conv2d::zeros(c, cfg.conv1_filters, cfg.conv1_kernel, cfg.stride, 0);
        let conv2 = Conv2d::zeros(cfg.conv1_filters, cfg.conv2_filters, cfg.conv2_kernel, cfg.stride, 0);
        let (h1, w1) = conv1.output_size(h, w);
        let (h2, w2) = conv2.output_size(h1, w1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head =
            Mlp::new(&[cfg.conv2_filters * h2 * w2, cfg.hidden, 4], Activation::Relu, Activation::Identity, &mut rng);
        head.params_mut().into_iter().for_each(|p| p.value.data.iter_mut().for_each(|v| *v = 0.0));
        Self { conv1, conv2, head, image_shape }
    }

    fn input(&self, image: &RasterImage) -> Result<Tensor, NnError> {
        let (c, h, w) = image.shape();
        if (c, h, w) != self.image_shape {
            let (ec, eh, ew) = self.image_shape;
            return Err(NnError::Shape { expected: vec![ec, eh, ew], got: vec![c, h, w] });
        }
        Tensor::new(&[c, h, w], image.to_f64())
    }

    fn forward_cached(&self, image: &RasterImage) -> Result<RegressorCache, NnError> {
        let input = self.input(image)?;
        let mut c1 = self.conv1.forward(&input)?;
        relu(&mut c1);
        let mut c2 = self.conv2.forward(&c1)?;
        relu(&mut c2);
        let head = self.head.forward_cached(&c2.data)?;
        Ok(RegressorCache { input, c1, c2, head })
    }

    fn backward(&mut self, cache: &RegressorCache, dy: &[f64]) {
        let mut d2 = self.head.backward(&cache.head, dy);
        relu_grad(&mut d2, &cache.c2.data);
        let d2 = Tensor { shape: cache.c2.shape.clone(), data: d2 };
        let mut d1 = self.conv2.backward(&cache.c1, &d2, true).expect("input grad requested");
        relu_grad(&mut d1.data, &cache.c1.data);
        self.conv1.backward(&cache.input, &d1, false);
    }

    /// Coefficients in normalized units (see [`COEFF_SCALES`]).
    pub fn predict_normalized(&self, image: &RasterImage) -> Result<[f64; 4], NnError> {
        let out = self.forward_cached(image)?;
        let o = out.head.output();
        Ok([o[0], o[1], o[2], o[3]])
    }

    pub fn predict(&self, image: &RasterImage) -> Result<CenterlineCoeffs, NnError> {
        Ok(denormalize(&self.predict_normalized(image)?))
    }
}

impl Module for CoeffRegressor {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv1.collect(&join(prefix, "conv1"), out);
        self.conv2.collect(&join(prefix, "conv2"), out);
        self.head.collect(&join(prefix, "head"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.conv1.collect_mut(out);
        self.conv2.collect_mut(out);
        self.head.collect_mut(out);
    }
}

/// Marker visibility of a rendered frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameCondition {
    /// Both markers, no snow.
    Sunny,
    /// Occlusion drawn from the configured snow statistics.
    Snowy,
    /// Exactly one marker removed, no snow.
    OneMarkerDropped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFrame {
    pub seed: u64,
    pub condition: FrameCondition,
    pub image: RasterImage,
    pub label: CenterlineCoeffs,
    pub dropped_markers: usize,
    pub snow_density: f64,
}

/// Pose perturbation used when sampling frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameSampling {
    pub max_lateral: f64,
    pub max_heading: f64,
}

impl Default for FrameSampling {
    fn default() -> Self {
        Self { max_lateral: 1.2, max_heading: 0.15 }
    }
}

/// Renders one labeled frame at a random pose on a random route.
pub fn sample_frame(
    env: &EnvConfig,
    sampling: &FrameSampling,
    seed: u64,
    condition: FrameCondition,
) -> Result<LabeledFrame, PerceptionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let setup = EpisodeSetup::sample(env, rng.random(), 1.0)?;
    let route = &setup.route;
    let s = rng.random_range(0.0..(route.s_total - LABEL_DEPTH).max(1.0));
    let lateral = rng.random_range(-sampling.max_lateral..=sampling.max_lateral);
    let heading = rng.random_range(-sampling.max_heading..=sampling.max_heading);
    let c = route.pose_at(s);
    let state = VehicleState {
        x: c.x - lateral * libm::sin(c.heading),
        y: c.y + lateral * libm::cos(c.heading),
        yaw: wrap_angle(c.heading + heading),
        v: env.vehicle.initial_speed,
        last_action: Action::default(),
    };
    let occ_seed: u64 = rng.random();
    let occlusion = match condition {
        FrameCondition::Sunny => OcclusionConfig::clear(occ_seed),
        FrameCondition::Snowy => sample_occlusion(occ_seed, &env.occlusion, route.s_total),
        FrameCondition::OneMarkerDropped => {
            let left = rng.random_bool(0.5);
            OcclusionConfig { drop_left: left, drop_right: !left, ..OcclusionConfig::clear(occ_seed) }
        }
    };
    let err = route.lane_frame(&state, s)?;
    let label = centerline_label(route, &state, err.s)?.coeffs;
    let image = render(&state, route, err.s, &occlusion, 0, &env.render);
    Ok(LabeledFrame {
        seed,
        condition,
        image,
        label,
        dropped_markers: occlusion.dropped_count(),
        snow_density: occlusion.snow_density,
    })
}

/// Seed of the `i`-th frame of a dataset.
pub fn frame_seed(dataset_seed: u64, index: usize) -> u64 {
    dataset_seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(index as u64)
}

/// `n_sunny` clear frames followed by `n_snowy` occluded ones.
pub fn build_dataset(
    env: &EnvConfig,
    sampling: &FrameSampling,
    n_sunny: usize,
    n_snowy: usize,
    seed: u64,
) -> Result<Vec<LabeledFrame>, PerceptionError> {
    if n_sunny + n_snowy == 0 {
        return Err(PerceptionError::EmptyDataset);
    }
    (0..n_sunny + n_snowy)
        .map(|i| {
            let condition = if i < n_sunny { FrameCondition::Sunny } else { FrameCondition::Snowy };
            sample_frame(env, sampling, frame_seed(seed, i), condition)
        })
        .collect()
}

/// Seeded shuffle split into (train, held-out) indices.
pub fn split_indices(n: usize, heldout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held = ((n as f64) * heldout_fraction).round() as usize;
    let n_held = if n > 1 { n_held.min(n - 1) } else { 0 };
    let held = idx.split_off(n - n_held);
    (idx, held)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for RegressorTraining {
    fn default() -> Self {
        Self { epochs: 30, lr: 1e-3, batch: 16, heldout_fraction: 0.2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorReport {
    /// Mean normalized squared error over the training split, per epoch.
    pub loss_curve: Vec<f64>,
    /// Held-out mean squared error per coefficient, normalized units.
    /// Empty when there is no held-out split.
    pub heldout_mse: Vec<f64>,
    pub train_indices: Vec<usize>,
    pub heldout_indices: Vec<usize>,
}

fn mean_loss(model: &CoeffRegressor, frames: &[&LabeledFrame]) -> Result<f64, NnError> {
    let mut total = 0.0;
    for f in frames {
        let p = model.predict_normalized(&f.image)?;
        let t = normalize(&f.label);
        total += p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 4.0;
    }
    Ok(total / frames.len() as f64)
}

/// Per-coefficient mean squared error in normalized units.
pub fn coefficient_mse(model: &CoeffRegressor, frames: &[&LabeledFrame]) -> Result<Vec<f64>, NnError> {
    let mut mse = vec![0.0; 4];
    for f in frames {
        let p = model.predict_normalized(&f.image)?;
        let t = normalize(&f.label);
        for k in 0..4 {
            mse[k] += (p[k] - t[k]).powi(2) / frames.len() as f64;
        }
    }
    Ok(mse)
}

/// Fits a fresh regressor by minibatch Adam on the mean squared normalized
/// coefficient error.
pub fn train_regressor(
    dataset: &[LabeledFrame],
    arch: &RegressorConfig,
    cfg: &RegressorTraining,
) -> Result<(CoeffRegressor, RegressorReport), PerceptionError> {
    if dataset.is_empty() {
        return Err(PerceptionError::EmptyDataset);
    }
    let (train_idx, held_idx) = split_indices(dataset.len(), cfg.heldout_fraction, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e9a_11ce);
    let mut model = CoeffRegressor::new(arch, dataset[0].image.shape(), &mut rng);
    let train: Vec<&LabeledFrame> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let held: Vec<&LabeledFrame> = held_idx.iter().map(|&i| &dataset[i]).collect();
    let mut adam = AdamState::new();
    let initial = mean_loss(&model, &train)?;
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            model.zero_grad();
            for &i in chunk {
                let frame = train[i];
                let cache = model.forward_cached(&frame.image)?;
                let target = normalize(&frame.label);
                let out = cache.head.output();
                let scale = 2.0 / (4.0 * chunk.len() as f64);
                let dy: Vec<f64> = (0..4).map(|k| scale * (out[k] - target[k])).collect();
                epoch_loss += (0..4).map(|k| (out[k] - target[k]).powi(2)).sum::<f64>() / 4.0;
                model.backward(&cache, &dy);
            }
            adam.step_module(&mut model, cfg.lr)?;
        }
        let epoch_loss = epoch_loss / train.len() as f64;
        if !epoch_loss.is_finite() || epoch_loss > 10.0 * initial.max(1e-12) {
            return Err(PerceptionError::Diverged { epoch, loss: epoch_loss, initial });
        }
        loss_curve.push(epoch_loss);
    }
    let heldout_mse = if held.is_empty() { Vec::new() } else { coefficient_mse(&model, &held)? };
    Ok((model, RegressorReport { loss_curve, heldout_mse, train_indices: train_idx, heldout_indices: held_idx }))
}

/// Label sidecar written next to each image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSidecar {
    pub image: String,
    pub seed: u64,
    pub condition: FrameCondition,
    pub label: CenterlineCoeffs,
    pub dropped_markers: usize,
    pub snow_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub frames: usize,
    pub sunny: usize,
    pub snowy: usize,
    pub width: usize,
    pub height: usize,
}

/// Writes `frame_NNNNN.pgm` plus a JSON sidecar per frame and a
/// `manifest.json`. Output bytes depend only on the frames and seed.
pub fn write_dataset(frames: &[LabeledFrame], seed: u64, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        let image = format!("frame_{i:05}.pgm");
        fs::write(dir.join(&image), f.image.to_pgm())?;
        let sidecar = FrameSidecar {
            image: image.clone(),
            seed: f.seed,
            condition: f.condition,
            label: f.label,
            dropped_markers: f.dropped_markers,
            snow_density: f.snow_density,
        };
        fs::write(dir.join(format!("frame_{i:05}.json")), serde_json::to_string_pretty(&sidecar)?)?;
    }
    let count = |c| frames.iter().filter(|f| f.condition == c).count();
    let (width, height) = frames.first().map_or((0, 0), |f| (f.image.width, f.image.height));
    let manifest = DatasetManifest {
        seed,
        frames: frames.len(),
        sunny: count(FrameCondition::Sunny),
        snowy: count(FrameCondition::Snowy),
        width,
        height,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)
}

impl CoeffRegressor {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("regressor serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Fraction of frames whose predicted lateral offset has the label's sign.
pub fn offset_sign_accuracy(model: &CoeffRegressor, frames: &[LabeledFrame]) -> Result<f64, NnError> {
    let mut hits = 0usize;
    for f in frames {
        let p = model.predict(&f.image)?;
        if (p.c0 >= 0.0) == (f.label.c0 >= 0.0) {
            hits += 1;
        }
    }
    Ok(hits as f64 / frames.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dataset_rejected() {
        let env = EnvConfig::default();
        assert!(matches!(build_dataset(&env, &FrameSampling::default(), 0, 0, 1), Err(PerceptionError::EmptyDataset)));
    }

    #[test]
    fn dataset_is_deterministic() {
        let env = EnvConfig::default();
        let a = build_dataset(&env, &FrameSampling::default(), 2, 2, 9).unwrap();
        let b = build_dataset(&env, &FrameSampling::default(), 2, 2, 9).unwrap();
        assert_eq!(a, b);
        assert!(a[..2].iter().all(|f| f.condition == FrameCondition::Sunny && f.snow_density == 0.0));
    }

    #[test]
    fn zero_model_is_constant() {
        let env = EnvConfig::default();
        let frames = build_dataset(&env, &FrameSampling::default(), 3, 0, 2).unwrap();
        let m = CoeffRegressor::zeros(&RegressorConfig::default(), (1, 64, 64));
        let first = m.predict(&frames[0].image).unwrap();
        for f in &frames {
            assert_eq!(m.predict(&f.image).unwrap(), first);
        }
        assert!(m.predict(&RasterImage::blank(32, 32, 1)).is_err());
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let (a, b) = split_indices(250, 0.2, 4);
        assert_eq!((a.len(), b.len()), (200, 50));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..250).collect::<Vec<_>>());
    }
}
