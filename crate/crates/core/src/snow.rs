//! Synthetic top-down raster observations with snow speckle and lane-marker
//! dropout.
//!
//! The viewport is the rectangle ahead of the vehicle in its own frame:
//! row 0 is `view_depth` meters ahead, the last row is at the front axle,
//! column 0 is `view_half_width` meters to the left.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::track::Route;
use crate::vehicle::VehicleState;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error("image shape {got:?} does not match {want:?}")]
    Shape { got: (usize, usize, usize), want: (usize, usize, usize) },
}

/// Image with 8-bit storage; pixel values are `byte / 255` and so always
/// lie in [0, 1].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Channel-major bytes: `data[(c * height + row) * width + col]`.
    pub data: Vec<u8>,
}

impl RasterImage {
    pub fn blank(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0; width * height * channels] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        f64::from(self.data[(channel * self.height + row) * self.width + col]) / 255.0
    }

    /// Pixel values as reals, channel-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| f64::from(b) / 255.0).collect()
    }

    /// Left-right mirror.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for r in 0..self.height {
                for col in 0..self.width {
                    out.data[(c * self.height + r) * self.width + col] =
                        self.data[(c * self.height + r) * self.width + self.width - 1 - col];
                }
            }
        }
        out
    }

    /// Binary PGM (P5) of the first channel.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data[..self.width * self.height]);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, RasterError> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(RasterError::Pgm("truncated header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(RasterError::Pgm(format!("magic {:?}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| RasterError::Pgm(e.to_string()));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(RasterError::Pgm(format!("unsupported maxval {maxval}")));
        }
        let body = &bytes[pos + 1..];
        if body.len() != width * height {
            return Err(RasterError::Pgm(format!("expected {} pixel bytes, got {}", width * height, body.len())));
        }
        Ok(Self { width, height, channels: 1, data: body.to_vec() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

/// A stretch of arc length over which one marker is hidden.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerGap {
    pub side: Side,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionConfig {
    pub drop_left: bool,
    pub drop_right: bool,
    pub gaps: Vec<MarkerGap>,
    pub snow_density: f64,
    pub seed: u64,
}

impl OcclusionConfig {
    pub fn clear(seed: u64) -> Self {
        Self { drop_left: false, drop_right: false, gaps: Vec::new(), snow_density: 0.0, seed }
    }

    pub fn dropped_count(&self) -> usize {
        usize::from(self.drop_left) + usize::from(self.drop_right)
    }

    fn hidden(&self, side: Side, s: f64) -> bool {
        let dropped = match side {
            Side::Left => self.drop_left,
            Side::Right => self.drop_right,
        };
        dropped || self.gaps.iter().any(|g| g.side == side && (g.start..g.end).contains(&s))
    }
}

/// Probabilities driving [`sample_occlusion`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionParams {
    pub p_drop_left: f64,
    pub p_drop_right: f64,
    pub p_gaps: f64,
    pub max_gaps: usize,
    pub gap_length: (f64, f64),
    pub snow_density: (f64, f64),
}

impl Default for OcclusionParams {
    fn default() -> Self {
        Self {
            p_drop_left: 0.2,
            p_drop_right: 0.2,
            p_gaps: 0.5,
            max_gaps: 3,
            gap_length: (5.0, 30.0),
            snow_density: (0.2, 0.8),
        }
    }
}

impl OcclusionParams {
    /// No dropout, no gaps, no snow.
    pub fn none() -> Self {
        Self {
            p_drop_left: 0.0,
            p_drop_right: 0.0,
            p_gaps: 0.0,
            max_gaps: 0,
            gap_length: (5.0, 5.0),
            snow_density: (0.0, 0.0),
        }
    }
}

pub fn sample_occlusion(seed: u64, params: &OcclusionParams, route_length: f64) -> OcclusionConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0cc1_u64);
    let drop_left = rng.random_bool(params.p_drop_left.clamp(0.0, 1.0));
    let drop_right = rng.random_bool(params.p_drop_right.clamp(0.0, 1.0));
    let mut gaps = Vec::new();
    if params.max_gaps > 0 && rng.random_bool(params.p_gaps.clamp(0.0, 1.0)) {
        let n = rng.random_range(0..=params.max_gaps);
        for _ in 0..n {
            let side = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
            let start = rng.random_range(0.0..route_length.max(1.0));
            let (lo, hi) = params.gap_length;
            let len = if hi > lo { rng.random_range(lo..hi) } else { lo };
            gaps.push(MarkerGap { side, start, end: start + len });
        }
    }
    let (lo, hi) = params.snow_density;
    let snow_density = if hi > lo { rng.random_range(lo..hi) } else { lo }.clamp(0.0, 1.0);
    OcclusionConfig { drop_left, drop_right, gaps, snow_density, seed }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderParams {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub view_depth: f64,
    pub view_half_width: f64,
    /// Fraction of pixels hit by a flake at full snow density.
    pub max_flake_fraction: f64,
    /// Contrast lost to haze at full snow density.
    pub max_haze: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            channels: 1,
            view_depth: 20.0,
            view_half_width: 8.0,
            max_flake_fraction: 0.15,
            max_haze: 0.3,
        }
    }
}

impl RenderParams {
    /// Pixel containing the vehicle-frame point, if it is inside the view.
    pub fn pixel_of(&self, forward: f64, left: f64) -> Option<(usize, usize)> {
        if !(0.0..self.view_depth).contains(&forward) || left.abs() >= self.view_half_width {
            return None;
        }
        let row = ((self.view_depth - forward) / self.view_depth * self.height as f64) as usize;
        let col = ((self.view_half_width - left) / (2.0 * self.view_half_width) * self.width as f64) as usize;
        Some((row.min(self.height - 1), col.min(self.width - 1)))
    }
}

const MARKER_STEP: f64 = 0.05;
const HAZE_LEVEL: f64 = 0.35;

/// Flake positions and intensities for one frame; the first `k` flakes are
/// the same for any density, so the flake count is monotone in density.
fn flakes(occ: &OcclusionConfig, frame: u64, params: &RenderParams) -> impl Iterator<Item = (usize, u8)> {
    let pixels = params.width * params.height;
    let count = (occ.snow_density.clamp(0.0, 1.0) * params.max_flake_fraction * pixels as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(occ.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(frame));
    (0..count).map(move |_| {
        let idx = rng.random_range(0..pixels);
        let value = rng.random_range(140u8..=255u8);
        (idx, value)
    })
}

/// Number of snow flakes drawn for a frame.
pub fn flake_count(occ: &OcclusionConfig, params: &RenderParams) -> usize {
    flakes(occ, 0, params).count()
}

/// Renders the view ahead of the vehicle at arc length `s`.
pub fn render(
    state: &VehicleState,
    route: &Route,
    s: f64,
    occ: &OcclusionConfig,
    frame: u64,
    params: &RenderParams,
) -> RasterImage {
    let (w, h) = (params.width, params.height);
    let mut plane = vec![0u8; w * h];
    let half = route.lane_width / 2.0;
    let (sin, cos) = (libm::sin(state.yaw), libm::cos(state.yaw));
    let n = ((params.view_depth + 15.0) / MARKER_STEP).ceil() as usize;
    for side in [Side::Left, Side::Right] {
        let offset = if side == Side::Left { half } else { -half };
        for k in 0..=n {
            let sk = s - 5.0 + k as f64 * MARKER_STEP;
            if occ.hidden(side, sk) {
                continue;
            }
            let c = route.pose_at(sk);
            let bx = c.x - offset * libm::sin(c.heading) - state.x;
            let by = c.y + offset * libm::cos(c.heading) - state.y;
            let forward = bx * cos + by * sin;
            let left = -bx * sin + by * cos;
            if let Some((r, col)) = params.pixel_of(forward, left) {
                plane[r * w + col] = 255;
            }
        }
    }

    let density = occ.snow_density.clamp(0.0, 1.0);
    if density > 0.0 {
        let haze = params.max_haze * density;
        for p in plane.iter_mut() {
            let v = (1.0 - haze) * f64::from(*p) / 255.0 + haze * HAZE_LEVEL;
            *p = (v * 255.0).round() as u8;
        }
        for (idx, value) in flakes(occ, frame, params) {
            plane[idx] = plane[idx].max(value);
        }
    }

    let mut data = Vec::with_capacity(w * h * params.channels);
    for _ in 0..params.channels {
        data.extend_from_slice(&plane);
    }
    RasterImage { width: w, height: h, channels: params.channels, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::Action;

    fn centered() -> VehicleState {
        VehicleState { x: 10.0, y: 0.0, yaw: 0.0, v: 5.0, last_action: Action::default() }
    }

    #[test]
    fn pixels_in_unit_range_and_deterministic() {
        let route = Route::straight(100.0, 3.5);
        let occ = OcclusionConfig { snow_density: 0.7, ..OcclusionConfig::clear(3) };
        let p = RenderParams::default();
        let a = render(&centered(), &route, 10.0, &occ, 5, &p);
        let b = render(&centered(), &route, 10.0, &occ, 5, &p);
        assert_eq!(a, b);
        assert!(a.to_f64().iter().all(|v| (0.0..=1.0).contains(v)));
        let c = render(&centered(), &route, 10.0, &occ, 6, &p);
        assert_ne!(a, c);
    }

    #[test]
    fn occlusion_probability_extremes() {
        let none = OcclusionParams { p_drop_left: 0.0, p_drop_right: 0.0, ..OcclusionParams::default() };
        for seed in 0..20 {
            assert_eq!(sample_occlusion(seed, &none, 100.0).dropped_count(), 0);
        }
        let all = OcclusionParams { p_drop_left: 1.0, p_drop_right: 1.0, ..OcclusionParams::default() };
        assert_eq!(sample_occlusion(4, &all, 100.0).dropped_count(), 2);
        let d = OcclusionParams::default();
        assert_eq!(sample_occlusion(9, &d, 100.0), sample_occlusion(9, &d, 100.0));
        for seed in 0..50 {
            assert!(sample_occlusion(seed, &d, 100.0).gaps.len() <= 3);
        }
    }

    #[test]
    fn flake_count_monotone() {
        let p = RenderParams::default();
        let mut last = 0;
        for i in 0..=10 {
            let occ = OcclusionConfig { snow_density: i as f64 / 10.0, ..OcclusionConfig::clear(1) };
            let n = flake_count(&occ, &p);
            assert!(n >= last);
            last = n;
        }
    }

    #[test]
    fn pgm_round_trip() {
        let route = Route::straight(100.0, 3.5);
        let img = render(&centered(), &route, 10.0, &OcclusionConfig::clear(0), 0, &RenderParams::default());
        let bytes = img.to_pgm();
        assert!(bytes.starts_with(b"P5\n64 64\n255\n"));
        assert_eq!(RasterImage::from_pgm(&bytes).unwrap(), img);
        assert!(RasterImage::from_pgm(b"P2\n1 1\n255\n\x00").is_err());
    }
}
