//! Central finite-difference checks for every parameterized layer.
//!
//! Each check builds a randomly initialized layer, projects its output onto
//! a random direction to get a scalar loss, and compares the backward pass
//! against `(L(θ + h) − L(θ − h)) / 2h` for every parameter and input entry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Conv2d, Dense, Fusion, Module, RnnCell, SpatialAttention, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Tolerance for backpropagation through a whole recurrent chain.
pub const BPTT_TOLERANCE: f64 = 1e-3;
/// Denominator floor so entries that are zero up to rounding do not count
/// as relative failures.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;
pub const BPTT_STEPS: usize = 8;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv,
    RnnStep,
    RnnBptt,
    SpatialAttention,
    ChannelAttention,
    Fusion,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Dense,
        LayerKind::Conv,
        LayerKind::RnnStep,
        LayerKind::RnnBptt,
        LayerKind::SpatialAttention,
        LayerKind::ChannelAttention,
        LayerKind::Fusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv => "conv",
            LayerKind::RnnStep => "rnn_step",
            LayerKind::RnnBptt => "rnn_bptt",
            LayerKind::SpatialAttention => "spatial_attention",
            LayerKind::ChannelAttention => "channel_attention",
            LayerKind::Fusion => "fusion",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn tolerance(self) -> f64 {
        match self {
            LayerKind::RnnBptt => BPTT_TOLERANCE,
            _ => TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerReport {
    pub layer: LayerKind,
    pub seeds: usize,
    pub checked_entries: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Compares analytic gradients of `loss` against central differences over
/// every parameter of `layer` and every entry of `input`.
fn compare<L: Module>(
    layer: &mut L,
    input: &mut [f64],
    loss: impl Fn(&L, &[f64]) -> f64,
    analytic_params: &[f64],
    analytic_input: &[f64],
) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut k = 0;
    let n_params = layer.params_mut().len();
    for pi in 0..n_params {
        let len = layer.params_mut()[pi].value.data.len();
        for j in 0..len {
            let orig = layer.params_mut()[pi].value.data[j];
            layer.params_mut()[pi].value.data[j] = orig + STEP;
            let up = loss(layer, input);
            layer.params_mut()[pi].value.data[j] = orig - STEP;
            let down = loss(layer, input);
            layer.params_mut()[pi].value.data[j] = orig;
            worst = worst.max(rel_err(analytic_params[k], (up - down) / (2.0 * STEP)));
            k += 1;
            count += 1;
        }
    }
    for j in 0..input.len() {
        let orig = input[j];
        input[j] = orig + STEP;
        let up = loss(layer, input);
        input[j] = orig - STEP;
        let down = loss(layer, input);
        input[j] = orig;
        worst = worst.max(rel_err(analytic_input[j], (up - down) / (2.0 * STEP)));
        count += 1;
    }
    (worst, count)
}

/// Perturbs the analytic gradient to emulate a broken backward pass.
fn corrupt(grads: &mut [f64], fault: bool) {
    if fault {
        for g in grads.iter_mut() {
            *g = *g * 1.01 + 1e-3;
        }
    }
}

fn check_dense(seed: u64, fault: bool) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = Dense::new(6, 5, &mut rng);
    let mut x = random_vec(&mut rng, 6);
    let proj = random_vec(&mut rng, 5);
    let y = layer.forward(&x).expect("shape");
    let _ = y;
    layer.zero_grad();
    let mut dx = layer.backward(&x, &proj);
    let mut gp = layer.flat_grads();
    corrupt(&mut gp, fault);
    corrupt(&mut dx, fault);
    compare(&mut layer, &mut x, |l, x| dot(&l.forward(x).expect("shape"), &proj), &gp, &dx)
}

fn check_conv(seed: u64, fault: bool) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
    let shape = [2usize, 7, 6];
    let mut x = random_vec(&mut rng, shape.iter().product());
    let (oh, ow) = layer.output_size(7, 6);
    let proj = random_vec(&mut rng, 3 * oh * ow);
    let xt = Tensor::new(&shape, x.clone()).expect("shape");
    layer.zero_grad();
    let dy = Tensor::new(&[3, oh, ow], proj.clone()).expect("shape");
    let mut dx = layer.backward(&xt, &dy, true).expect("input grad").data;
    let mut gp = layer.flat_grads();
    corrupt(&mut gp, fault);
    corrupt(&mut dx, fault);
    let loss = |l: &Conv2d, x: &[f64]| {
        let t = Tensor::new(&shape, x.to_vec()).expect("shape");
        dot(&l.forward(&t).expect("shape").data, &proj)
    };
    compare(&mut layer, &mut x, loss, &gp, &dx)
}

fn check_rnn_step(seed: u64, fault: bool) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cell = RnnCell::new(3, 6, &mut rng);
    // input vector packs [h_prev, o]
    let mut x = random_vec(&mut rng, 9);
    let proj = random_vec(&mut rng, 6);
    let h = cell.step(&x[..6], &x[6..]).expect("shape");
    cell.zero_grad();
    let (dh_prev, d_o) = cell.backward(&x[..6], &x[6..], &h, &proj);
    let mut dx: Vec<f64> = dh_prev.into_iter().chain(d_o).collect();
    let mut gp = cell.flat_grads();
    corrupt(&mut gp, fault);
    corrupt(&mut dx, fault);
    compare(&mut cell, &mut x, |c, x| dot(&c.step(&x[..6], &x[6..]).expect("shape"), &proj), &gp, &dx)
}

fn check_rnn_bptt(seed: u64, fault: bool) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nh, no, steps) = (5, 3, BPTT_STEPS);
    let mut cell = RnnCell::new(no, nh, &mut rng);
    // input packs [h0, o_1, ..., o_T]
    let mut x = random_vec(&mut rng, nh + no * steps);
    let projs: Vec<Vec<f64>> = (0..steps).map(|_| random_vec(&mut rng, nh)).collect();
    let loss = |c: &RnnCell, x: &[f64]| {
        let mut h = x[..nh].to_vec();
        let mut total = 0.0;
        for t in 0..steps {
            h = c.step(&h, &x[nh + t * no..nh + (t + 1) * no]).expect("shape");
            total += dot(&h, &projs[t]);
        }
        total
    };
    let mut hs = vec![x[..nh].to_vec()];
    for t in 0..steps {
        let h = cell.step(&hs[t], &x[nh + t * no..nh + (t + 1) * no]).expect("shape");
        hs.push(h);
    }
    cell.zero_grad();
    let mut dx = vec![0.0; x.len()];
    let mut carry = vec![0.0; nh];
    for t in (0..steps).rev() {
        let dh: Vec<f64> = carry.iter().zip(&projs[t]).map(|(a, b)| a + b).collect();
        let o = &x[nh + t * no..nh + (t + 1) * no];
        let (dh_prev, d_o) = cell.backward(&hs[t], o, &hs[t + 1], &dh);
        dx[nh + t * no..nh + (t + 1) * no].copy_from_slice(&d_o);
        carry = dh_prev;
    }
    dx[..nh].copy_from_slice(&carry);
    let mut gp = cell.flat_grads();
    corrupt(&mut gp, fault);
    corrupt(&mut dx, fault);
    compare(&mut cell, &mut x, loss, &gp, &dx)
}

fn check_attention(seed: u64, fault: bool, channel: bool) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 4;
    let mut layer = SpatialAttention::new(channel.then_some((c, 2)), &mut rng);
    let shape = [c, 9, 8];
    let mut x = random_vec(&mut rng, shape.iter().product());
    let proj = random_vec(&mut rng, x.len());
    let loss = |l: &SpatialAttention, x: &[f64]| {
        let t = Tensor::new(&shape, x.to_vec()).expect("shape");
        dot(&l.forward(&t).expect("shape").attended.data, &proj)
    };
    let cache = layer.forward(&Tensor::new(&shape, x.clone()).expect("shape")).expect("shape");
    layer.zero_grad();
    let mut dx = layer.backward(&cache, &Tensor::new(&shape, proj.clone()).expect("shape")).data;
    let mut gp = layer.flat_grads();
    corrupt(&mut gp, fault);
    corrupt(&mut dx, fault);
    compare(&mut layer, &mut x, loss, &gp, &dx)
}

fn check_fusion(seed: u64, fault: bool) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (flat, kin) = (12, 3);
    let mut layer = Fusion::new(flat, kin, 6, 4, 5, &mut rng);
    let mut x = random_vec(&mut rng, flat + kin);
    let proj = random_vec(&mut rng, 5);
    let loss = |l: &Fusion, x: &[f64]| dot(&l.forward(&x[..flat], &x[flat..]).expect("shape").z, &proj);
    let cache = layer.forward(&x[..flat], &x[flat..]).expect("shape");
    layer.zero_grad();
    let (d_flat, d_kin) = layer.backward(&cache, &proj);
    let mut dx: Vec<f64> = d_flat.into_iter().chain(d_kin).collect();
    let mut gp = layer.flat_grads();
    corrupt(&mut gp, fault);
    corrupt(&mut dx, fault);
    compare(&mut layer, &mut x, loss, &gp, &dx)
}

/// Worst relative error of one layer kind on one seed, and the number of
/// gradient entries compared.
pub fn check_layer(kind: LayerKind, seed: u64, fault: bool) -> (f64, usize) {
    match kind {
        LayerKind::Dense => check_dense(seed, fault),
        LayerKind::Conv => check_conv(seed, fault),
        LayerKind::RnnStep => check_rnn_step(seed, fault),
        LayerKind::RnnBptt => check_rnn_bptt(seed, fault),
        LayerKind::SpatialAttention => check_attention(seed, fault, false),
        LayerKind::ChannelAttention => check_attention(seed, fault, true),
        LayerKind::Fusion => check_fusion(seed, fault),
    }
}

/// Runs every layer over `seeds` seeds. `fault` corrupts one layer's
/// analytic gradients so the failure path can be exercised.
pub fn run_suite(seeds: usize, fault: Option<LayerKind>) -> Vec<LayerReport> {
    LayerKind::ALL
        .into_iter()
        .map(|layer| {
            let mut max_rel_err: f64 = 0.0;
            let mut checked_entries = 0;
            for seed in 0..seeds as u64 {
                let (err, n) = check_layer(layer, seed, fault == Some(layer));
                max_rel_err = max_rel_err.max(err);
                checked_entries += n;
            }
            let tolerance = layer.tolerance();
            LayerReport { layer, seeds, checked_entries, max_rel_err, tolerance, passed: max_rel_err < tolerance }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes() {
        for r in run_suite(20, None) {
            eprintln!("{:?} max rel err {:.3e} over {} entries", r.layer, r.max_rel_err, r.checked_entries);
            assert!(r.passed, "{:?} failed with {:.3e}", r.layer, r.max_rel_err);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        for kind in LayerKind::ALL {
            let (err, _) = check_layer(kind, 3, true);
            assert!(err > kind.tolerance(), "{kind:?} fault went unnoticed");
        }
        let reports = run_suite(2, Some(LayerKind::Conv));
        assert!(reports.iter().all(|r| r.passed == (r.layer != LayerKind::Conv)));
    }

    #[test]
    fn names_round_trip() {
        for kind in LayerKind::ALL {
            assert_eq!(LayerKind::parse(kind.name()), Some(kind));
        }
        assert_eq!(LayerKind::parse("lstm"), None);
    }
}
