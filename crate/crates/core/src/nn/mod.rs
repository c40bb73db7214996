//! A small dense-tensor network engine with hand-written backpropagation.
//!
//! Layers cache nothing internally: forward passes return whatever the
//! matching backward pass needs, which keeps forwards pure and lets one
//! layer be evaluated on many samples before gradients are accumulated.

mod attention;
mod checkpoint;
mod conv;
mod dense;
mod encoder;
pub mod gradcheck;
mod optim;
mod rnn;

pub use attention::{AttentionCache, ChannelAttention, SpatialAttention};
pub use checkpoint::{Checkpoint, CheckpointError, NamedTensor};
pub use conv::Conv2d;
pub use dense::{Dense, Mlp, MlpCache};
pub use encoder::{EncoderCache, Fusion, FusionCache, VisualEncoder, VisualEncoderConfig};
pub use optim::{soft_update, AdamState};
pub use rnn::RnnCell;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub(crate) fn check_len(what: &[usize], got: usize) -> Result<(), NnError> {
    let expected: usize = what.iter().product();
    if expected != got {
        return Err(NnError::Shape { expected: what.to_vec(), got: vec![got] });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        check_len(shape, data.len())?;
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let value = Tensor::zeros(shape);
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        if bound > 0.0 {
            for v in p.value.data.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Dot product with four independent partial sums.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut chunks_a = a.chunks_exact(4);
    let mut chunks_b = b.chunks_exact(4);
    for (x, y) in (&mut chunks_a).zip(&mut chunks_b) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = chunks_a.remainder().iter().zip(chunks_b.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns parameters.
///
/// `collect` and `collect_mut` must visit parameters in the same order; that
/// order is what optimizers, soft updates and checkpoints rely on.
pub trait Module {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>);

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.collect_mut(&mut out);
        out
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// All parameter values concatenated in visiting order.
    fn flat_values(&self) -> Vec<f64> {
        self.named_params().iter().flat_map(|(_, p)| p.value.data.iter().copied()).collect()
    }

    /// All gradients concatenated in visiting order.
    fn flat_grads(&self) -> Vec<f64> {
        self.named_params().iter().flat_map(|(_, p)| p.grad.iter().copied()).collect()
    }

    fn all_finite(&self) -> bool {
        self.named_params().iter().all(|(_, p)| p.value.is_finite())
    }
}

impl<M: Module> Module for Option<M> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        if let Some(m) = self {
            m.collect(prefix, out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        if let Some(m) = self {
            m.collect_mut(out);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}
