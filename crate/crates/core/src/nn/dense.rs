use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_len, dot, join, Activation, Module, NnError, Param};

/// Affine layer `y = W x + b` with `W` stored row-major as `[out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Param,
    pub b: Param,
}

impl Dense {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            w: Param::uniform(&[outputs, inputs], bound, rng),
            b: Param::uniform(&[outputs], bound, rng),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, w: Param::zeros(&[outputs, inputs]), b: Param::zeros(&[outputs]) }
    }

    pub fn identity(n: usize) -> Self {
        let mut d = Self::zeros(n, n);
        for i in 0..n {
            d.w.value.data[i * n + i] = 1.0;
        }
        d
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        check_len(&[self.inputs], x.len())?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let w = &self.w.value.data;
        (0..self.outputs)
            .map(|o| {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                self.b.value.data[o] + dot(row, x)
            })
            .collect()
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let n = self.inputs;
        let mut dx = vec![0.0; n];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.b.grad[o] += g;
            let row = &self.w.value.data[o * n..(o + 1) * n];
            let grow = &mut self.w.grad[o * n..(o + 1) * n];
            for i in 0..n {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }

    /// `dL/dx` only; parameter gradients are left untouched.
    pub fn input_grad(&self, dy: &[f64]) -> Vec<f64> {
        let n = self.inputs;
        let mut dx = vec![0.0; n];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.w.value.data[o * n..(o + 1) * n];
            for i in 0..n {
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

impl Module for Dense {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "w"), &self.w));
        out.push((join(prefix, "b"), &self.b));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

/// Stack of dense layers with one activation between hidden layers and
/// another on the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Post-activation values of every layer, input first.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    pub activations: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds the input at least")
    }
}

impl Mlp {
    /// `sizes` lists the width of every layer boundary, input first.
    pub fn new<R: Rng>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        let layers = sizes.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect();
        Self { layers, hidden, output }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<MlpCache, NnError> {
        check_len(&[self.inputs()], x.len())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let act = self.activation(i);
            let mut y = layer.forward_unchecked(activations.last().expect("non-empty"));
            y.iter_mut().for_each(|v| *v = act.apply(*v));
            activations.push(y);
        }
        Ok(MlpCache { activations })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward_cached(x)?.activations.pop().expect("non-empty"))
    }

    /// Accumulates parameter gradients for `dL/d(output) = dy`; returns `dL/dx`.
    pub fn backward(&mut self, cache: &MlpCache, dy: &[f64]) -> Vec<f64> {
        let mut grad = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            let act = self.activation(i);
            for (g, &y) in grad.iter_mut().zip(&cache.activations[i + 1]) {
                *g *= act.derivative_from_output(y);
            }
            grad = self.layers[i].backward(&cache.activations[i], &grad);
        }
        grad
    }

    /// `dL/dx` without touching parameter gradients.
    pub fn input_grad(&self, cache: &MlpCache, dy: &[f64]) -> Vec<f64> {
        let mut grad = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            let act = self.activation(i);
            for (g, &y) in grad.iter_mut().zip(&cache.activations[i + 1]) {
                *g *= act.derivative_from_output(y);
            }
            grad = self.layers[i].input_grad(&grad);
        }
        grad
    }
}

impl Module for Mlp {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&join(prefix, &format!("layer{i}")), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for l in self.layers.iter_mut() {
            l.collect_mut(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input() {
        let d = Dense::identity(4);
        let x = [0.1, -2.0, 3.5, 0.0];
        assert_eq!(d.forward(&x).unwrap(), x.to_vec());
        assert!(d.forward(&[1.0]).is_err());
    }

    #[test]
    fn input_grad_matches_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Mlp::new(&[3, 8, 2], Activation::Tanh, Activation::Identity, &mut rng);
        let cache = m.forward_cached(&[0.2, -0.4, 0.9]).unwrap();
        let a = m.input_grad(&cache, &[1.0, -0.5]);
        let b = m.backward(&cache, &[1.0, -0.5]);
        assert_eq!(a, b);
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mlp::new(&[5, 16, 16, 1], Activation::Relu, Activation::Identity, &mut rng);
        let x = [0.3, 0.1, -0.2, 0.7, 1.0];
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
    }
}
