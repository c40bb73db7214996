use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_len, join, Module, NnError, Param};

/// Simple recurrent unit `h = tanh(W_h h_prev + W_o o + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnCell {
    pub hidden: usize,
    pub inputs: usize,
    pub w_h: Param,
    pub w_o: Param,
    pub b: Param,
}

impl RnnCell {
    /// Uniform ±1/√fan_in init with the recurrent matrix rescaled to a
    /// spectral norm of 0.9.
    pub fn new<R: Rng>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let fan_in = (inputs + hidden) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let mut cell = Self {
            hidden,
            inputs,
            w_h: Param::uniform(&[hidden, hidden], bound, rng),
            w_o: Param::uniform(&[hidden, inputs], bound, rng),
            b: Param::uniform(&[hidden], bound, rng),
        };
        let norm = spectral_norm(&cell.w_h.value.data, hidden);
        if norm > 0.0 {
            let scale = 0.9 / norm;
            cell.w_h.value.data.iter_mut().for_each(|v| *v *= scale);
        }
        cell
    }

    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            hidden,
            inputs,
            w_h: Param::zeros(&[hidden, hidden]),
            w_o: Param::zeros(&[hidden, inputs]),
            b: Param::zeros(&[hidden]),
        }
    }

    pub fn step(&self, h_prev: &[f64], o: &[f64]) -> Result<Vec<f64>, NnError> {
        check_len(&[self.hidden], h_prev.len())?;
        check_len(&[self.inputs], o.len())?;
        Ok(self.step_unchecked(h_prev, o))
    }

    pub(crate) fn step_unchecked(&self, h_prev: &[f64], o: &[f64]) -> Vec<f64> {
        let (nh, no) = (self.hidden, self.inputs);
        (0..nh)
            .map(|i| {
                let rh = &self.w_h.value.data[i * nh..(i + 1) * nh];
                let ro = &self.w_o.value.data[i * no..(i + 1) * no];
                let z = self.b.value.data[i]
                    + rh.iter().zip(h_prev).map(|(a, b)| a * b).sum::<f64>()
                    + ro.iter().zip(o).map(|(a, b)| a * b).sum::<f64>();
                z.tanh()
            })
            .collect()
    }

    /// Backward through one step given its output `h`; accumulates parameter
    /// gradients and returns `(dL/dh_prev, dL/do)`.
    pub fn backward(&mut self, h_prev: &[f64], o: &[f64], h: &[f64], dh: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (nh, no) = (self.hidden, self.inputs);
        let mut dh_prev = vec![0.0; nh];
        let mut d_o = vec![0.0; no];
        for i in 0..nh {
            let dz = dh[i] * (1.0 - h[i] * h[i]);
            if dz == 0.0 {
                continue;
            }
            self.b.grad[i] += dz;
            for j in 0..nh {
                self.w_h.grad[i * nh + j] += dz * h_prev[j];
                dh_prev[j] += dz * self.w_h.value.data[i * nh + j];
            }
            for j in 0..no {
                self.w_o.grad[i * no + j] += dz * o[j];
                d_o[j] += dz * self.w_o.value.data[i * no + j];
            }
        }
        (dh_prev, d_o)
    }
}

/// Largest singular value by power iteration on `WᵀW`.
fn spectral_norm(w: &[f64], n: usize) -> f64 {
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut sigma = 0.0;
    for _ in 0..50 {
        let wv: Vec<f64> = (0..n).map(|i| (0..n).map(|j| w[i * n + j] * v[j]).sum()).collect();
        let wtwv: Vec<f64> = (0..n).map(|j| (0..n).map(|i| w[i * n + j] * wv[i]).sum()).collect();
        let norm = wtwv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = wtwv.iter().map(|x| x / norm).collect();
        sigma = norm.sqrt();
    }
    sigma
}

impl Module for RnnCell {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "w_h"), &self.w_h));
        out.push((join(prefix, "w_o"), &self.w_o));
        out.push((join(prefix, "b"), &self.b));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.w_h);
        out.push(&mut self.w_o);
        out.push(&mut self.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_cell_gives_zero_state() {
        let c = RnnCell::zeros(3, 4);
        assert_eq!(c.step(&[0.3; 4], &[1.0, -1.0, 2.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn identity_input_weights() {
        let mut c = RnnCell::zeros(3, 3);
        for i in 0..3 {
            c.w_o.value.data[i * 3 + i] = 1.0;
        }
        let h = c.step(&[0.9, -0.2, 0.4], &[0.5; 3]).unwrap();
        for v in h {
            assert!((v - 0.5f64.tanh()).abs() < 1e-15);
            assert!((v - 0.46212).abs() < 1e-5);
        }
    }

    #[test]
    fn init_spectral_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = RnnCell::new(3, 32, &mut rng);
        let s = spectral_norm(&c.w_h.value.data, 32);
        assert!((s - 0.9).abs() < 1e-3, "spectral norm {s}");
    }

    #[test]
    fn dimension_mismatch() {
        let c = RnnCell::zeros(3, 4);
        assert!(c.step(&[0.0; 3], &[0.0; 3]).is_err());
        assert!(c.step(&[0.0; 4], &[0.0; 2]).is_err());
    }
}
