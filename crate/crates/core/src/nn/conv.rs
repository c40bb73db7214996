use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{dot, join, Module, NnError, Param, Tensor};

/// 2-D cross-correlation over `[C, H, W]` tensors with zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`
    pub w: Param,
    pub b: Param,
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            w: Param::uniform(&[out_channels, in_channels, kernel, kernel], bound, rng),
            b: Param::uniform(&[out_channels], bound, rng),
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            w: Param::zeros(&[out_channels, in_channels, kernel, kernel]),
            b: Param::zeros(&[out_channels]),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = |n: usize| (n + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (span(h), span(w))
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize), NnError> {
        match x.shape.as_slice() {
            &[c, h, w]
                if c == self.in_channels
                    && h + 2 * self.padding >= self.kernel
                    && w + 2 * self.padding >= self.kernel =>
            {
                Ok((h, w))
            }
            other => {
                Err(NnError::Shape { expected: vec![self.in_channels, self.kernel, self.kernel], got: other.to_vec() })
            }
        }
    }

    /// Unfolds `x` into a `[in·k·k, oh·ow]` patch matrix (zero where the
    /// kernel overhangs the padded border).
    fn im2col(&self, x: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let n = oh * ow;
        let mut cols = vec![0.0; self.in_channels * k * k * n];
        for ic in 0..self.in_channels {
            let input = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (y_lo, y_hi) = valid_range(oh, h, s, ky as isize - p as isize);
                for kx in 0..k {
                    let (x_lo, x_hi) = valid_range(ow, w, s, kx as isize - p as isize);
                    let row = &mut cols[((ic * k + ky) * k + kx) * n..][..n];
                    for oy in y_lo..y_hi {
                        let first = (oy * s + ky - p) * w + x_lo * s + kx - p;
                        for (j, ox) in (x_lo..x_hi).enumerate() {
                            row[oy * ow + ox] = input[first + j * s];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adds a patch-matrix gradient back onto the input positions it came from.
    fn col2im(&self, cols: &[f64], dx: &mut [f64], h: usize, w: usize, oh: usize, ow: usize) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let n = oh * ow;
        for ic in 0..self.in_channels {
            let grad = &mut dx[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (y_lo, y_hi) = valid_range(oh, h, s, ky as isize - p as isize);
                for kx in 0..k {
                    let (x_lo, x_hi) = valid_range(ow, w, s, kx as isize - p as isize);
                    let row = &cols[((ic * k + ky) * k + kx) * n..][..n];
                    for oy in y_lo..y_hi {
                        let first = (oy * s + ky - p) * w + x_lo * s + kx - p;
                        for (j, ox) in (x_lo..x_hi).enumerate() {
                            grad[first + j * s] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let (h, w) = self.check(x)?;
        let (oh, ow) = self.output_size(h, w);
        let n = oh * ow;
        let taps = self.in_channels * self.kernel * self.kernel;
        let cols = self.im2col(&x.data, h, w, oh, ow);
        let mut out = vec![0.0; self.out_channels * n];
        for (oc, plane) in out.chunks_exact_mut(n).enumerate() {
            plane.fill(self.b.value.data[oc]);
            let weights = &self.w.value.data[oc * taps..(oc + 1) * taps];
            for (wv, row) in weights.iter().zip(cols.chunks_exact(n)) {
                for (o, v) in plane.iter_mut().zip(row) {
                    *o += wv * v;
                }
            }
        }
        Ok(Tensor { shape: vec![self.out_channels, oh, ow], data: out })
    }

    /// Accumulates parameter gradients; returns `dL/dx` when requested.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, want_input_grad: bool) -> Option<Tensor> {
        let (h, w) = (x.shape[1], x.shape[2]);
        let (oh, ow) = (dy.shape[1], dy.shape[2]);
        let n = oh * ow;
        let taps = self.in_channels * self.kernel * self.kernel;
        let cols = self.im2col(&x.data, h, w, oh, ow);
        let mut d_cols = if want_input_grad { vec![0.0; cols.len()] } else { Vec::new() };
        for (oc, g) in dy.data.chunks_exact(n).enumerate() {
            self.b.grad[oc] += g.iter().sum::<f64>();
            let grads = &mut self.w.grad[oc * taps..(oc + 1) * taps];
            for (gw, row) in grads.iter_mut().zip(cols.chunks_exact(n)) {
                *gw += dot(g, row);
            }
            if want_input_grad {
                let weights = &self.w.value.data[oc * taps..(oc + 1) * taps];
                for (wv, d_row) in weights.iter().zip(d_cols.chunks_exact_mut(n)) {
                    for (d, gv) in d_row.iter_mut().zip(g) {
                        *d += wv * gv;
                    }
                }
            }
        }
        want_input_grad.then(|| {
            let mut dx = vec![0.0; x.len()];
            self.col2im(&d_cols, &mut dx, h, w, oh, ow);
            Tensor { shape: x.shape.clone(), data: dx }
        })
    }
}

/// Output indices `o` in `[lo, hi)` whose input `o·stride + offset` lies
/// inside `[0, n_in)`.
fn valid_range(n_out: usize, n_in: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 { ((-offset) + s - 1) / s } else { 0 };
    let last = n_in as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last / s) + 1).min(n_out as isize);
    (lo as usize, hi.max(lo) as usize)
}

impl Module for Conv2d {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "w"), &self.w));
        out.push((join(prefix, "b"), &self.b));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}
