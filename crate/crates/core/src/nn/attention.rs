use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{join, sigmoid, Conv2d, Dense, Module, NnError, Param, Tensor};

/// Squeeze-style channel gate computed from spatially pooled descriptors
/// through a shared two-layer bottleneck.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelAttention {
    pub fc1: Dense,
    pub fc2: Dense,
}

impl ChannelAttention {
    pub fn new<R: Rng>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let mid = (channels / reduction.max(1)).max(1);
        Self { fc1: Dense::new(channels, mid, rng), fc2: Dense::new(mid, channels, rng) }
    }

    fn branch(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hidden: Vec<f64> = self.fc1.forward_unchecked(x).into_iter().map(|v| v.max(0.0)).collect();
        let out = self.fc2.forward_unchecked(&hidden);
        (hidden, out)
    }

    fn branch_backward(&mut self, x: &[f64], hidden: &[f64], d_out: &[f64]) -> Vec<f64> {
        let mut dh = self.fc2.backward(hidden, d_out);
        for (g, &h) in dh.iter_mut().zip(hidden) {
            if h <= 0.0 {
                *g = 0.0;
            }
        }
        self.fc1.backward(x, &dh)
    }
}

impl Module for ChannelAttention {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.fc1.collect(&join(prefix, "fc1"), out);
        self.fc2.collect(&join(prefix, "fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.fc1.collect_mut(out);
        self.fc2.collect_mut(out);
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ChannelCache {
    avg: Vec<f64>,
    max: Vec<f64>,
    argmax: Vec<usize>,
    avg_hidden: Vec<f64>,
    max_hidden: Vec<f64>,
    gate: Vec<f64>,
}

/// Spatial attention: a 7×7 convolution over the channel-wise average and
/// maximum maps, squashed by a sigmoid into a per-pixel mask that scales
/// every channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialAttention {
    pub conv: Conv2d,
    pub channel: Option<ChannelAttention>,
}

/// Everything the backward pass needs, plus the two outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache {
    input: Tensor,
    channel: Option<ChannelCache>,
    gated: Tensor,
    pooled: Tensor,
    argmax: Vec<usize>,
    /// `[H, W]` mask in (0, 1).
    pub mask: Tensor,
    /// `[C, H, W]` input scaled by the mask.
    pub attended: Tensor,
}

impl SpatialAttention {
    pub const KERNEL: usize = 7;

    pub fn new<R: Rng>(channel_attention: Option<(usize, usize)>, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(2, 1, Self::KERNEL, 1, Self::KERNEL / 2, rng),
            channel: channel_attention.map(|(c, r)| ChannelAttention::new(c, r, rng)),
        }
    }

    pub fn zeros() -> Self {
        Self { conv: Conv2d::zeros(2, 1, Self::KERNEL, 1, Self::KERNEL / 2), channel: None }
    }

    pub fn forward(&self, f: &Tensor) -> Result<AttentionCache, NnError> {
        let (c, h, w) = match f.shape.as_slice() {
            &[c, h, w] if c >= 1 => (c, h, w),
            other => return Err(NnError::Shape { expected: vec![0, 0, 0], got: other.to_vec() }),
        };
        let hw = h * w;
        let (channel, gated) = match &self.channel {
            None => (None, f.clone()),
            Some(ca) => {
                if ca.fc1.inputs != c {
                    return Err(NnError::Shape { expected: vec![ca.fc1.inputs, h, w], got: f.shape.clone() });
                }
                let mut avg = vec![0.0; c];
                let mut max = vec![f64::NEG_INFINITY; c];
                let mut argmax = vec![0; c];
                for ch in 0..c {
                    let plane = &f.data[ch * hw..(ch + 1) * hw];
                    avg[ch] = plane.iter().sum::<f64>() / hw as f64;
                    for (i, &v) in plane.iter().enumerate() {
                        if v > max[ch] {
                            max[ch] = v;
                            argmax[ch] = i;
                        }
                    }
                }
                let (avg_hidden, a) = ca.branch(&avg);
                let (max_hidden, b) = ca.branch(&max);
                let gate: Vec<f64> = a.iter().zip(&b).map(|(x, y)| sigmoid(x + y)).collect();
                let mut data = f.data.clone();
                for ch in 0..c {
                    data[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v *= gate[ch]);
                }
                let gated = Tensor { shape: f.shape.clone(), data };
                (Some(ChannelCache { avg, max, argmax, avg_hidden, max_hidden, gate }), gated)
            }
        };

        let mut pooled = vec![0.0; 2 * hw];
        let mut argmax = vec![0usize; hw];
        for i in 0..hw {
            let mut sum = 0.0;
            let mut best = f64::NEG_INFINITY;
            for ch in 0..c {
                let v = gated.data[ch * hw + i];
                sum += v;
                if v > best {
                    best = v;
                    argmax[i] = ch;
                }
            }
            pooled[i] = sum / c as f64;
            pooled[hw + i] = best;
        }
        let pooled = Tensor { shape: vec![2, h, w], data: pooled };
        let logits = self.conv.forward(&pooled)?;
        let mask: Vec<f64> = logits.data.iter().map(|&z| sigmoid(z)).collect();
        let mut attended = gated.data.clone();
        for ch in 0..c {
            for i in 0..hw {
                attended[ch * hw + i] *= mask[i];
            }
        }
        Ok(AttentionCache {
            input: f.clone(),
            channel,
            gated,
            pooled,
            argmax,
            mask: Tensor { shape: vec![h, w], data: mask },
            attended: Tensor { shape: f.shape.clone(), data: attended },
        })
    }

    /// Accumulates parameter gradients and returns `dL/dF`.
    pub fn backward(&mut self, cache: &AttentionCache, d_attended: &Tensor) -> Tensor {
        let (c, h, w) = (cache.input.shape[0], cache.input.shape[1], cache.input.shape[2]);
        let hw = h * w;
        let mask = &cache.mask.data;
        let mut d_gated = vec![0.0; c * hw];
        let mut d_logits = vec![0.0; hw];
        for i in 0..hw {
            let mut dm = 0.0;
            for ch in 0..c {
                let k = ch * hw + i;
                d_gated[k] = d_attended.data[k] * mask[i];
                dm += d_attended.data[k] * cache.gated.data[k];
            }
            d_logits[i] = dm * mask[i] * (1.0 - mask[i]);
        }
        let d_logits = Tensor { shape: vec![1, h, w], data: d_logits };
        let d_pooled = self.conv.backward(&cache.pooled, &d_logits, true).expect("input grad requested");
        for i in 0..hw {
            let da = d_pooled.data[i] / c as f64;
            for ch in 0..c {
                d_gated[ch * hw + i] += da;
            }
            d_gated[cache.argmax[i] * hw + i] += d_pooled.data[hw + i];
        }

        let (Some(ca), Some(cc)) = (self.channel.as_mut(), cache.channel.as_ref()) else {
            return Tensor { shape: cache.input.shape.clone(), data: d_gated };
        };
        let f = &cache.input.data;
        let mut d_f = vec![0.0; c * hw];
        let mut d_logit = vec![0.0; c];
        for ch in 0..c {
            let mut dg = 0.0;
            for i in 0..hw {
                let k = ch * hw + i;
                d_f[k] = d_gated[k] * cc.gate[ch];
                dg += d_gated[k] * f[k];
            }
            d_logit[ch] = dg * cc.gate[ch] * (1.0 - cc.gate[ch]);
        }
        let d_avg = ca.branch_backward(&cc.avg, &cc.avg_hidden, &d_logit);
        let d_max = ca.branch_backward(&cc.max, &cc.max_hidden, &d_logit);
        for ch in 0..c {
            let da = d_avg[ch] / hw as f64;
            for i in 0..hw {
                d_f[ch * hw + i] += da;
            }
            d_f[ch * hw + cc.argmax[ch]] += d_max[ch];
        }
        Tensor { shape: cache.input.shape.clone(), data: d_f }
    }
}

impl Module for SpatialAttention {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv.collect(&join(prefix, "conv"), out);
        self.channel.collect(&join(prefix, "channel"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.conv.collect_mut(out);
        self.channel.collect_mut(out);
    }
}
