use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_len, join, AttentionCache, Conv2d, Dense, Module, NnError, Param, SpatialAttention, Tensor};

fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

fn relu_mask(grad: &mut [f64], out: &[f64]) {
    for (g, &y) in grad.iter_mut().zip(out) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Late fusion of a flattened visual feature map with kinematics:
/// `z = relu(FC([relu(FC_v(f)), relu(FC_k(k))]))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fusion {
    pub visual: Dense,
    pub kinematic: Dense,
    pub fuse: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionCache {
    flat: Vec<f64>,
    kin: Vec<f64>,
    zv: Vec<f64>,
    zk: Vec<f64>,
    concat: Vec<f64>,
    pub z: Vec<f64>,
}

impl Fusion {
    pub fn new<R: Rng>(flat: usize, kin: usize, visual_dim: usize, kin_dim: usize, out: usize, rng: &mut R) -> Self {
        Self {
            visual: Dense::new(flat, visual_dim, rng),
            kinematic: Dense::new(kin, kin_dim, rng),
            fuse: Dense::new(visual_dim + kin_dim, out, rng),
        }
    }

    pub fn outputs(&self) -> usize {
        self.fuse.outputs
    }

    pub fn forward(&self, flat: &[f64], kin: &[f64]) -> Result<FusionCache, NnError> {
        check_len(&[self.visual.inputs], flat.len())?;
        check_len(&[self.kinematic.inputs], kin.len())?;
        let mut zv = self.visual.forward_unchecked(flat);
        relu_in_place(&mut zv);
        let mut zk = self.kinematic.forward_unchecked(kin);
        relu_in_place(&mut zk);
        let concat: Vec<f64> = zv.iter().chain(&zk).copied().collect();
        let mut z = self.fuse.forward_unchecked(&concat);
        relu_in_place(&mut z);
        Ok(FusionCache { flat: flat.to_vec(), kin: kin.to_vec(), zv, zk, concat, z })
    }

    /// Returns `(dL/dflat, dL/dkin)`.
    pub fn backward(&mut self, cache: &FusionCache, dz: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut g = dz.to_vec();
        relu_mask(&mut g, &cache.z);
        let d_concat = self.fuse.backward(&cache.concat, &g);
        let (dv, dk) = d_concat.split_at(cache.zv.len());
        let mut dv = dv.to_vec();
        relu_mask(&mut dv, &cache.zv);
        let mut dk = dk.to_vec();
        relu_mask(&mut dk, &cache.zk);
        let d_flat = self.visual.backward(&cache.flat, &dv);
        let d_kin = self.kinematic.backward(&cache.kin, &dk);
        (d_flat, d_kin)
    }
}

impl Module for Fusion {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.visual.collect(&join(prefix, "visual"), out);
        self.kinematic.collect(&join(prefix, "kinematic"), out);
        self.fuse.collect(&join(prefix, "fuse"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.visual.collect_mut(out);
        self.kinematic.collect_mut(out);
        self.fuse.collect_mut(out);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualEncoderConfig {
    pub image_channels: usize,
    pub image_size: usize,
    pub conv1_filters: usize,
    pub conv1_kernel: usize,
    pub conv2_filters: usize,
    pub conv2_kernel: usize,
    pub stride: usize,
    pub visual_dim: usize,
    pub kinematic_inputs: usize,
    pub kinematic_dim: usize,
    pub fusion_dim: usize,
    pub channel_attention: bool,
    pub channel_reduction: usize,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        Self {
            image_channels: 1,
            image_size: 64,
            conv1_filters: 8,
            conv1_kernel: 5,
            conv2_filters: 16,
            conv2_kernel: 3,
            stride: 2,
            visual_dim: 64,
            kinematic_inputs: 3,
            kinematic_dim: 16,
            fusion_dim: 64,
            channel_attention: false,
            channel_reduction: 4,
        }
    }
}

/// Conv stack → spatial attention → flatten → fusion with kinematics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub attention: SpatialAttention,
    pub fusion: Fusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCache {
    image: Tensor,
    c1: Tensor,
    c2: Tensor,
    attention: AttentionCache,
    fusion: FusionCache,
}

impl EncoderCache {
    pub fn output(&self) -> &[f64] {
        &self.fusion.z
    }

    pub fn attention_mask(&self) -> &Tensor {
        &self.attention.mask
    }
}

impl VisualEncoder {
    pub fn new<R: Rng>(cfg: &VisualEncoderConfig, rng: &mut R) -> Self {
        let conv1 = Conv2d::new(cfg.image_channels, cfg.conv1_filters, cfg.conv1_kernel, cfg.stride, 0, rng);
        let (h1, w1) = conv1.output_size(cfg.image_size, cfg.image_size);
        let conv2 = Conv2d::new(cfg.conv1_filters, cfg.conv2_filters, cfg.conv2_kernel, cfg.stride, 0, rng);
        let (h2, w2) = conv2.output_size(h1, w1);
        let channel = cfg.channel_attention.then_some((cfg.conv2_filters, cfg.channel_reduction));
        let attention = SpatialAttention::new(channel, rng);
        let fusion = Fusion::new(
            cfg.conv2_filters * h2 * w2,
            cfg.kinematic_inputs,
            cfg.visual_dim,
            cfg.kinematic_dim,
            cfg.fusion_dim,
            rng,
        );
        Self { conv1, conv2, attention, fusion }
    }

    pub fn outputs(&self) -> usize {
        self.fusion.outputs()
    }

    pub fn forward(&self, image: &Tensor, kin: &[f64]) -> Result<EncoderCache, NnError> {
        let mut c1 = self.conv1.forward(image)?;
        relu_in_place(&mut c1.data);
        let mut c2 = self.conv2.forward(&c1)?;
        relu_in_place(&mut c2.data);
        let attention = self.attention.forward(&c2)?;
        let fusion = self.fusion.forward(&attention.attended.data, kin)?;
        Ok(EncoderCache { image: image.clone(), c1, c2, attention, fusion })
    }

    /// Accumulates gradients of every encoder parameter.
    pub fn backward(&mut self, cache: &EncoderCache, dz: &[f64]) {
        let (d_flat, _) = self.fusion.backward(&cache.fusion, dz);
        let d_att = Tensor { shape: cache.c2.shape.clone(), data: d_flat };
        let mut d_c2 = self.attention.backward(&cache.attention, &d_att);
        relu_mask(&mut d_c2.data, &cache.c2.data);
        let mut d_c1 = self.conv2.backward(&cache.c1, &d_c2, true).expect("input grad requested");
        relu_mask(&mut d_c1.data, &cache.c1.data);
        self.conv1.backward(&cache.image, &d_c1, false);
    }
}

impl Module for VisualEncoder {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv1.collect(&join(prefix, "conv1"), out);
        self.conv2.collect(&join(prefix, "conv2"), out);
        self.attention.collect(&join(prefix, "attention"), out);
        self.fusion.collect(&join(prefix, "fusion"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.conv1.collect_mut(out);
        self.conv2.collect_mut(out);
        self.attention.collect_mut(out);
        self.fusion.collect_mut(out);
    }
}
