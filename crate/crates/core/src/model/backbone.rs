//! Residual frame-wise CNN with temporal shift before every block.
//!
//! ```text
//! input [T×C0×H×W] → relu(stem conv)
//!   block l: z = conv_l(shift(x)) + proj_l(x);  F^l = relu(z)
//! embedding = fc((mean_{t,h,w} F^L − μ) ⊙ s)
//! ```
//! `μ` and `s` are per-channel statistics of the pooled features, estimated
//! from data by [`Backbone::fit_pool_norm`] rather than trained.
//! The block outputs `F^1..F^L` are the observation layers.

use ndarray::{Array1, Array4, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, Linear};
use super::shift::{temporal_shift, temporal_shift_adjoint};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub t: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stem_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub shift_fraction: f64,
    pub embedding_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            t: 8,
            in_channels: 1,
            height: 8,
            width: 8,
            stem_channels: 8,
            layers: vec![
                LayerSpec { channels: 8, stride: 1 },
                LayerSpec { channels: 16, stride: 2 },
                LayerSpec { channels: 16, stride: 1 },
                LayerSpec { channels: 32, stride: 1 },
            ],
            shift_fraction: 0.125,
            embedding_dim: 16,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("t, in_channels, height and width must be positive".into()));
        }
        if self.layers.is_empty() || self.stem_channels == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("backbone needs at least one layer and nonzero widths".into()));
        }
        if self.layers.iter().any(|l| l.channels == 0 || l.stride == 0) {
            return Err(Error::Config("layer channels and strides must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.shift_fraction) {
            return Err(Error::Config(format!(
                "shift_fraction {} outside [0, 0.5]",
                self.shift_fraction
            )));
        }
        Ok(())
    }

    /// `(C_l, H_l, W_l)` of every observation layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (self.height, self.width);
        self.layers
            .iter()
            .map(|l| {
                h = (h - 1) / l.stride + 1;
                w = (w - 1) / l.stride + 1;
                (l.channels, h, w)
            })
            .collect()
    }

    pub fn layer_names(&self) -> Vec<String> {
        (0..self.layers.len()).map(|l| format!("block{}", l + 1)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv: Conv2d,
    /// 1×1 projection when the block changes width or resolution.
    pub proj: Option<Conv2d>,
}

impl Block {
    fn zeros_like(&self) -> Self {
        Self {
            conv: self.conv.zeros_like(),
            proj: self.proj.as_ref().map(Conv2d::zeros_like),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: Conv2d,
    pub blocks: Vec<Block>,
    pub pool_norm: PoolNorm,
    pub fc: Linear,
}

/// Fixed per-channel standardization of the pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolNorm {
    pub mean: Array1<f64>,
    pub inv_std: Array1<f64>,
}

impl PoolNorm {
    pub const EPS: f64 = 1e-5;

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: Array1::zeros(channels),
            inv_std: Array1::ones(channels),
        }
    }

    fn apply(&self, pooled: &Array1<f64>) -> Array1<f64> {
        (pooled - &self.mean) * &self.inv_std
    }
}

/// Intermediate features of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    /// `F^l`, each `[T × C_l × H_l × W_l]`.
    pub layers: Vec<Array4<f64>>,
    pub embedding: Array1<f64>,
    /// Per-class scores in head registration order; empty without a head.
    pub scores: Array1<f64>,
}

impl FeatureStack {
    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(|v| v.is_finite()))
            && self.embedding.iter().all(|v| v.is_finite())
            && self.scores.iter().all(|v| v.is_finite())
    }
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array4<f64>,
    stem_pre: Array4<f64>,
    block_inputs: Vec<Array4<f64>>,
    shifted: Vec<Array4<f64>>,
    pre_act: Vec<Array4<f64>>,
    pooled: Array1<f64>,
}

impl ForwardCache {
    /// Pooled features as fed to `fc`: raw after [`Backbone::forward_trunk`],
    /// standardized after [`Backbone::forward`].
    pub fn pooled(&self) -> &Array1<f64> {
        &self.pooled
    }
}

/// Upstream gradients injected into a backward pass. Missing layer entries
/// are treated as zero.
#[derive(Debug, Clone)]
pub struct FeatureGrads {
    pub layers: Vec<Option<Array4<f64>>>,
    pub embedding: Array1<f64>,
}

impl FeatureGrads {
    pub fn embedding_only(embedding: Array1<f64>, n_layers: usize) -> Self {
        Self {
            layers: vec![None; n_layers],
            embedding,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackboneBackward {
    pub params: Backbone,
    /// Total derivative of the objective w.r.t. each `F^l`.
    pub layers: Vec<Array4<f64>>,
    pub input: Array4<f64>,
}

impl Backbone {
    pub fn new<R: Rng>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem = Conv2d::new(config.in_channels, config.stem_channels, 3, 1, rng);
        let mut blocks = Vec::with_capacity(config.layers.len());
        let mut prev = config.stem_channels;
        for spec in &config.layers {
            let conv = Conv2d::new(prev, spec.channels, 3, spec.stride, rng);
            let proj = (prev != spec.channels || spec.stride != 1)
                .then(|| Conv2d::new(prev, spec.channels, 1, spec.stride, rng));
            blocks.push(Block { conv, proj });
            prev = spec.channels;
        }
        let fc = Linear::new(prev, config.embedding_dim, rng);
        Ok(Self {
            config,
            stem,
            blocks,
            pool_norm: PoolNorm::identity(prev),
            fc,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            stem: self.stem.zeros_like(),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            pool_norm: self.pool_norm.clone(),
            fc: self.fc.zeros_like(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn check_input(&self, frames: ArrayView4<f64>) -> Result<()> {
        let c = &self.config;
        let want = (c.t, c.in_channels, c.height, c.width);
        if frames.dim() != want {
            return Err(Error::Shape(format!(
                "model expects input [T×C×H×W] = {want:?}, got {:?}",
                frames.dim()
            )));
        }
        Ok(())
    }

    /// Evaluation-mode pass: pooled features are standardized with the
    /// stored statistics.
    pub fn forward(&self, frames: ArrayView4<f64>) -> Result<(FeatureStack, ForwardCache)> {
        let (layers, mut cache) = self.forward_trunk(frames)?;
        cache.pooled = self.pool_norm.apply(&cache.pooled);
        let embedding = self.fc.forward(cache.pooled.view());
        let stack = FeatureStack {
            layers,
            embedding,
            scores: Array1::zeros(0),
        };
        Ok((stack, cache))
    }

    /// Everything up to the raw pooled features, which are left in
    /// [`ForwardCache::pooled`].
    pub fn forward_trunk(&self, frames: ArrayView4<f64>) -> Result<(Vec<Array4<f64>>, ForwardCache)> {
        self.check_input(frames)?;
        let stem_pre = self.stem.forward(frames);
        let mut x = stem_pre.mapv(relu);
        let n = self.blocks.len();
        let (mut block_inputs, mut shifted, mut pre_act, mut layers) =
            (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for block in &self.blocks {
            let s = temporal_shift(x.view(), self.config.shift_fraction);
            let mut z = block.conv.forward(s.view());
            match &block.proj {
                Some(p) => z += &p.forward(x.view()),
                None => z += &x,
            }
            let out = z.mapv(relu);
            block_inputs.push(std::mem::replace(&mut x, out.clone()));
            shifted.push(s);
            pre_act.push(z);
            layers.push(out);
        }
        let cache = ForwardCache {
            input: frames.to_owned(),
            stem_pre,
            block_inputs,
            shifted,
            pre_act,
            pooled: global_mean(&x),
        };
        Ok((layers, cache))
    }

    /// Re-runs the network downstream of observation layer `layer` with
    /// `features` substituted for `F^layer`; returns the embedding.
    pub fn forward_from_layer(&self, layer: usize, features: ArrayView4<f64>) -> Result<Array1<f64>> {
        if layer >= self.blocks.len() {
            return Err(Error::OutOfRange(format!("layer {layer} of {}", self.blocks.len())));
        }
        let mut x = features.to_owned();
        for block in &self.blocks[layer + 1..] {
            let s = temporal_shift(x.view(), self.config.shift_fraction);
            let mut z = block.conv.forward(s.view());
            match &block.proj {
                Some(p) => z += &p.forward(x.view()),
                None => z += &x,
            }
            x = z.mapv(relu);
        }
        Ok(self.fc.forward(self.pool_norm.apply(&global_mean(&x)).view()))
    }

    pub fn backward(&self, cache: &ForwardCache, upstream: &FeatureGrads) -> Result<BackboneBackward> {
        let n = self.blocks.len();
        if upstream.layers.len() != n {
            return Err(Error::Shape(format!(
                "expected gradients for {n} layers, got {}",
                upstream.layers.len()
            )));
        }
        let mut grads = self.zeros_like();
        let g_pooled = self.fc.backward(cache.pooled.view(), upstream.embedding.view(), &mut grads.fc)
            * &self.pool_norm.inv_std;
        let layers = upstream.layers.as_slice();
        let (layer_grads, input) = self.backward_trunk_into(cache, &g_pooled, layers, &mut grads)?;
        Ok(BackboneBackward {
            params: grads,
            layers: layer_grads,
            input,
        })
    }

    /// Backward pass from a gradient w.r.t. the raw pooled features of a
    /// [`Backbone::forward_trunk`] cache. The returned `fc` gradients are
    /// zero.
    pub fn backward_trunk(
        &self,
        cache: &ForwardCache,
        g_pooled: &Array1<f64>,
        layers: &[Option<Array4<f64>>],
    ) -> Result<BackboneBackward> {
        let mut grads = self.zeros_like();
        let (layer_grads, input) = self.backward_trunk_into(cache, g_pooled, layers, &mut grads)?;
        Ok(BackboneBackward {
            params: grads,
            layers: layer_grads,
            input,
        })
    }

    fn backward_trunk_into(
        &self,
        cache: &ForwardCache,
        g_pooled: &Array1<f64>,
        upstream_layers: &[Option<Array4<f64>>],
        grads: &mut Backbone,
    ) -> Result<(Vec<Array4<f64>>, Array4<f64>)> {
        let n = self.blocks.len();
        if upstream_layers.len() != n {
            return Err(Error::Shape(format!(
                "expected gradients for {n} layers, got {}",
                upstream_layers.len()
            )));
        }

        let last = &cache.pre_act[n - 1];
        let (t, _, h, w) = last.dim();
        let scale = 1.0 / (t * h * w) as f64;
        let mut g = Array4::from_shape_fn(last.raw_dim(), |(_, c, _, _)| g_pooled[c] * scale);

        let mut layer_grads = vec![Array4::zeros((0, 0, 0, 0)); n];
        for l in (0..n).rev() {
            if let Some(extra) = &upstream_layers[l] {
                if extra.dim() != g.dim() {
                    return Err(Error::Shape(format!(
                        "gradient for layer {l} has shape {:?}, expected {:?}",
                        extra.dim(),
                        g.dim()
                    )));
                }
                g += extra;
            }
            layer_grads[l] = g.clone();
            let block = &self.blocks[l];
            let mut gz = g;
            gz.zip_mut_with(&cache.pre_act[l], |gv, &z| {
                if z <= 0.0 {
                    *gv = 0.0
                }
            });
            let gs = block
                .conv
                .backward(cache.shifted[l].view(), gz.view(), &mut grads.blocks[l].conv);
            let mut gx = temporal_shift_adjoint(gs.view(), self.config.shift_fraction);
            match &block.proj {
                Some(p) => {
                    let gp = grads.blocks[l].proj.as_mut().expect("matching structure");
                    gx += &p.backward(cache.block_inputs[l].view(), gz.view(), gp);
                }
                None => gx += &gz,
            }
            g = gx;
        }
        g.zip_mut_with(&cache.stem_pre, |gv, &z| {
            if z <= 0.0 {
                *gv = 0.0
            }
        });
        let input = self.stem.backward(cache.input.view(), g.view(), &mut grads.stem);
        Ok((layer_grads, input))
    }

    /// Sets the pooled-feature statistics to the per-channel mean and
    /// inverse standard deviation over `inputs`.
    pub fn fit_pool_norm<'a, I>(&mut self, inputs: I) -> Result<()>
    where
        I: IntoIterator<Item = ArrayView4<'a, f64>>,
    {
        let channels = self.pool_norm.mean.len();
        let (mut sum, mut sq, mut n) = (Array1::<f64>::zeros(channels), Array1::<f64>::zeros(channels), 0usize);
        for x in inputs {
            let pooled = self.forward_trunk(x)?.1.pooled;
            sq += &(&pooled * &pooled);
            sum += &pooled;
            n += 1;
        }
        if n == 0 {
            return Err(Error::Empty("no inputs for pooled-feature statistics".into()));
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - &mean * &mean).mapv(|v| v.max(0.0));
        self.pool_norm = PoolNorm {
            inv_std: var.mapv(|v| 1.0 / (v + PoolNorm::EPS).sqrt()),
            mean,
        };
        Ok(())
    }

    /// Visits every parameter tensor with a stable name and its shape.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let mut conv = |name: &str, c: &Conv2d| {
            f(&format!("{name}.weight"), c.weight.shape(), c.weight.as_slice().expect("contiguous"));
            f(&format!("{name}.bias"), c.bias.shape(), c.bias.as_slice().expect("contiguous"));
        };
        conv("stem", &self.stem);
        for (i, b) in self.blocks.iter().enumerate() {
            conv(&format!("block{}.conv", i + 1), &b.conv);
            if let Some(p) = &b.proj {
                conv(&format!("block{}.proj", i + 1), p);
            }
        }
        f("fc.weight", self.fc.weight.shape(), self.fc.weight.as_slice().expect("contiguous"));
        f("fc.bias", self.fc.bias.shape(), self.fc.bias.as_slice().expect("contiguous"));
    }

    /// Mutable counterpart of [`Backbone::visit`], same order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        let mut conv = |name: &str, c: &mut Conv2d| {
            f(&format!("{name}.weight"), c.weight.as_slice_mut().expect("contiguous"));
            f(&format!("{name}.bias"), c.bias.as_slice_mut().expect("contiguous"));
        };
        conv("stem", &mut self.stem);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            conv(&format!("block{}.conv", i + 1), &mut b.conv);
            if let Some(p) = &mut b.proj {
                conv(&format!("block{}.proj", i + 1), p);
            }
        }
        f("fc.weight", self.fc.weight.as_slice_mut().expect("contiguous"));
        f("fc.bias", self.fc.bias.as_slice_mut().expect("contiguous"));
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn global_mean(x: &Array4<f64>) -> Array1<f64> {
    let (t, c, h, w) = x.dim();
    let mut out = x.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
    out /= (t * h * w) as f64;
    debug_assert_eq!(out.len(), c);
    out
}
