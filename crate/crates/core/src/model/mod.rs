//! Temporal backbone plus classifier head.

pub mod backbone;
pub mod head;
pub mod layers;
pub mod shift;

use std::path::Path;

use ndarray::{Array1, Array2, Array4, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneConfig, FeatureGrads, FeatureStack, ForwardCache, LayerSpec, PoolNorm};
pub use head::{nca_loss, HeadConfig, HeadGrads, LscHead};
pub use shift::temporal_shift;

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::task_data::ClassId;

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalModel {
    pub backbone: Backbone,
    pub head: LscHead,
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    backbone: ForwardCache,
    scores: head::ScoreCache,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub backbone: Backbone,
    pub head: HeadGrads,
}

impl ModelGrads {
    pub fn add_assign(&mut self, other: &ModelGrads) {
        let mut theirs = Vec::new();
        other.backbone.visit(&mut |_, _, v| theirs.push(v.to_vec()));
        let mut i = 0;
        self.backbone.visit_mut(&mut |_, v| {
            v.iter_mut().zip(&theirs[i]).for_each(|(a, b)| *a += b);
            i += 1;
        });
        for (a, b) in self.head.proxies.iter_mut().zip(&other.head.proxies) {
            *a += b;
        }
        self.head.eta += other.head.eta;
    }

    /// Euclidean norm over every parameter gradient, η included.
    pub fn norm(&self) -> f64 {
        let mut sq = 0.0;
        self.backbone.visit(&mut |_, _, v| sq += v.iter().map(|x| x * x).sum::<f64>());
        for p in &self.head.proxies {
            sq += p.iter().map(|x| x * x).sum::<f64>();
        }
        (sq + self.head.eta * self.head.eta).sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.backbone.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x *= factor));
        for p in &mut self.head.proxies {
            *p *= factor;
        }
        self.head.eta *= factor;
    }
}

/// Result of a backward pass through the whole model.
#[derive(Debug, Clone)]
pub struct ModelBackward {
    pub grads: ModelGrads,
    pub layers: Vec<Array4<f64>>,
    pub input: Array4<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    backbone: BackboneConfig,
    classes: Vec<ClassId>,
    n_proxy: usize,
    eta: f64,
    delta: f64,
}

impl TemporalModel {
    pub fn new<R: Rng>(config: BackboneConfig, head: &HeadConfig, rng: &mut R) -> Result<Self> {
        let backbone = Backbone::new(config, rng)?;
        let head = LscHead::new(backbone.config.embedding_dim, head)?;
        Ok(Self { backbone, head })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    pub fn forward(&self, frames: ArrayView4<f64>) -> Result<(FeatureStack, ModelCache)> {
        let (mut stack, backbone) = self.backbone.forward(frames)?;
        let (scores, score_cache) = self.head.scores(stack.embedding.view())?;
        stack.scores = scores;
        Ok((
            stack,
            ModelCache {
                backbone,
                scores: score_cache,
            },
        ))
    }

    /// Evaluation-mode forward pass without retaining a cache.
    pub fn features(&self, frames: ArrayView4<f64>) -> Result<FeatureStack> {
        Ok(self.forward(frames)?.0)
    }

    pub fn embed(&self, frames: ArrayView4<f64>) -> Result<Array1<f64>> {
        Ok(self.backbone.forward(frames)?.0.embedding)
    }

    /// Backpropagates gradients w.r.t. the scores, the embedding and the
    /// observation layers.
    pub fn backward(
        &self,
        stack: &FeatureStack,
        cache: &ModelCache,
        grad_scores: &Array1<f64>,
        mut upstream: FeatureGrads,
    ) -> Result<ModelBackward> {
        let mut head_grads = self.head.zero_grads();
        let g_emb = self
            .head
            .scores_backward(stack.embedding.view(), &cache.scores, grad_scores.view(), &mut head_grads);
        upstream.embedding += &g_emb;
        let bb = self.backbone.backward(&cache.backbone, &upstream)?;
        Ok(ModelBackward {
            grads: ModelGrads {
                backbone: bb.params,
                head: head_grads,
            },
            layers: bb.layers,
            input: bb.input,
        })
    }

    pub fn label_index(&self, label: ClassId) -> Result<usize> {
        self.head.index_of(label).ok_or(Error::UnknownClass(label))
    }

    /// NCA classification loss for one clip together with its gradient
    /// w.r.t. every observation layer, and the parameter gradients.
    pub fn classification_gradients(&self, frames: ArrayView4<f64>, label: ClassId) -> Result<(f64, ModelBackward)> {
        let (stack, cache) = self.forward(frames)?;
        let y = self.label_index(label)?;
        let (loss, g_scores, g_eta) = nca_loss(stack.scores.view(), y, self.head.eta, self.head.delta)?;
        let upstream = FeatureGrads::embedding_only(Array1::zeros(self.head.dim), self.backbone.n_layers());
        let mut back = self.backward(&stack, &cache, &g_scores, upstream)?;
        back.grads.head.eta += g_eta;
        Ok((loss, back))
    }

    /// Classification loss with `features` substituted for `F^layer`.
    pub fn classification_loss_from_layer(&self, layer: usize, features: ArrayView4<f64>, label: ClassId) -> Result<f64> {
        let embedding = self.backbone.forward_from_layer(layer, features)?;
        let (scores, _) = self.head.scores(embedding.view())?;
        Ok(nca_loss(scores.view(), self.label_index(label)?, self.head.eta, self.head.delta)?.0)
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            backbone: self.backbone.zeros_like(),
            head: self.head.zero_grads(),
        }
    }

    /// Order-sensitive digest of the backbone parameters.
    pub fn backbone_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let norm = &self.backbone.pool_norm;
        let mut fold = |name: &str, v: &[f64]| {
            for b in name.bytes().map(u64::from).chain(v.iter().map(|x| x.to_bits())) {
                h = (h ^ b).wrapping_mul(0x0100_0000_01b3);
            }
        };
        self.backbone.visit(&mut |name, _, v| fold(name, v));
        fold("pool_norm.mean", norm.mean.as_slice().expect("contiguous"));
        fold("pool_norm.inv_std", norm.inv_std.as_slice().expect("contiguous"));
        h
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let meta = CheckpointMeta {
            backbone: self.backbone.config.clone(),
            classes: self.head.classes.clone(),
            n_proxy: self.head.n_proxy,
            eta: self.head.eta,
            delta: self.head.delta,
        };
        let mut archive = TensorArchive::new(serde_json::to_value(meta)?);
        let mut result = Ok(());
        self.backbone.visit(&mut |name, shape, v| {
            if result.is_ok() {
                result = archive.insert(name, shape, v);
            }
        });
        result?;
        let norm = &self.backbone.pool_norm;
        archive.insert("pool_norm.mean", norm.mean.shape(), norm.mean.as_slice().expect("contiguous"))?;
        archive.insert("pool_norm.inv_std", norm.inv_std.shape(), norm.inv_std.as_slice().expect("contiguous"))?;
        for (c, p) in self.head.classes.iter().zip(&self.head.proxies) {
            archive.insert(
                format!("head.proxies.{c}"),
                p.shape(),
                p.as_slice().expect("contiguous"),
            )?;
        }
        Ok(archive)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(archive.meta.clone())?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut backbone = Backbone::new(meta.backbone, &mut rng)?;
        let mut missing = Ok(());
        backbone.visit_mut(&mut |name, v| {
            if missing.is_err() {
                return;
            }
            match archive.get(name) {
                Ok((_, values)) if values.len() == v.len() => v.copy_from_slice(&values),
                Ok((shape, _)) => missing = Err(Error::Archive(format!("tensor `{name}` has shape {shape:?}"))),
                Err(e) => missing = Err(e),
            }
        });
        missing?;
        let channels = backbone.pool_norm.mean.len();
        let read = |name: &str| -> Result<Array1<f64>> {
            let (shape, values) = archive.get(name)?;
            if shape != [channels] {
                return Err(Error::Archive(format!("tensor `{name}` has shape {shape:?}")));
            }
            Ok(Array1::from(values))
        };
        backbone.pool_norm = PoolNorm {
            mean: read("pool_norm.mean")?,
            inv_std: read("pool_norm.inv_std")?,
        };
        let mut head = LscHead::new(
            backbone.config.embedding_dim,
            &HeadConfig {
                n_proxy: meta.n_proxy,
                eta_init: meta.eta,
                delta: meta.delta,
            },
        )?;
        for &c in &meta.classes {
            let (shape, values) = archive.get(&format!("head.proxies.{c}"))?;
            let p = Array2::from_shape_vec((shape[0], shape[1]), values).map_err(|e| Error::Archive(e.to_string()))?;
            head.classes.push(c);
            head.proxies.push(p);
        }
        Ok(Self { backbone, head })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }
}
