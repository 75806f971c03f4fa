//! The class-incremental loop.
//!
//! Stage 0 trains on the initial classes. Every later stage `k`
//!
//! 1. extends the head with proxies for the new classes,
//! 2. trains on the new data plus the replayed exemplars, distilling from a
//!    frozen copy of the previous model,
//! 3. computes the importance mask the next stage will consume, over the
//!    previous exemplars and the new data,
//! 4. herds exemplars for the new classes,
//! 5. fine-tunes the classifier head alone on the exemplar memory,
//! 6. evaluates with both the head and the exemplar means.
//!
//! Each stage writes `stage_<k>/{checkpoint,mask,memory}.json` and finally
//! `metrics.json`, which marks the stage complete for resumption.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array4, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_cnn, evaluate_nme, stage_dir, MetricsRecord, RunInfo};
use crate::importance::{compute_importance, ImportanceMask};
use crate::losses::{regularizers, total_loss, Distillation, LossComponents, LossWeights};
use crate::memory::{eval_view, ExemplarMemory, SamplingStrategy};
use crate::model::{
    nca_loss, BackboneConfig, FeatureStack, HeadConfig, LayerSpec, LscHead, ModelGrads, PoolNorm, TemporalModel,
};
use crate::optim::{LrSchedule, Sgd};
use crate::parallel::map_ordered;
use crate::rng::{derive_seed, rng_for, tag};
use crate::task_data::{
    build_task_stream, generate_synthetic_dataset, load_manifest, ClassId, SyntheticSpec, TaskStream, VideoSample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tcd,
    TcdNoOrtho,
    TcdNoMask,
    PlainDistill,
    Finetune,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Tcd,
        Method::TcdNoOrtho,
        Method::TcdNoMask,
        Method::PlainDistill,
        Method::Finetune,
    ];
    /// The objective-function ablation rows.
    pub const ABLATION: [Method; 4] = [Method::Tcd, Method::TcdNoOrtho, Method::TcdNoMask, Method::PlainDistill];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tcd => "tcd",
            Method::TcdNoOrtho => "tcd_no_ortho",
            Method::TcdNoMask => "tcd_no_mask",
            Method::PlainDistill => "plain_distill",
            Method::Finetune => "finetune",
        }
    }

    pub fn distills(self) -> bool {
        self != Method::Finetune
    }

    pub fn uses_mask(self) -> bool {
        matches!(self, Method::Tcd | Method::TcdNoOrtho)
    }

    pub fn uses_ortho(self) -> bool {
        matches!(self, Method::Tcd | Method::TcdNoMask)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown method `{s}` (allowed: {})", names.join(", ")))
        })
    }
}

/// Flat experiment configuration. Unknown keys are rejected when parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub method: Method,
    pub seeds: Vec<u64>,

    pub n_classes: usize,
    pub initial_classes: usize,
    pub group_size: usize,

    /// Seed of the synthetic data; independent of the run seeds, which only
    /// shuffle the class order and drive training.
    pub data_seed: u64,
    pub motifs_per_class: usize,
    pub shared_prefix_pairs: Vec<(ClassId, ClassId)>,
    pub noise_level: f64,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Manifests replacing the synthetic data when both are set.
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,

    pub t: usize,
    pub stem_channels: usize,
    pub layer_channels: Vec<usize>,
    pub layer_strides: Vec<usize>,
    pub shift_fraction: f64,
    pub embedding_dim: usize,
    pub n_proxy: usize,
    pub eta_init: f64,
    pub delta: f64,

    pub alpha_feat: f64,
    pub alpha_embed: f64,
    pub beta: f64,

    pub budget_per_class: usize,
    pub sampling_strategy: SamplingStrategy,

    pub epochs_initial: usize,
    pub epochs_incremental: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fractions of a stage's epochs after which the rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_at: Vec<f64>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier on `lr` for the trainable NCA scale η.
    pub eta_lr_scale: f64,
    /// Gradients whose global norm exceeds this are rescaled to it; 0
    /// disables clipping.
    pub grad_clip: f64,
    pub finetune_epochs: usize,

    pub include_initial_stage: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        Self {
            name: "synth".into(),
            method: Method::Tcd,
            seeds: vec![1000, 1993, 2021],
            n_classes: 8,
            initial_classes: 4,
            group_size: 2,
            data_seed: 7,
            motifs_per_class: 4,
            shared_prefix_pairs: vec![(0, 1), (2, 3)],
            noise_level: 0.1,
            frames_per_video: 16,
            height: backbone.height,
            width: backbone.width,
            channels: backbone.in_channels,
            train_per_class: 30,
            test_per_class: 20,
            train_manifest: None,
            test_manifest: None,
            t: backbone.t,
            stem_channels: backbone.stem_channels,
            layer_channels: backbone.layers.iter().map(|l| l.channels).collect(),
            layer_strides: backbone.layers.iter().map(|l| l.stride).collect(),
            shift_fraction: backbone.shift_fraction,
            embedding_dim: backbone.embedding_dim,
            n_proxy: 3,
            eta_init: 1.0,
            delta: 0.6,
            alpha_feat: 1.0,
            alpha_embed: 0.01,
            beta: 0.1,
            budget_per_class: 5,
            sampling_strategy: SamplingStrategy::Uniform,
            epochs_initial: 30,
            epochs_incremental: 20,
            batch_size: 16,
            lr: 0.05,
            lr_decay_at: vec![0.6, 0.85],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            eta_lr_scale: 1.0,
            grad_clip: 0.0,
            finetune_epochs: 10,
            include_initial_stage: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            t: self.t,
            in_channels: self.channels,
            height: self.height,
            width: self.width,
            stem_channels: self.stem_channels,
            layers: self
                .layer_channels
                .iter()
                .zip(&self.layer_strides)
                .map(|(&channels, &stride)| LayerSpec { channels, stride })
                .collect(),
            shift_fraction: self.shift_fraction,
            embedding_dim: self.embedding_dim,
        }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            n_proxy: self.n_proxy,
            eta_init: self.eta_init,
            delta: self.delta,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha_feat: self.alpha_feat,
            alpha_embed: self.alpha_embed,
            beta: self.beta,
            lambda_scale: 1.0,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_classes: self.n_classes,
            motifs_per_class: self.motifs_per_class,
            shared_prefix_pairs: self.shared_prefix_pairs.clone(),
            noise_level: self.noise_level,
            t: self.t,
            frames_per_video: self.frames_per_video,
            height: self.height,
            width: self.width,
            channels: self.channels,
            seed: self.data_seed,
        }
    }

    pub fn schedule(&self, epochs: usize) -> LrSchedule {
        LrSchedule {
            initial: self.lr,
            decay_epochs: self
                .lr_decay_at
                .iter()
                .map(|f| (f * epochs as f64).round() as usize)
                .collect(),
            factor: self.lr_decay_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layer_channels.len() != self.layer_strides.len() {
            return bad("layer_channels and layer_strides differ in length".into());
        }
        self.backbone().validate()?;
        if self.n_proxy == 0 || !(self.eta_init > 0.0) {
            return bad("n_proxy must be positive and eta_init > 0".into());
        }
        for (k, v) in [("alpha_feat", self.alpha_feat), ("alpha_embed", self.alpha_embed), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{k} must be a nonnegative real"));
            }
        }
        if self.budget_per_class == 0 || self.batch_size == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("budget_per_class, batch_size, train_per_class and test_per_class must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.lr_decay_factor > 0.0) || self.lr_decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("lr and lr_decay_factor must be positive and lr_decay_at within [0, 1]".into());
        }
        if !(self.eta_lr_scale >= 0.0) || !self.eta_lr_scale.is_finite() {
            return bad("eta_lr_scale must be a finite non-negative real".into());
        }
        if !(self.grad_clip >= 0.0) || !self.grad_clip.is_finite() {
            return bad("grad_clip must be a finite non-negative real".into());
        }
        if self.train_manifest.is_some() != self.test_manifest.is_some() {
            return bad("train_manifest and test_manifest must be given together".into());
        }
        if self.train_manifest.is_none() {
            self.synthetic_spec().validate()?;
        }
        if self.initial_classes == 0 || self.initial_classes > self.n_classes {
            return bad(format!(
                "initial_classes {} must be within 1..={}",
                self.initial_classes, self.n_classes
            ));
        }
        if self.initial_classes < self.n_classes && (self.group_size == 0 || (self.n_classes - self.initial_classes) % self.group_size != 0) {
            return bad(format!(
                "group_size {} does not divide the {} remaining classes",
                self.group_size,
                self.n_classes - self.initial_classes
            ));
        }
        Ok(())
    }
}

/// Train and test clips for every class.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<ClassId>,
    pub train: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

impl Dataset {
    pub fn train_for(&self, classes: &[ClassId]) -> Vec<VideoSample> {
        self.train.iter().filter(|s| classes.contains(&s.label)).cloned().collect()
    }

    pub fn test_for(&self, classes: &[ClassId]) -> Vec<VideoSample> {
        self.test.iter().filter(|s| classes.contains(&s.label)).cloned().collect()
    }
}

fn load_split(path: &Path, t: usize) -> Result<Vec<VideoSample>> {
    let manifest = load_manifest(path, t)?;
    for r in &manifest.rejected {
        log::warn!("{}:{}: {}", path.display(), r.line, r.reason);
    }
    manifest.records.iter().map(|d| d.load()).collect()
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<Dataset> {
    let (train, test) = match (&config.train_manifest, &config.test_manifest) {
        (Some(train), Some(test)) => (load_split(train, config.t)?, load_split(test, config.t)?),
        _ => {
            let all = generate_synthetic_dataset(&config.synthetic_spec(), config.train_per_class + config.test_per_class)?;
            let index = |s: &VideoSample| match s.origin {
                crate::task_data::SampleOrigin::Synthetic { index, .. } => index,
                _ => unreachable!("synthetic origin"),
            };
            all.into_iter().partition(|s| index(s) < config.train_per_class)
        }
    };
    let classes: Vec<ClassId> = train.iter().map(|s| s.label).collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() != config.n_classes {
        return Err(Error::Config(format!(
            "training data has {} classes, config declares {}",
            classes.len(),
            config.n_classes
        )));
    }
    if let Some(s) = test.iter().find(|s| !classes.contains(&s.label)) {
        return Err(Error::UnknownClass(s.label));
    }
    Ok(Dataset { classes, train, test })
}

pub fn task_stream(config: &ExperimentConfig, classes: &[ClassId], seed: u64) -> Result<TaskStream> {
    build_task_stream(classes, seed, config.initial_classes, config.group_size)
}

/// Active regularizers for one stage.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub distillation: Distillation<'a>,
    pub weights: LossWeights,
}

impl<'a> Objective<'a> {
    /// Resolves `method` into concrete terms. Terms whose weights are zero
    /// are switched off entirely.
    pub fn for_stage(
        method: Method,
        base: LossWeights,
        stage: usize,
        seen: usize,
        new: usize,
        mask: Option<&'a ImportanceMask>,
    ) -> Result<Self> {
        let mut weights = if stage == 0 { base.initial() } else { base.for_step(seen, new) };
        if !method.uses_ortho() {
            weights.beta = 0.0;
        }
        let distill = stage > 0 && method.distills() && (weights.feat_weight() != 0.0 || weights.embed_weight() != 0.0);
        let distillation = if !distill {
            weights.alpha_feat = 0.0;
            weights.alpha_embed = 0.0;
            Distillation::None
        } else if method.uses_mask() {
            Distillation::Weighted(mask.ok_or_else(|| Error::Config(format!("stage {stage} has no importance mask")))?)
        } else {
            Distillation::Unweighted
        };
        Ok(Self { distillation, weights })
    }

    fn regularized(&self) -> bool {
        self.distillation != Distillation::None || self.weights.beta != 0.0
    }
}

/// Loss terms and summed parameter gradients for one minibatch.
///
/// Pooled features are standardized with the batch's own per-channel
/// statistics, and gradients flow through those statistics. The previous
/// model is normalized the same way with its own batch statistics. A batch
/// of one sample falls back to the stored statistics.
pub fn batch_gradient(
    model: &TemporalModel,
    previous: Option<&TemporalModel>,
    batch: &[(Array4<f64>, ClassId)],
    objective: &Objective<'_>,
) -> Result<(LossComponents, ModelGrads)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty minibatch".into()));
    }
    let trunks = map_ordered(batch, |(frames, _)| model.backbone.forward_trunk(frames.view()))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = batch.len() as f64;
    let norm = batch_pool_norm(trunks.iter().map(|(_, c)| c.pooled()), &model.backbone.pool_norm);

    // The previous model sees the batch in the same mode as the current one,
    // so identical models produce identical embeddings.
    let prev_stacks: Vec<Option<FeatureStack>> = match (objective.distillation, previous) {
        (Distillation::None, _) => vec![None; batch.len()],
        (_, None) => return Err(Error::Config("distillation without a previous model".into())),
        (_, Some(p)) => {
            let prev = map_ordered(batch, |(frames, _)| p.backbone.forward_trunk(frames.view()))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let prev_norm = batch_pool_norm(prev.iter().map(|(_, c)| c.pooled()), &p.backbone.pool_norm);
            prev.into_iter()
                .map(|(layers, cache)| {
                    let x = (cache.pooled() - &prev_norm.mean) * &prev_norm.inv_std;
                    Some(FeatureStack {
                        layers,
                        embedding: p.backbone.fc.forward(x.view()),
                        scores: Array1::zeros(0),
                    })
                })
                .collect()
        }
    };

    let mut components = LossComponents::default();
    let mut grads = model.zero_grads();
    let mut normed = Vec::with_capacity(batch.len());
    let mut g_normed = Vec::with_capacity(batch.len());
    let mut layer_upstream = Vec::with_capacity(batch.len());
    for (((_, label), (layers, cache)), prev_stack) in batch.iter().zip(trunks.iter()).zip(&prev_stacks) {
        let x = (cache.pooled() - &norm.mean) * &norm.inv_std;
        let embedding = model.backbone.fc.forward(x.view());
        let (scores, score_cache) = model.head.scores(embedding.view())?;
        let y = model.label_index(*label)?;
        let (cls, g_scores, g_eta) = nca_loss(scores.view(), y, model.head.eta, model.head.delta)?;
        let mut c = LossComponents {
            cls,
            ..Default::default()
        };
        let stack = FeatureStack {
            layers: layers.clone(),
            embedding,
            scores,
        };
        let (mut g_emb, layer_grads) = if objective.regularized() {
            let reg = regularizers(&stack, prev_stack.as_ref(), objective.distillation, &objective.weights)?;
            c.dist_feat = reg.components.dist_feat;
            c.dist_embed = reg.components.dist_embed;
            c.ortho = reg.components.ortho;
            (reg.embedding, reg.layers.into_iter().map(Some).collect())
        } else {
            (Array1::zeros(model.head.dim), vec![None; model.backbone.n_layers()])
        };
        total_loss(c.cls, c.dist_feat, c.dist_embed, c.ortho, &objective.weights)?;
        g_emb += &model
            .head
            .scores_backward(stack.embedding.view(), &score_cache, g_scores.view(), &mut grads.head);
        grads.head.eta += g_eta;
        g_normed.push(model.backbone.fc.backward(x.view(), g_emb.view(), &mut grads.backbone.fc));
        normed.push(x);
        layer_upstream.push(layer_grads);
        components.add(&c);
    }

    let g_pooled: Vec<Array1<f64>> = if batch.len() > 1 {
        let mean_g = g_normed.iter().fold(Array1::<f64>::zeros(norm.mean.len()), |acc, g| acc + g) / n;
        let mean_gx = g_normed
            .iter()
            .zip(&normed)
            .fold(Array1::<f64>::zeros(norm.mean.len()), |acc, (g, x)| acc + g * x)
            / n;
        g_normed
            .iter()
            .zip(&normed)
            .map(|(g, x)| (g - &mean_g - &(x * &mean_gx)) * &norm.inv_std)
            .collect()
    } else {
        g_normed.iter().map(|g| g * &norm.inv_std).collect()
    };

    let jobs: Vec<usize> = (0..batch.len()).collect();
    let backs = map_ordered(&jobs, |&i| model.backbone.backward_trunk(&trunks[i].1, &g_pooled[i], &layer_upstream[i]));
    for back in backs {
        let back = back?;
        let mut part = model.zero_grads();
        part.backbone = back.params;
        grads.add_assign(&part);
    }
    Ok((components, grads))
}

/// Per-channel population statistics of a batch of pooled features, or
/// `stored` for a batch of one.
fn batch_pool_norm<'a>(pooled: impl ExactSizeIterator<Item = &'a Array1<f64>> + Clone, stored: &PoolNorm) -> PoolNorm {
    let n = pooled.len();
    if n < 2 {
        return stored.clone();
    }
    let mean = pooled.clone().fold(Array1::<f64>::zeros(stored.mean.len()), |acc, p| acc + p) / n as f64;
    let var = pooled.fold(Array1::<f64>::zeros(mean.len()), |acc, p| acc + (p - &mean).mapv(|v| v * v)) / n as f64;
    PoolNorm {
        inv_std: var.mapv(|v| 1.0 / (v + PoolNorm::EPS).sqrt()),
        mean,
    }
}

/// Training-time input: one frame drawn at random from each of `t` equal
/// bins. Clips of exactly `t` frames pass through unchanged.
pub fn training_view(frames: ArrayView4<f64>, t: usize, rng: &mut ChaCha8Rng) -> Result<Array4<f64>> {
    let n = frames.dim().0;
    if n < t {
        return Err(Error::OutOfRange(format!("clip of {n} frames is shorter than t = {t}")));
    }
    if n == t {
        return Ok(frames.to_owned());
    }
    let bin = n / t;
    let idx: Vec<usize> = (0..t).map(|i| i * bin + rng.random_range(0..bin)).collect();
    Ok(frames.select(Axis(0), &idx))
}

/// Minibatch SGD over `data` for `epochs` epochs. Returns the final epoch's
/// mean loss terms.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &mut TemporalModel,
    previous: Option<&TemporalModel>,
    data: &[&VideoSample],
    seen: &[ClassId],
    objective: &Objective<'_>,
    epochs: usize,
    config: &ExperimentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossComponents> {
    if data.is_empty() {
        return Err(Error::Empty("no training data for this stage".into()));
    }
    let schedule = config.schedule(epochs);
    let mut opt = Sgd::new(config.momentum, config.weight_decay);
    opt.eta_lr_scale = config.eta_lr_scale;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last = LossComponents::default();
    let views = data
        .iter()
        .map(|s| eval_view(s, config.t))
        .collect::<Result<Vec<_>>>()?;
    if epochs > 0 {
        model.backbone.fit_pool_norm(views.iter().map(|v| v.frames.view()))?;
    }
    for epoch in 0..epochs {
        let lr = schedule.at(epoch);
        order.shuffle(rng);
        let mut sums = LossComponents::default();
        for batch in order.chunks(config.batch_size) {
            let mut inputs = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = data[i];
                assert!(seen.contains(&s.label), "class {} leaked into a batch", s.label);
                inputs.push((training_view(s.frames.view(), config.t, rng)?, s.label));
            }
            let (c, mut grads) = batch_gradient(model, previous, &inputs, objective)?;
            sums.add(&c);
            grads.scale(1.0 / batch.len() as f64);
            let norm = grads.norm();
            if config.grad_clip > 0.0 && norm > config.grad_clip {
                grads.scale(config.grad_clip / norm);
            }
            opt.step(model, &grads, lr);
        }
        last = sums.scaled(1.0 / data.len() as f64);
        log::debug!("epoch {epoch}: lr {lr:.2e} cls {:.4} dist {:.4} ortho {:.4}", last.cls, last.dist_feat, last.ortho);
    }
    if epochs > 0 {
        model.backbone.fit_pool_norm(views.iter().map(|v| v.frames.view()))?;
    }
    Ok(last)
}

/// Registers proxies for `new` classes, seeded by `(seed, stage)`.
pub fn new_class_head_init(head: &mut LscHead, new: &[ClassId], seed: u64, stage: usize) -> Result<()> {
    head.register_classes(new, &mut rng_for(seed, &[tag::HEAD, stage as u64]))
}

/// Trains the classifier head alone on the exemplar memory. The backbone is
/// untouched, so embeddings are computed once up front.
pub fn finetune_classifier(
    model: &mut TemporalModel,
    memory: &ExemplarMemory,
    config: &ExperimentConfig,
    seed: u64,
    stage: usize,
) -> Result<()> {
    if memory.is_empty() {
        log::warn!("exemplar memory is empty; skipping classifier fine-tuning");
        return Ok(());
    }
    if config.finetune_epochs == 0 {
        return Ok(());
    }
    let t = model.config().t;
    let samples: Vec<&VideoSample> = memory.exemplars().collect();
    let embeddings = map_ordered(&samples, |s| -> Result<(Array1<f64>, usize)> {
        let v = eval_view(s, t)?;
        Ok((model.embed(v.frames.view())?, model.label_index(s.label)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let lr = config.schedule(config.epochs_incremental.max(1)).final_rate();
    let mut rng = rng_for(seed, &[tag::FINETUNE, stage as u64]);
    let mut opt = Sgd::new(config.momentum, 0.0);
    opt.eta_lr_scale = config.eta_lr_scale;
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    for _ in 0..config.finetune_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.head.zero_grads();
            for &i in batch {
                let (emb, y) = &embeddings[i];
                let (scores, cache) = model.head.scores(emb.view())?;
                let (_, g_scores, g_eta) = nca_loss(scores.view(), *y, model.head.eta, model.head.delta)?;
                model.head.scores_backward(emb.view(), &cache, g_scores.view(), &mut grads);
                grads.eta += g_eta;
            }
            let scale = 1.0 / batch.len() as f64;
            for p in &mut grads.proxies {
                *p *= scale;
            }
            grads.eta *= scale;
            opt.step_head(model, &grads, lr);
        }
    }
    Ok(())
}

/// Everything carried from one stage to the next.
#[derive(Debug, Clone)]
pub struct StepState {
    pub step: usize,
    pub model: TemporalModel,
    /// Mask computed at the end of this stage, consumed by the next.
    pub mask: ImportanceMask,
    pub memory: ExemplarMemory,
    pub metrics: MetricsRecord,
    /// Checksum of the mask this stage trained with, if any.
    pub consumed_mask: Option<u64>,
}

fn evaluate_stage(
    step: usize,
    model: &TemporalModel,
    memory: &ExemplarMemory,
    data: &Dataset,
    seen: &[ClassId],
    losses: LossComponents,
) -> Result<MetricsRecord> {
    let test = data.test_for(seen);
    let cnn = evaluate_cnn(model, &test, seen)?;
    let nme = evaluate_nme(model, memory, &test)?;
    let mut seen_sorted = seen.to_vec();
    seen_sorted.sort_unstable();
    Ok(MetricsRecord {
        step,
        seen_class_count: seen.len(),
        seen_classes: seen_sorted,
        acc_cnn: cnn.overall,
        acc_nme: nme.overall,
        per_class: cnn.per_class,
        per_class_nme: nme.per_class,
        losses,
    })
}

fn eval_views(samples: &[&VideoSample], t: usize) -> Result<Vec<VideoSample>> {
    samples.iter().map(|s| eval_view(s, t)).collect()
}

/// Trains the initial stage from scratch.
pub fn run_initial_stage(config: &ExperimentConfig, data: &Dataset, stream: &TaskStream, seed: u64) -> Result<StepState> {
    let seen = stream.seen_classes(0);
    let mut model = TemporalModel::new(config.backbone(), &config.head(), &mut rng_for(seed, &[tag::INIT]))?;
    new_class_head_init(&mut model.head, &stream.groups[0], seed, 0)?;
    let train = data.train_for(&stream.groups[0]);
    if train.is_empty() {
        return Err(Error::Empty("no training data for the initial classes".into()));
    }
    let refs: Vec<&VideoSample> = train.iter().collect();
    let objective = Objective::for_stage(config.method, config.weights(), 0, seen.len(), seen.len(), None)?;
    let mut rng = rng_for(seed, &[tag::BATCHES, 0]);
    let losses = fit(&mut model, None, &refs, &seen, &objective, config.epochs_initial, config, &mut rng)?;

    let mask = compute_importance(&model, &eval_views(&refs, config.t)?, 1)?;
    let mut memory = ExemplarMemory::new(config.budget_per_class, config.sampling_strategy)?;
    memory.update_memory(&train, &model, derive_seed(seed, &[tag::EXEMPLAR, 0]))?;
    finetune_classifier(&mut model, &memory, config, seed, 0)?;
    let metrics = evaluate_stage(0, &model, &memory, data, &seen, losses)?;
    Ok(StepState {
        step: 0,
        model,
        mask,
        memory,
        metrics,
        consumed_mask: None,
    })
}

/// Runs stage `state.step + 1` on top of a completed stage.
pub fn run_incremental_step(
    state: &StepState,
    config: &ExperimentConfig,
    data: &Dataset,
    stream: &TaskStream,
    seed: u64,
) -> Result<StepState> {
    let k = state.step + 1;
    let new = stream
        .groups
        .get(k)
        .ok_or_else(|| Error::OutOfRange(format!("stream has no stage {k}")))?;
    let seen = stream.seen_classes(k);
    let task = data.train_for(new);
    if task.is_empty() {
        return Err(Error::Empty(format!("no training data for stage {k}")));
    }

    let previous = &state.model;
    let mut model = previous.clone();
    new_class_head_init(&mut model.head, new, seed, k)?;

    let mut train: Vec<&VideoSample> = task.iter().collect();
    train.extend(state.memory.exemplars());
    let objective = Objective::for_stage(config.method, config.weights(), k, seen.len(), new.len(), Some(&state.mask))?;
    let mut rng = rng_for(seed, &[tag::BATCHES, k as u64]);
    let losses = fit(&mut model, Some(previous), &train, &seen, &objective, config.epochs_incremental, config, &mut rng)?;

    let mut accessible: Vec<&VideoSample> = state.memory.exemplars().collect();
    accessible.extend(task.iter());
    let mask = compute_importance(&model, &eval_views(&accessible, config.t)?, k + 1)?;
    let mut memory = state.memory.clone();
    memory.update_memory(&task, &model, derive_seed(seed, &[tag::EXEMPLAR, k as u64]))?;
    finetune_classifier(&mut model, &memory, config, seed, k)?;
    let metrics = evaluate_stage(k, &model, &memory, data, &seen, losses)?;
    Ok(StepState {
        step: k,
        model,
        mask,
        memory,
        metrics,
        consumed_mask: Some(state.mask.checksum()),
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Report label; defaults to the method name.
    pub label: Option<String>,
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    /// Last stage found complete on disk when resuming.
    pub resumed_after: Option<usize>,
}

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.txt";

fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn save_stage(dir: &Path, state: &StepState) -> Result<()> {
    let sd = stage_dir(dir, state.step);
    fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
    write_atomic(&sd.join("checkpoint.json"), |p| state.model.save(p))?;
    write_atomic(&sd.join("mask.json"), |p| state.mask.save(p))?;
    write_atomic(&sd.join("memory.json"), |p| state.memory.save(p))?;
    write_atomic(&sd.join("metrics.json"), |p| state.metrics.save(p))
}

fn load_stage(dir: &Path, step: usize) -> Result<StepState> {
    let sd = stage_dir(dir, step);
    Ok(StepState {
        step,
        model: TemporalModel::load(&sd.join("checkpoint.json"))?,
        mask: ImportanceMask::load(&sd.join("mask.json"))?,
        memory: ExemplarMemory::load(&sd.join("memory.json"))?,
        metrics: MetricsRecord::load(&sd.join("metrics.json"))?,
        consumed_mask: None,
    })
}

fn append_log(dir: &Path, line: &str) -> Result<()> {
    let path = dir.join(LOG_FILE);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}

fn stage_line(r: &MetricsRecord) -> String {
    format!(
        "stage {}: classes {} acc_cnn {:.2} acc_nme {:.2} cls {:.4} dist_feat {:.4} dist_embed {:.4} ortho {:.4}",
        r.step, r.seen_class_count, r.acc_cnn, r.acc_nme, r.losses.cls, r.losses.dist_feat, r.losses.dist_embed, r.losses.ortho
    )
}

/// Runs (or resumes) the whole stream for one seed in `dir`.
pub fn run_experiment(config: &ExperimentConfig, seed: u64, dir: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    let data = prepare_data(config)?;
    let stream = task_stream(config, &data.classes, seed)?;
    let n_stages = stream.n_stages();
    let config_path = dir.join(CONFIG_FILE);

    let mut completed: Option<usize> = None;
    if config_path.exists() {
        if !opts.resume {
            return Err(Error::Config(format!(
                "{} already holds a run; pass resume to continue it",
                dir.display()
            )));
        }
        let echoed = ExperimentConfig::load(&config_path)?;
        if echoed != *config {
            return Err(Error::Config(format!("{} was produced by a different config", dir.display())));
        }
        completed = (0..n_stages)
            .take_while(|&k| stage_dir(dir, k).join("metrics.json").is_file())
            .last();
    } else {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fs::write(&config_path, config.to_json()?).map_err(|e| Error::io(&config_path, e))?;
        fs::write(dir.join("stream.json"), stream.to_json()?).map_err(|e| Error::io(dir, e))?;
    }
    RunInfo {
        label: opts.label.clone().unwrap_or_else(|| config.method.to_string()),
        method: config.method.to_string(),
        seed,
        n_stages,
        include_initial_stage: config.include_initial_stage,
    }
    .save(dir)?;

    let mut records = Vec::with_capacity(n_stages);
    let mut state = match completed {
        Some(j) => {
            for k in 0..j {
                records.push(MetricsRecord::load(&stage_dir(dir, k).join("metrics.json"))?);
            }
            append_log(dir, &format!("resuming after stage {j}"))?;
            load_stage(dir, j)?
        }
        None => {
            append_log(dir, &format!("seed {seed} method {} stages {n_stages}", config.method))?;
            let s = run_initial_stage(config, &data, &stream, seed)?;
            save_stage(dir, &s)?;
            append_log(dir, &stage_line(&s.metrics))?;
            s
        }
    };
    records.push(state.metrics.clone());
    while state.step + 1 < n_stages {
        let next = run_incremental_step(&state, config, &data, &stream, seed)?;
        save_stage(dir, &next)?;
        append_log(dir, &stage_line(&next.metrics))?;
        records.push(next.metrics.clone());
        state = next;
    }
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        records,
        resumed_after: completed,
    })
}

/// Directory name of one run inside an output root.
pub fn run_dir_name(config: &ExperimentConfig, label: &str, seed: u64) -> String {
    format!("{}-{label}-s{seed}", config.name)
}

#[cfg(test)]
mod tests;
