//! Exemplar memory: herding selection, frame sampling and the per-class store.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array4, ArrayView4, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::model::head::unit_vector;
use crate::model::TemporalModel;
use crate::parallel::map_ordered;
use crate::rng::{rng_for, tag};
use crate::task_data::{ClassId, SampleOrigin, VideoSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    All,
    Random,
    Uniform,
}

impl SamplingStrategy {
    pub const NAMES: [&'static str; 3] = ["all", "random", "uniform"];
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::All => "all",
            Self::Random => "random",
            Self::Uniform => "uniform",
        })
    }
}

impl FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "random" => Ok(Self::Random),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::Config(format!(
                "unknown sampling strategy `{other}` (allowed: {})",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

/// Indices of the frames kept by `strategy`; `All` keeps every frame.
pub fn frame_indices(n: usize, strategy: SamplingStrategy, t: usize, seed: u64) -> Result<Vec<usize>> {
    if strategy == SamplingStrategy::All {
        return Ok((0..n).collect());
    }
    if t == 0 || n < t {
        return Err(Error::OutOfRange(format!("cannot sample {t} frames from a clip of {n}")));
    }
    Ok(match strategy {
        SamplingStrategy::Uniform => (0..t).map(|i| i * (n / t) + n / (2 * t)).collect(),
        SamplingStrategy::Random => {
            let mut rng = rng_for(seed, &[tag::FRAMES]);
            let mut idx = index::sample(&mut rng, n, t).into_vec();
            idx.sort_unstable();
            idx
        }
        SamplingStrategy::All => unreachable!(),
    })
}

pub fn sample_frames(frames: ArrayView4<f64>, strategy: SamplingStrategy, t: usize, seed: u64) -> Result<Array4<f64>> {
    let idx = frame_indices(frames.dim().0, strategy, t, seed)?;
    Ok(frames.select(Axis(0), &idx))
}

/// Deterministic `T`-frame model input used for evaluation, herding and
/// importance probes.
pub fn eval_view(sample: &VideoSample, t: usize) -> Result<VideoSample> {
    Ok(VideoSample {
        frames: sample_frames(sample.frames.view(), SamplingStrategy::Uniform, t, 0)?,
        ..sample.clone()
    })
}

/// Greedy herding order. Picks, at each iteration, the candidate whose
/// addition brings the running exemplar mean closest to the full mean;
/// ties go to the smallest index.
pub fn herding_select(features: &[Array1<f64>], budget: usize) -> Result<Vec<usize>> {
    let first = features.first().ok_or_else(|| Error::Empty("herding over no features".into()))?;
    let dim = first.len();
    if let Some(bad) = features.iter().position(|f| f.len() != dim) {
        return Err(Error::Shape(format!(
            "feature {bad} has dimension {} instead of {dim}",
            features[bad].len()
        )));
    }
    if budget == 0 {
        return Err(Error::Config("herding budget must be at least 1".into()));
    }
    let n = features.len();
    let mut mu = Array1::zeros(dim);
    for f in features {
        mu += f;
    }
    mu /= n as f64;

    let mut chosen = Vec::with_capacity(budget.min(n));
    let mut taken = vec![false; n];
    let mut running = Array1::<f64>::zeros(dim);
    for j in 1..=budget.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for (x, f) in features.iter().enumerate() {
            if taken[x] {
                continue;
            }
            let dist: f64 = mu
                .iter()
                .zip(running.iter().zip(f.iter()))
                .map(|(m, (s, v))| {
                    let d = m - (s + v) / j as f64;
                    d * d
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((x, dist));
            }
        }
        let (x, _) = best.expect("candidates remain");
        taken[x] = true;
        running += &features[x];
        chosen.push(x);
    }
    Ok(chosen)
}

/// Mean of `vectors` projected to unit norm. The flag reports a mean too
/// close to zero to carry a direction.
pub fn normalized_mean(vectors: &[Array1<f64>]) -> Result<(Array1<f64>, bool)> {
    let first = vectors.first().ok_or_else(|| Error::Empty("mean of no vectors".into()))?;
    let mut mean = Array1::zeros(first.len());
    for v in vectors {
        if v.len() != first.len() {
            return Err(Error::Shape("vectors differ in dimension".into()));
        }
        mean += v;
    }
    mean /= vectors.len() as f64;
    let degenerate = mean.dot(&mean).sqrt() < 1e-9;
    Ok((unit_vector(mean.view()), degenerate))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarMemory {
    /// Exemplars per class in herding order.
    pub per_class: BTreeMap<ClassId, Vec<VideoSample>>,
    pub budget_per_class: usize,
    pub strategy: SamplingStrategy,
}

#[derive(Debug, Serialize, Deserialize)]
struct MemoryIndex {
    budget: usize,
    strategy: SamplingStrategy,
    classes: BTreeMap<ClassId, Vec<String>>,
    origins: BTreeMap<String, SampleOrigin>,
}

impl ExemplarMemory {
    pub fn new(budget_per_class: usize, strategy: SamplingStrategy) -> Result<Self> {
        if budget_per_class == 0 {
            return Err(Error::Config("budget_per_class must be at least 1".into()));
        }
        Ok(Self {
            per_class: BTreeMap::new(),
            budget_per_class,
            strategy,
        })
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.per_class.keys().copied().collect()
    }

    /// All exemplars, class-major in ascending class id.
    pub fn exemplars(&self) -> impl Iterator<Item = &VideoSample> {
        self.per_class.values().flatten()
    }

    /// Adds herded exemplars for every class in `new_samples`. Classes
    /// already present are left untouched.
    pub fn update_memory(&mut self, new_samples: &[VideoSample], model: &TemporalModel, seed: u64) -> Result<()> {
        let t = model.config().t;
        let mut by_class: BTreeMap<ClassId, Vec<&VideoSample>> = BTreeMap::new();
        for s in new_samples {
            by_class.entry(s.label).or_default().push(s);
        }
        for (class, samples) in by_class {
            if self.per_class.contains_key(&class) {
                return Err(Error::DuplicateClass(class));
            }
            if samples.len() < self.budget_per_class {
                log::info!(
                    "class {class} has {} samples, below the budget of {}; storing all",
                    samples.len(),
                    self.budget_per_class
                );
            }
            let features = map_ordered(&samples, |s| -> Result<Array1<f64>> {
                let v = eval_view(s, t)?;
                Ok(unit_vector(model.embed(v.frames.view())?.view()))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let order = herding_select(&features, self.budget_per_class)?;
            let mut stored = Vec::with_capacity(order.len());
            for (rank, i) in order.into_iter().enumerate() {
                let s = samples[i];
                let frame_seed = crate::rng::derive_seed(seed, &[tag::EXEMPLAR, class as u64, rank as u64]);
                stored.push(VideoSample {
                    frames: sample_frames(s.frames.view(), self.strategy, t, frame_seed)?,
                    ..s.clone()
                });
            }
            self.per_class.insert(class, stored);
        }
        assert!(
            self.per_class.values().all(|v| v.len() <= self.budget_per_class),
            "memory budget exceeded"
        );
        Ok(())
    }

    /// Unit-norm mean exemplar embedding per class.
    pub fn class_means(&self, model: &TemporalModel) -> Result<BTreeMap<ClassId, Array1<f64>>> {
        let t = model.config().t;
        let mut out = BTreeMap::new();
        for (&class, exemplars) in &self.per_class {
            if exemplars.is_empty() {
                return Err(Error::Empty(format!("no exemplars stored for class {class}")));
            }
            let embeddings = map_ordered(exemplars, |s| -> Result<Array1<f64>> {
                let v = eval_view(s, t)?;
                model.embed(v.frames.view())
            });
            let embeddings = embeddings.into_iter().collect::<Result<Vec<_>>>()?;
            let (mean, degenerate) = normalized_mean(&embeddings)?;
            if degenerate {
                log::warn!("class {class} exemplar mean is degenerate (near-zero norm)");
            }
            out.insert(class, mean);
        }
        Ok(out)
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut index = MemoryIndex {
            budget: self.budget_per_class,
            strategy: self.strategy,
            classes: BTreeMap::new(),
            origins: BTreeMap::new(),
        };
        let mut tensors = Vec::new();
        for (&class, exemplars) in &self.per_class {
            let ids = exemplars.iter().map(|s| s.id.clone()).collect();
            index.classes.insert(class, ids);
            for s in exemplars {
                if index.origins.insert(s.id.clone(), s.origin.clone()).is_some() {
                    return Err(Error::Archive(format!("duplicate exemplar id `{}`", s.id)));
                }
                tensors.push(s);
            }
        }
        let mut archive = TensorArchive::new(serde_json::to_value(index)?);
        for s in tensors {
            let frames = s.frames.as_standard_layout();
            archive.insert(format!("exemplar.{}", s.id), frames.shape(), frames.as_slice().expect("standard layout"))?;
        }
        Ok(archive)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let index: MemoryIndex = serde_json::from_value(archive.meta.clone())?;
        let mut memory = Self::new(index.budget, index.strategy)?;
        for (class, ids) in index.classes {
            let mut stored = Vec::with_capacity(ids.len());
            for id in ids {
                let (shape, values) = archive.get(&format!("exemplar.{id}"))?;
                if shape.len() != 4 {
                    return Err(Error::Archive(format!("exemplar `{id}` is not 4-D")));
                }
                let frames = Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), values)
                    .map_err(|e| Error::Archive(e.to_string()))?;
                let origin = index
                    .origins
                    .get(&id)
                    .cloned()
                    .ok_or_else(|| Error::Archive(format!("no origin recorded for `{id}`")))?;
                stored.push(VideoSample {
                    id,
                    frames,
                    label: class,
                    origin,
                });
            }
            memory.per_class.insert(class, stored);
        }
        Ok(memory)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }
}
