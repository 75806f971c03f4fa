//! Local similarity classifier: several unit-norm proxies per class, scored
//! by a proxy-softmax-weighted cosine similarity, trained with a hinged NCA
//! loss with margin.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task_data::ClassId;

pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LscHead {
    /// Registered classes; row `i` of the score vector belongs to `classes[i]`.
    pub classes: Vec<ClassId>,
    /// One `[n_proxy × D]` matrix of unit rows per class.
    pub proxies: Vec<Array2<f64>>,
    pub n_proxy: usize,
    pub dim: usize,
    pub eta: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub n_proxy: usize,
    pub eta_init: f64,
    pub delta: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            n_proxy: 3,
            eta_init: 1.0,
            delta: 0.6,
        }
    }
}

/// Gradients w.r.t. the head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub proxies: Vec<Array2<f64>>,
    pub eta: f64,
}

/// Intermediate values of one scoring pass.
#[derive(Debug, Clone)]
pub struct ScoreCache {
    unit: Array1<f64>,
    norm: f64,
    /// `[class][proxy]` cosine similarities.
    sims: Vec<Array1<f64>>,
    weights: Vec<Array1<f64>>,
}

pub fn unit_vector(v: ArrayView1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    v.mapv(|x| x / (norm + NORM_EPS))
}

fn softmax(x: &Array1<f64>) -> Array1<f64> {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = x.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

impl LscHead {
    pub fn new(dim: usize, config: &HeadConfig) -> Result<Self> {
        if config.n_proxy == 0 {
            return Err(Error::Config("n_proxy must be at least 1".into()));
        }
        if !(config.eta_init.is_finite() && config.eta_init > 0.0) {
            return Err(Error::Config("eta must be a positive real".into()));
        }
        Ok(Self {
            classes: Vec::new(),
            proxies: Vec::new(),
            n_proxy: config.n_proxy,
            dim,
            eta: config.eta_init,
            delta: config.delta,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn index_of(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// Appends `n_proxy` random unit proxies for each new class. Existing
    /// proxies are left untouched.
    pub fn register_classes<R: Rng>(&mut self, new: &[ClassId], rng: &mut R) -> Result<()> {
        for (i, c) in new.iter().enumerate() {
            if self.classes.contains(c) || new[..i].contains(c) {
                return Err(Error::DuplicateClass(*c));
            }
        }
        for &c in new {
            let mut p = Array2::from_shape_simple_fn((self.n_proxy, self.dim), || {
                StandardNormal.sample(rng)
            });
            for mut row in p.rows_mut() {
                let u = unit_vector(row.view());
                row.assign(&u);
            }
            self.classes.push(c);
            self.proxies.push(p);
        }
        Ok(())
    }

    /// Projects every proxy back onto the unit sphere.
    pub fn renormalize(&mut self) {
        for p in &mut self.proxies {
            for mut row in p.rows_mut() {
                let u = unit_vector(row.view());
                row.assign(&u);
            }
        }
    }

    pub fn zero_grads(&self) -> HeadGrads {
        HeadGrads {
            proxies: self.proxies.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            eta: 0.0,
        }
    }

    pub fn scores(&self, embedding: ArrayView1<f64>) -> Result<(Array1<f64>, ScoreCache)> {
        if embedding.len() != self.dim {
            return Err(Error::Shape(format!(
                "embedding has {} dims, head expects {}",
                embedding.len(),
                self.dim
            )));
        }
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        let norm = embedding.dot(&embedding).sqrt();
        let unit = embedding.mapv(|x| x / (norm + NORM_EPS));
        let mut scores = Array1::zeros(self.n_classes());
        let mut sims = Vec::with_capacity(self.n_classes());
        let mut weights = Vec::with_capacity(self.n_classes());
        for (m, p) in self.proxies.iter().enumerate() {
            let s = p.dot(&unit);
            let a = softmax(&s);
            scores[m] = a.dot(&s);
            sims.push(s);
            weights.push(a);
        }
        Ok((scores, ScoreCache { unit, norm, sims, weights }))
    }

    /// Backpropagates score gradients; accumulates proxy gradients into
    /// `grads` and returns the gradient w.r.t. the raw embedding.
    pub fn scores_backward(
        &self,
        embedding: ArrayView1<f64>,
        cache: &ScoreCache,
        grad_scores: ArrayView1<f64>,
        grads: &mut HeadGrads,
    ) -> Array1<f64> {
        let mut g_unit = Array1::zeros(self.dim);
        for (m, p) in self.proxies.iter().enumerate() {
            let gy = grad_scores[m];
            if gy == 0.0 {
                continue;
            }
            let s = &cache.sims[m];
            let a = &cache.weights[m];
            let y = a.dot(s);
            for n in 0..self.n_proxy {
                // d y_m / d s_{m,n} = a_n (1 + s_n - y_m)
                let gs = gy * a[n] * (1.0 + s[n] - y);
                grads.proxies[m].row_mut(n).scaled_add(gs, &cache.unit);
                g_unit.scaled_add(gs, &p.row(n));
            }
        }
        let denom = cache.norm + NORM_EPS;
        if cache.norm > 0.0 {
            let proj = embedding.dot(&g_unit);
            &g_unit / denom - &embedding * (proj / (cache.norm * denom * denom))
        } else {
            g_unit / denom
        }
    }
}

/// Hinged NCA loss with margin over LSC scores,
/// `[−log(exp(η(ŷ_y − δ)) / Σ_{i≠y} exp(η ŷ_i))]_+`.
///
/// Returns the loss, its gradient w.r.t. the scores and w.r.t. `η`. With a
/// single class the denominator is empty and the loss is zero.
pub fn nca_loss(scores: ArrayView1<f64>, label_index: usize, eta: f64, delta: f64) -> Result<(f64, Array1<f64>, f64)> {
    let n = scores.len();
    if label_index >= n {
        return Err(Error::OutOfRange(format!("label index {label_index} with {n} classes")));
    }
    let mut grad = Array1::zeros(n);
    if n == 1 {
        return Ok((0.0, grad, 0.0));
    }
    let pos = eta * (scores[label_index] - delta);
    let max = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_index)
        .map(|(_, &s)| eta * s)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_index)
        .map(|(_, &s)| (eta * s - max).exp())
        .sum();
    let lse = max + sum.ln();
    let raw = lse - pos;
    if raw <= 0.0 {
        return Ok((0.0, grad, 0.0));
    }
    let mut g_eta = -(scores[label_index] - delta);
    for (i, &s) in scores.iter().enumerate() {
        if i == label_index {
            grad[i] = -eta;
        } else {
            let p = (eta * s - lse).exp();
            grad[i] = eta * p;
            g_eta += p * s;
        }
    }
    Ok((raw, grad, g_eta))
}
