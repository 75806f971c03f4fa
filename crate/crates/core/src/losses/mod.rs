//! Distillation, orthogonality and combined training objectives.
//!
//! Every loss comes in a value-only form and a `*_with_grad` form returning
//! the gradient w.r.t. the current model's features. Previous-model features
//! are constants.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceMask;
use crate::model::head::NORM_EPS;
use crate::model::FeatureStack;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the intermediate-feature distillation term.
    pub alpha_feat: f64,
    /// Weight of the embedding distillation term.
    pub alpha_embed: f64,
    /// Weight of the orthogonality term.
    pub beta: f64,
    /// Adaptive factor applied to both distillation weights.
    pub lambda_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_feat: 1.0,
            alpha_embed: 0.01,
            beta: 0.1,
            lambda_scale: 1.0,
        }
    }
}

impl LossWeights {
    /// Weights for step `k ≥ 1`, with `λ = sqrt(seen / new)`.
    pub fn for_step(self, seen_classes: usize, new_classes: usize) -> Self {
        Self {
            lambda_scale: adaptive_lambda(seen_classes, new_classes),
            ..self
        }
    }

    /// Weights for the initial stage: no previous model, so both
    /// distillation terms are inert.
    pub fn initial(self) -> Self {
        Self {
            alpha_feat: 0.0,
            alpha_embed: 0.0,
            lambda_scale: 1.0,
            ..self
        }
    }

    pub fn feat_weight(&self) -> f64 {
        self.lambda_scale * self.alpha_feat
    }

    pub fn embed_weight(&self) -> f64 {
        self.lambda_scale * self.alpha_embed
    }
}

/// `sqrt(|C_{1:k}| / |C_k|)`.
pub fn adaptive_lambda(seen_classes: usize, new_classes: usize) -> f64 {
    (seen_classes as f64 / new_classes as f64).sqrt()
}

fn check_layers(current: &[Array4<f64>], previous: &[Array4<f64>]) -> Result<()> {
    if current.len() != previous.len() {
        return Err(Error::Shape(format!(
            "feature stacks have {} and {} layers",
            current.len(),
            previous.len()
        )));
    }
    for (l, (a, b)) in current.iter().zip(previous).enumerate() {
        if a.dim() != b.dim() {
            return Err(Error::Shape(format!("layer {l}: {:?} vs {:?}", a.dim(), b.dim())));
        }
    }
    Ok(())
}

fn check_mask(current: &[Array4<f64>], mask: &[Array2<f64>]) -> Result<()> {
    if mask.len() != current.len() {
        return Err(Error::Shape(format!(
            "mask has {} layers, features have {}",
            mask.len(),
            current.len()
        )));
    }
    for (l, (f, m)) in current.iter().zip(mask).enumerate() {
        let (t, c, _, _) = f.dim();
        if m.dim() != (t, c) {
            return Err(Error::Shape(format!("layer {l}: mask {:?} vs features T×C = {:?}", m.dim(), (t, c))));
        }
    }
    Ok(())
}

/// `Σ_l Σ_t Σ_c w[l][t][c] · ‖cur − prev‖²_F`, with `w ≡ 1` when no weights
/// are given. Both variants share this summation order.
fn feature_distillation(
    current: &[Array4<f64>],
    previous: &[Array4<f64>],
    weights: Option<&[Array2<f64>]>,
    want_grad: bool,
) -> (f64, Vec<Array4<f64>>) {
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (l, (cur, prev)) in current.iter().zip(previous).enumerate() {
        let (t_len, c_len, _, _) = cur.dim();
        let mut grad = if want_grad {
            Array4::zeros(cur.raw_dim())
        } else {
            Array4::zeros((0, 0, 0, 0))
        };
        for t in 0..t_len {
            for c in 0..c_len {
                let w = weights.map_or(1.0, |m| m[l][[t, c]]);
                let a = cur.slice(ndarray::s![t, c, .., ..]);
                let b = prev.slice(ndarray::s![t, c, .., ..]);
                let sq: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                total += w * sq;
                if want_grad {
                    let mut g = grad.slice_mut(ndarray::s![t, c, .., ..]);
                    ndarray::Zip::from(&mut g)
                        .and(&a)
                        .and(&b)
                        .for_each(|g, &x, &y| *g = 2.0 * w * (x - y));
                }
            }
        }
        if want_grad {
            grads.push(grad);
        }
    }
    (total, grads)
}

/// Importance-weighted feature distillation using the normalized mask.
pub fn distillation_loss(current: &FeatureStack, previous: &FeatureStack, mask: &ImportanceMask) -> Result<f64> {
    Ok(distillation_loss_with_grad(current, previous, mask, false)?.0)
}

pub fn distillation_loss_with_grad(
    current: &FeatureStack,
    previous: &FeatureStack,
    mask: &ImportanceMask,
    want_grad: bool,
) -> Result<(f64, Vec<Array4<f64>>)> {
    check_layers(&current.layers, &previous.layers)?;
    check_mask(&current.layers, &mask.normalized)?;
    Ok(feature_distillation(
        &current.layers,
        &previous.layers,
        Some(&mask.normalized),
        want_grad,
    ))
}

/// Feature distillation without importance weights.
pub fn unweighted_distillation_loss(current: &FeatureStack, previous: &FeatureStack) -> Result<f64> {
    Ok(unweighted_distillation_loss_with_grad(current, previous, false)?.0)
}

pub fn unweighted_distillation_loss_with_grad(
    current: &FeatureStack,
    previous: &FeatureStack,
    want_grad: bool,
) -> Result<(f64, Vec<Array4<f64>>)> {
    check_layers(&current.layers, &previous.layers)?;
    Ok(feature_distillation(&current.layers, &previous.layers, None, want_grad))
}

/// Frame orthogonality for one `[T × C × H × W]` layer:
/// `Σ_c ‖I_T − F′F′ᵀ‖²_F` with the rows of `F′` the ℓ2-normalized frames
/// of channel `c`. Rows are divided by `max(‖row‖, ε)`, so rows that are
/// already unit length pass through unchanged.
fn layer_orthogonality(f: ArrayView4<f64>, want_grad: bool) -> (f64, Option<Array4<f64>>) {
    let (t_len, c_len, h, w) = f.dim();
    let p = h * w;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Array4::zeros(f.raw_dim()));
    for c in 0..c_len {
        let rows = Array2::from_shape_fn((t_len, p), |(t, i)| f[[t, c, i / w, i % w]]);
        let norms: Array1<f64> = rows.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut unit = rows.clone();
        for (mut r, &n) in unit.rows_mut().into_iter().zip(&norms) {
            r.mapv_inplace(|v| v / n.max(NORM_EPS));
        }
        let gram = unit.dot(&unit.t());
        let mut resid = gram;
        for t in 0..t_len {
            resid[[t, t]] -= 1.0;
        }
        total += resid.iter().map(|v| v * v).sum::<f64>();
        if let Some(grad) = grad.as_mut() {
            // dL/dU = 4 (G − I) U
            let g_unit = resid.dot(&unit) * 4.0;
            for t in 0..t_len {
                let n = norms[t];
                let denom = n.max(NORM_EPS);
                let r = rows.row(t);
                let gu = g_unit.row(t);
                let proj = if n > NORM_EPS { r.dot(&gu) / (n * n * n) } else { 0.0 };
                for i in 0..p {
                    grad[[t, c, i / w, i % w]] = gu[i] / denom - r[i] * proj;
                }
            }
        }
    }
    (total, grad)
}

pub fn orthogonality_loss(current: &FeatureStack) -> f64 {
    orthogonality_loss_with_grad(current, false).0
}

pub fn orthogonality_loss_with_grad(current: &FeatureStack, want_grad: bool) -> (f64, Vec<Array4<f64>>) {
    let mut total = 0.0;
    let mut grads = Vec::new();
    for layer in &current.layers {
        let (v, g) = layer_orthogonality(layer.view(), want_grad);
        total += v;
        grads.extend(g);
    }
    (total, grads)
}

/// Squared Euclidean distance between current and previous embeddings.
pub fn embedding_distillation_loss(current: ArrayView1<f64>, previous: ArrayView1<f64>) -> Result<f64> {
    Ok(embedding_distillation_loss_with_grad(current, previous)?.0)
}

pub fn embedding_distillation_loss_with_grad(
    current: ArrayView1<f64>,
    previous: ArrayView1<f64>,
) -> Result<(f64, Array1<f64>)> {
    if current.len() != previous.len() {
        return Err(Error::Shape(format!(
            "embeddings of dimension {} and {}",
            current.len(),
            previous.len()
        )));
    }
    let diff = &current - &previous;
    Ok((diff.dot(&diff), diff * 2.0))
}

/// Per-sample values of the objective's terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub dist_feat: f64,
    pub dist_embed: f64,
    pub ortho: f64,
}

impl LossComponents {
    pub fn add(&mut self, other: &LossComponents) {
        self.cls += other.cls;
        self.dist_feat += other.dist_feat;
        self.dist_embed += other.dist_embed;
        self.ortho += other.ortho;
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            cls: self.cls * factor,
            dist_feat: self.dist_feat * factor,
            dist_embed: self.dist_embed * factor,
            ortho: self.ortho * factor,
        }
    }
}

/// `cls + λ·α_feat·dist_feat + λ·α_embed·dist_embed + β·ortho`.
pub fn total_loss(cls: f64, dist_feat: f64, dist_embed: f64, ortho: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("cls", cls), ("dist_feat", dist_feat), ("dist_embed", dist_embed), ("ortho", ortho)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
    }
    Ok(cls + w.feat_weight() * dist_feat + w.embed_weight() * dist_embed + w.beta * ortho)
}

/// Which regularizers an objective uses beyond the classification loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distillation<'a> {
    None,
    Unweighted,
    Weighted(&'a ImportanceMask),
}

/// Value of the non-classification part of the objective together with its
/// gradient w.r.t. the current layers and embedding.
#[derive(Debug, Clone)]
pub struct RegularizerGrad {
    pub components: LossComponents,
    pub layers: Vec<Array4<f64>>,
    pub embedding: Array1<f64>,
}

/// Evaluates the distillation and orthogonality terms for one sample and
/// accumulates their weighted gradients. `previous` must be given whenever
/// distillation is active.
pub fn regularizers(
    current: &FeatureStack,
    previous: Option<&FeatureStack>,
    distillation: Distillation<'_>,
    w: &LossWeights,
) -> Result<RegularizerGrad> {
    let mut components = LossComponents::default();
    let mut layers: Vec<Array4<f64>> = current.layers.iter().map(|l| Array4::zeros(l.raw_dim())).collect();
    let mut embedding = Array1::zeros(current.embedding.len());

    if distillation != Distillation::None {
        let prev = previous.ok_or_else(|| Error::Config("distillation requires a previous model".into()))?;
        let (v, g) = match distillation {
            Distillation::Weighted(mask) => distillation_loss_with_grad(current, prev, mask, true)?,
            _ => unweighted_distillation_loss_with_grad(current, prev, true)?,
        };
        components.dist_feat = v;
        for (acc, g) in layers.iter_mut().zip(&g) {
            acc.scaled_add(w.feat_weight(), g);
        }
        let (v, g) = embedding_distillation_loss_with_grad(current.embedding.view(), prev.embedding.view())?;
        components.dist_embed = v;
        embedding.scaled_add(w.embed_weight(), &g);
    }
    if w.beta != 0.0 {
        let (v, g) = orthogonality_loss_with_grad(current, true);
        components.ortho = v;
        for (acc, g) in layers.iter_mut().zip(&g) {
            acc.scaled_add(w.beta, g);
        }
    }
    Ok(RegularizerGrad {
        components,
        layers,
        embedding,
    })
}
