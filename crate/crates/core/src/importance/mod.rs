//! Time-channel importance from gradient sensitivity.
//!
//! For each observation layer `l`, the raw importance of `(t, c)` is the
//! average over the accessible samples of `‖∂L_cls/∂F^l_{t,c}‖²_F` under the
//! previous model. The normalized mask divides each layer by its mean so all
//! layers share the same scale.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::model::TemporalModel;
use crate::parallel::{compensated_sum, map_ordered};
use crate::task_data::VideoSample;

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMask {
    /// Per layer `[T × C_l]`, nonnegative.
    pub raw: Vec<Array2<f64>>,
    /// Per layer `[T × C_l]` with unit mean.
    pub normalized: Vec<Array2<f64>>,
    pub step: usize,
    pub sample_count: usize,
    pub layer_names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskMeta {
    step: usize,
    sample_count: usize,
    layer_names: Vec<String>,
}

/// Anything that can report the classification-loss gradient w.r.t. each of
/// its observation layers for a labeled clip.
pub trait LayerSensitivity: Sync {
    fn layer_names(&self) -> Vec<String>;
    fn loss_layer_gradients(&self, sample: &VideoSample) -> Result<Vec<Array4<f64>>>;
}

impl LayerSensitivity for TemporalModel {
    fn layer_names(&self) -> Vec<String> {
        self.config().layer_names()
    }

    fn loss_layer_gradients(&self, sample: &VideoSample) -> Result<Vec<Array4<f64>>> {
        Ok(self.classification_gradients(sample.frames.view(), sample.label)?.1.layers)
    }
}

/// `‖g[t, c, :, :]‖²_F` for every `(t, c)`.
fn squared_slice_norms(grad: &Array4<f64>) -> Array2<f64> {
    let (t, c, _, _) = grad.dim();
    Array2::from_shape_fn((t, c), |(ti, ci)| {
        grad.slice(ndarray::s![ti, ci, .., ..]).iter().map(|v| v * v).sum()
    })
}

/// Raw importance averaged over `samples`. Per-sample gradients are taken
/// independently and their squared norms averaged.
pub fn compute_raw_importance<M: LayerSensitivity>(model: &M, samples: &[VideoSample]) -> Result<Vec<Array2<f64>>> {
    if samples.is_empty() {
        return Err(Error::Empty("importance needs at least one accessible sample".into()));
    }
    let names = model.layer_names();
    let per_sample: Vec<Result<Vec<Array2<f64>>>> = map_ordered(samples, |s| {
        let grads = model.loss_layer_gradients(s)?;
        grads
            .iter()
            .enumerate()
            .map(|(l, g)| {
                if let Some(((t, c, _, _), _)) = g.indexed_iter().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of layer {} at t={t}, c={c} (sample {})",
                        names.get(l).map_or("?", String::as_str),
                        s.id
                    )));
                }
                Ok(squared_slice_norms(g))
            })
            .collect()
    });
    let per_sample: Vec<Vec<Array2<f64>>> = per_sample.into_iter().collect::<Result<_>>()?;
    let n = per_sample.len() as f64;
    let first = &per_sample[0];
    Ok((0..first.len())
        .map(|l| {
            Array2::from_shape_fn(first[l].raw_dim(), |idx| {
                compensated_sum(per_sample.iter().map(|s| s[l][idx])) / n
            })
        })
        .collect())
}

/// Divides each layer by its mean. An all-zero layer becomes all ones.
pub fn normalize_importance(raw: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    raw.iter()
        .enumerate()
        .map(|(l, m)| {
            if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::NonFinite(format!("raw importance of layer {l} must be finite and nonnegative")));
            }
            let mean = compensated_sum(m.iter().copied()) / m.len() as f64;
            if mean <= f64::MIN_POSITIVE {
                log::warn!("importance of layer {l} is identically zero; using uniform weights");
                return Ok(Array2::ones(m.raw_dim()));
            }
            Ok(m.mapv(|v| v / mean))
        })
        .collect()
}

/// Computes the mask for step `step` from the model trained at the previous
/// step over the accessible samples.
pub fn compute_importance<M: LayerSensitivity>(model: &M, samples: &[VideoSample], step: usize) -> Result<ImportanceMask> {
    let raw = compute_raw_importance(model, samples)?;
    ImportanceMask::from_raw(raw, step, samples.len(), model.layer_names())
}

impl ImportanceMask {
    pub fn from_raw(raw: Vec<Array2<f64>>, step: usize, sample_count: usize, layer_names: Vec<String>) -> Result<Self> {
        if layer_names.len() != raw.len() {
            return Err(Error::Shape(format!(
                "{} layer names for {} layers",
                layer_names.len(),
                raw.len()
            )));
        }
        let normalized = normalize_importance(&raw)?;
        Ok(Self {
            raw,
            normalized,
            step,
            sample_count,
            layer_names,
        })
    }

    /// Uniform mask (every weight 1) for the given `[T × C_l]` shapes.
    pub fn uniform(shapes: &[(usize, usize)], step: usize, layer_names: Vec<String>) -> Result<Self> {
        let raw = shapes.iter().map(|&s| Array2::ones(s)).collect();
        Self::from_raw(raw, step, 0, layer_names)
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let meta = MaskMeta {
            step: self.step,
            sample_count: self.sample_count,
            layer_names: self.layer_names.clone(),
        };
        let mut archive = TensorArchive::new(serde_json::to_value(meta)?);
        for (name, (r, n)) in self.layer_names.iter().zip(self.raw.iter().zip(&self.normalized)) {
            archive.insert(format!("raw.{name}"), r.shape(), r.as_slice().expect("contiguous"))?;
            archive.insert(format!("normalized.{name}"), n.shape(), n.as_slice().expect("contiguous"))?;
        }
        Ok(archive)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let meta: MaskMeta = serde_json::from_value(archive.meta.clone())?;
        let load = |key: String| -> Result<Array2<f64>> {
            let (shape, values) = archive.get(&key)?;
            if shape.len() != 2 {
                return Err(Error::Archive(format!("`{key}` is not a matrix")));
            }
            Array2::from_shape_vec((shape[0], shape[1]), values).map_err(|e| Error::Archive(e.to_string()))
        };
        let mut raw = Vec::new();
        let mut normalized = Vec::new();
        for name in &meta.layer_names {
            raw.push(load(format!("raw.{name}"))?);
            normalized.push(load(format!("normalized.{name}"))?);
        }
        Ok(Self {
            raw,
            normalized,
            step: meta.step,
            sample_count: meta.sample_count,
            layer_names: meta.layer_names,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }

    /// FNV digest of the normalized weights.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.normalized.iter().flat_map(|m| m.iter()) {
            h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapFiles {
    pub png: PathBuf,
    pub csv: PathBuf,
}

/// Pixels per heatmap cell.
const CELL: u32 = 12;

/// Writes `<stem>.png` (T rows × |channels| columns, brighter = larger
/// normalized importance) and `<stem>.csv` with header `t,c,value`.
pub fn export_heatmap(mask: &ImportanceMask, layer: usize, channels: Range<usize>, stem: &Path) -> Result<HeatmapFiles> {
    let m = mask
        .normalized
        .get(layer)
        .ok_or_else(|| Error::OutOfRange(format!("layer {layer} of {}", mask.normalized.len())))?;
    let (t_len, c_len) = m.dim();
    if channels.is_empty() || channels.end > c_len {
        return Err(Error::OutOfRange(format!(
            "channel range {channels:?} for a layer with {c_len} channels"
        )));
    }

    let mut csv = String::from("t,c,value\n");
    for t in 0..t_len {
        for c in channels.clone() {
            writeln!(csv, "{t},{c},{:.16e}", m[[t, c]]).expect("write to string");
        }
    }
    let csv_path = stem.with_extension("csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let max = channels
        .clone()
        .flat_map(|c| (0..t_len).map(move |t| m[[t, c]]))
        .fold(0.0f64, f64::max);
    let width = channels.len() as u32 * CELL;
    let height = t_len as u32 * CELL;
    let first = channels.start;
    let img = image::GrayImage::from_fn(width, height, |x, y| {
        let (t, c) = ((y / CELL) as usize, first + (x / CELL) as usize);
        let v = if max > 0.0 { m[[t, c]] / max } else { 1.0 };
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    let png_path = stem.with_extension("png");
    img.save(&png_path).map_err(|e| Error::Image(e.to_string()))?;
    Ok(HeatmapFiles {
        png: png_path,
        csv: csv_path,
    })
}

/// Reads a heatmap CSV back as `(t, c, value)` triples.
pub fn read_heatmap_csv(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "t,c,value")) => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "expected header `t,c,value`".into(),
            })
        }
    }
    lines
        .map(|(i, line)| {
            let err = |m: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: m.to_string(),
            };
            let mut it = line.split(',');
            let t = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| err("bad t"))?;
            let c = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| err("bad c"))?;
            let v = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| err("bad value"))?;
            Ok((t, c, v))
        })
        .collect()
}
