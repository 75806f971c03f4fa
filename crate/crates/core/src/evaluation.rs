//! CNN-head and nearest-mean-of-exemplars evaluation, incremental accuracy
//! aggregation and report emission.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossComponents;
use crate::memory::{eval_view, ExemplarMemory};
use crate::model::head::unit_vector;
use crate::model::TemporalModel;
use crate::parallel::map_ordered;
use crate::task_data::{ClassId, VideoSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Cnn,
    Nme,
}

impl Protocol {
    pub const ALL: [Protocol; 2] = [Protocol::Cnn, Protocol::Nme];
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cnn => "cnn",
            Self::Nme => "nme",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Self::Cnn),
            "nme" => Ok(Self::Nme),
            other => Err(Error::Config(format!("unknown protocol `{other}` (allowed: cnn, nme)"))),
        }
    }
}

/// Top-1 accuracy in percent, overall and per true class.
#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy {
    pub overall: f64,
    pub per_class: BTreeMap<ClassId, f64>,
    pub predictions: Vec<ClassId>,
}

fn tally(labels: &[ClassId], predictions: Vec<ClassId>) -> Accuracy {
    let mut counts: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (&y, &p) in labels.iter().zip(&predictions) {
        let e = counts.entry(y).or_default();
        e.1 += 1;
        if y == p {
            e.0 += 1;
            correct += 1;
        }
    }
    Accuracy {
        overall: 100.0 * correct as f64 / labels.len() as f64,
        per_class: counts
            .into_iter()
            .map(|(c, (ok, n))| (c, 100.0 * ok as f64 / n as f64))
            .collect(),
        predictions,
    }
}

/// Index of the maximum; ties resolve to the first candidate. Candidates are
/// passed in ascending class id.
fn argmax_first(values: impl IntoIterator<Item = (ClassId, f64)>) -> Option<ClassId> {
    let mut best: Option<(ClassId, f64)> = None;
    for (c, v) in values {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((c, v));
        }
    }
    best.map(|(c, _)| c)
}

/// Accuracy of the classifier head with the argmax restricted to `seen`.
pub fn evaluate_cnn(model: &TemporalModel, test: &[VideoSample], seen: &[ClassId]) -> Result<Accuracy> {
    if test.is_empty() {
        return Err(Error::Empty("CNN evaluation on an empty test set".into()));
    }
    let mut candidates = Vec::with_capacity(seen.len());
    for &c in seen {
        candidates.push((c, model.label_index(c)?));
    }
    candidates.sort_unstable();
    let t = model.config().t;
    let predictions = map_ordered(test, |s| -> Result<ClassId> {
        let v = eval_view(s, t)?;
        let scores = model.features(v.frames.view())?.scores;
        argmax_first(candidates.iter().map(|&(c, i)| (c, scores[i])))
            .ok_or_else(|| Error::Empty("no seen classes".into()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    for p in &predictions {
        assert!(seen.contains(p), "prediction {p} outside the seen classes");
    }
    let labels: Vec<ClassId> = test.iter().map(|s| s.label).collect();
    Ok(tally(&labels, predictions))
}

/// Nearest class mean on unit-normalized embeddings; equal distances go to
/// the lower class id.
pub fn nme_predict(embedding: &Array1<f64>, means: &BTreeMap<ClassId, Array1<f64>>) -> Option<ClassId> {
    let e = unit_vector(embedding.view());
    argmax_first(means.iter().map(|(&c, m)| {
        let d = &e - m;
        (c, -d.dot(&d))
    }))
}

pub fn nme_accuracy_from_embeddings(
    embeddings: &[Array1<f64>],
    labels: &[ClassId],
    means: &BTreeMap<ClassId, Array1<f64>>,
) -> Result<Accuracy> {
    if embeddings.is_empty() {
        return Err(Error::Empty("NME evaluation on an empty test set".into()));
    }
    for y in labels {
        if !means.contains_key(y) {
            return Err(Error::Empty(format!("no exemplar mean for class {y}")));
        }
    }
    let predictions = embeddings
        .iter()
        .map(|e| nme_predict(e, means).expect("means nonempty"))
        .collect();
    Ok(tally(labels, predictions))
}

pub fn evaluate_nme(model: &TemporalModel, memory: &ExemplarMemory, test: &[VideoSample]) -> Result<Accuracy> {
    let means = memory.class_means(model)?;
    let t = model.config().t;
    let embeddings = map_ordered(test, |s| -> Result<Array1<f64>> {
        let v = eval_view(s, t)?;
        model.embed(v.frames.view())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let labels: Vec<ClassId> = test.iter().map(|s| s.label).collect();
    nme_accuracy_from_embeddings(&embeddings, &labels, &means)
}

/// Contents of `metrics.json` for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub seen_class_count: usize,
    pub seen_classes: Vec<ClassId>,
    pub acc_cnn: f64,
    pub acc_nme: f64,
    /// CNN accuracy per class.
    pub per_class: BTreeMap<ClassId, f64>,
    pub per_class_nme: BTreeMap<ClassId, f64>,
    /// Final-epoch averages of the objective's terms.
    pub losses: LossComponents,
}

impl MetricsRecord {
    pub fn accuracy(&self, protocol: Protocol) -> f64 {
        match protocol {
            Protocol::Cnn => self.acc_cnn,
            Protocol::Nme => self.acc_nme,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Mean accuracy over the stages. With `include_initial == false` the
/// initial stage is left out.
pub fn average_incremental_accuracy(records: &[MetricsRecord], protocol: Protocol, include_initial: bool) -> Result<f64> {
    let skip = usize::from(!include_initial);
    let values: Vec<f64> = records.iter().skip(skip).map(|r| r.accuracy(protocol)).collect();
    if values.is_empty() {
        return Err(Error::Empty("no stages to average".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// `run.json` in every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    /// Row label in reports: the method, or the sweep point.
    pub label: String,
    pub method: String,
    pub seed: u64,
    pub n_stages: usize,
    pub include_initial_stage: bool,
}

impl RunInfo {
    pub const FILE: &'static str = "run.json";

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(Self::FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn stage_dir(run_dir: &Path, stage: usize) -> PathBuf {
    run_dir.join(format!("stage_{stage}"))
}

/// Loads every stage's metrics, failing with the list of missing stages.
pub fn load_run_metrics(run_dir: &Path) -> Result<(RunInfo, Vec<MetricsRecord>)> {
    let info = RunInfo::load(run_dir)?;
    let mut missing = Vec::new();
    let mut records = Vec::new();
    for k in 0..info.n_stages {
        let path = stage_dir(run_dir, k).join("metrics.json");
        if path.is_file() {
            records.push(MetricsRecord::load(&path)?);
        } else {
            missing.push(k);
        }
    }
    if !missing.is_empty() {
        return Err(Error::Empty(format!(
            "{} is missing metrics for stages {missing:?}",
            run_dir.display()
        )));
    }
    Ok((info, records))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub protocol: Protocol,
    /// `None` for the mean over seeds.
    pub seed: Option<u64>,
    pub avg_inc_acc: f64,
    pub final_step_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<SummaryRow>,
    pub csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

impl Report {
    pub fn mean(&self, label: &str, protocol: Protocol) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.label == label && r.protocol == protocol && r.seed.is_none())
    }
}

pub const SUMMARY_HEADER: &str = "method,protocol,seed,avg_inc_acc,final_step_acc";

/// Writes `summary.csv` and one accuracy-vs-step SVG per protocol into
/// `out_dir`, aggregating the given run directories by label.
pub fn emit_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(Error::Empty("no run directories to report".into()));
    }
    // label → seed → records
    let mut runs: BTreeMap<String, BTreeMap<u64, (RunInfo, Vec<MetricsRecord>)>> = BTreeMap::new();
    for dir in run_dirs {
        let (info, records) = load_run_metrics(dir)?;
        runs.entry(info.label.clone()).or_default().insert(info.seed, (info, records));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rows = Vec::new();
    let mut curves: BTreeMap<Protocol, Vec<(String, Vec<f64>)>> = BTreeMap::new();
    for (label, seeds) in &runs {
        for protocol in Protocol::ALL {
            let mut per_seed = Vec::new();
            for (&seed, (info, records)) in seeds {
                let avg = average_incremental_accuracy(records, protocol, info.include_initial_stage)?;
                let last = records.last().expect("nonempty").accuracy(protocol);
                per_seed.push(SummaryRow {
                    label: label.clone(),
                    protocol,
                    seed: Some(seed),
                    avg_inc_acc: avg,
                    final_step_acc: last,
                });
            }
            let n = per_seed.len() as f64;
            let mean = SummaryRow {
                label: label.clone(),
                protocol,
                seed: None,
                avg_inc_acc: per_seed.iter().map(|r| r.avg_inc_acc).sum::<f64>() / n,
                final_step_acc: per_seed.iter().map(|r| r.final_step_acc).sum::<f64>() / n,
            };
            let n_stages = seeds.values().map(|(_, r)| r.len()).min().unwrap_or(0);
            let curve = (0..n_stages)
                .map(|k| seeds.values().map(|(_, r)| r[k].accuracy(protocol)).sum::<f64>() / n)
                .collect();
            curves.entry(protocol).or_default().push((label.clone(), curve));
            rows.extend(per_seed);
            rows.push(mean);
        }
    }

    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    for r in &rows {
        let seed = r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
        writeln!(csv, "{},{},{},{:.4},{:.4}", r.label, r.protocol, seed, r.avg_inc_acc, r.final_step_acc).expect("string write");
    }
    let csv_path = out_dir.join("summary.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let mut plots = Vec::new();
    for (protocol, series) in &curves {
        let path = out_dir.join(format!("accuracy_{protocol}.svg"));
        fs::write(&path, accuracy_svg(&format!("{} accuracy", protocol.to_string().to_uppercase()), series))
            .map_err(|e| Error::io(&path, e))?;
        plots.push(path);
    }
    Ok(Report {
        rows,
        csv: csv_path,
        plots,
    })
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Accuracy-vs-step line chart.
fn accuracy_svg(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 160.0, 40.0, 50.0);
    let steps = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(1);
    let x_of = |k: usize| {
        if steps == 1 {
            left + (w - left - right) / 2.0
        } else {
            left + (w - left - right) * k as f64 / (steps - 1) as f64
        }
    };
    let y_of = |acc: f64| top + (h - top - bottom) * (1.0 - acc / 100.0);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{title}</text>"#, (w - right + left) / 2.0).unwrap();
    for tick in (0..=100).step_by(20) {
        let y = y_of(tick as f64);
        writeln!(s, r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, w - right).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{tick}</text>"#, left - 6.0, y + 4.0).unwrap();
    }
    for k in 0..steps {
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{k}</text>"#, x_of(k), h - bottom + 18.0).unwrap();
    }
    writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">incremental step</text>"#, (w - right + left) / 2.0, h - 10.0).unwrap();
    for (i, (label, values)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(k, &a)| format!("{:.1},{:.1}", x_of(k), y_of(a)))
            .collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" ")).unwrap();
        for p in &points {
            let (x, y) = p.split_once(',').expect("formatted pair");
            writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#).unwrap();
        }
        let ly = top + 18.0 * i as f64;
        writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="12" height="3" fill="{color}"/>"#, w - right + 12.0, ly).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}">{label}</text>"#, w - right + 30.0, ly + 5.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests;
