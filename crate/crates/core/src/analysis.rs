//! Evaluation and feature diagnostics: confusion-based IOU, per-class feature
//! Gaussians, their Monte-Carlo overlap, cosine relationship matrices and
//! heatmap rendering.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};

use crate::datagen::LabeledImage;
use crate::error::{Error, Result};
use crate::io;
use crate::label::{ClassId, LabelMap, IGNORE_ID};
use crate::model::ModelState;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Variance floor applied before sampling or evaluating densities.
pub const COVARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// `TP / (TP + FP + FN)` per class; a class never seen nor predicted scores 1.
    pub per_class_iou: Vec<f64>,
    /// Whether each class occurs in the ground truth.
    pub present: Vec<bool>,
    /// Mean IOU over classes present in the ground truth.
    pub miou: f64,
    /// `confusion[truth][prediction]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let c = confusion.len();
        if c == 0 || confusion.iter().any(|r| r.len() != c) {
            return Err(Error::dim("confusion matrix must be square and non-empty"));
        }
        let mut per_class_iou = Vec::with_capacity(c);
        let mut present = Vec::with_capacity(c);
        for k in 0..c {
            let tp = confusion[k][k];
            let row: u64 = confusion[k].iter().sum();
            let col: u64 = confusion.iter().map(|r| r[k]).sum();
            let union = row + col - tp;
            per_class_iou.push(if union == 0 { 1.0 } else { tp as f64 / union as f64 });
            present.push(row > 0);
        }
        let n_present = present.iter().filter(|&&p| p).count();
        if n_present == 0 {
            return Err(Error::invalid("no labelled pixels to evaluate"));
        }
        let miou = per_class_iou.iter().zip(&present).filter(|(_, &p)| p).map(|(v, _)| v).sum::<f64>() / n_present as f64;
        Ok(Self { per_class_iou, present, miou, confusion })
    }
}

/// Per-pixel argmax over the class axis of `[N, C, H, W]` logits; ties go to
/// the lower class id.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<LabelMap>> {
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    let data = logits.data();
    (0..n)
        .map(|i| {
            let values = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if data[(i * c + k) * plane + p] > data[(i * c + best) * plane + p] {
                            best = k;
                        }
                    }
                    best as ClassId
                })
                .collect();
            LabelMap::new(h, w, values)
        })
        .collect()
}

/// Adds one prediction/truth pair into `confusion`; ignore pixels are skipped.
pub fn accumulate_confusion(confusion: &mut [Vec<u64>], prediction: &LabelMap, truth: &LabelMap) -> Result<()> {
    if prediction.height() != truth.height() || prediction.width() != truth.width() {
        return Err(Error::dim("prediction and truth sizes differ"));
    }
    let c = confusion.len();
    for (&p, &t) in prediction.values().iter().zip(truth.values()) {
        if t == IGNORE_ID {
            continue;
        }
        if t as usize >= c || p as usize >= c {
            return Err(Error::invalid(format!("class id {} outside 0..{c}", t.max(p))));
        }
        confusion[t as usize][p as usize] += 1;
    }
    Ok(())
}

pub fn predict(state: &ModelState, image: &Tensor) -> Result<LabelMap> {
    let batch = image.clone().reshape([&[1], image.shape()].concat())?;
    let inference = state.infer(&batch)?;
    Ok(argmax_labels(&inference.logits)?.remove(0))
}

/// Confusion and IOU of the model's argmax predictions over a labelled split.
pub fn evaluate(state: &ModelState, split: &[LabeledImage]) -> Result<Metrics> {
    if split.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let c = state.config().num_classes;
    let mut confusion = vec![vec![0u64; c]; c];
    for sample in split {
        let prediction = predict(state, &sample.image)?;
        accumulate_confusion(&mut confusion, &prediction, &sample.labels)?;
    }
    Metrics::from_confusion(confusion)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CovarianceKind {
    #[default]
    Diagonal,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    Diagonal(Vec<f64>),
    /// Row-major `F x F`.
    Full(Vec<f64>),
}

/// Mean and empirical (population) covariance of one class's features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassGaussian {
    pub class: ClassId,
    pub mean: Vec<f64>,
    pub covariance: Covariance,
    pub count: usize,
}

impl ClassGaussian {
    /// Fits to `samples`, each of length `F`.
    pub fn fit(class: ClassId, samples: &[Vec<f64>], kind: CovarianceKind) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid(format!("class {class} has no samples")))?;
        let f = first.len();
        if f == 0 || samples.iter().any(|s| s.len() != f) {
            return Err(Error::dim("feature samples must share a non-zero length"));
        }
        let n = samples.len() as f64;
        let mut mean = vec![0.0; f];
        for s in samples {
            mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let covariance = match kind {
            CovarianceKind::Diagonal => {
                let mut var = vec![0.0; f];
                for s in samples {
                    for j in 0..f {
                        var[j] += (s[j] - mean[j]).powi(2);
                    }
                }
                Covariance::Diagonal(var.into_iter().map(|v| v / n).collect())
            }
            CovarianceKind::Full => {
                let mut cov = vec![0.0; f * f];
                for s in samples {
                    for i in 0..f {
                        let di = s[i] - mean[i];
                        for j in i..f {
                            cov[i * f + j] += di * (s[j] - mean[j]);
                        }
                    }
                }
                for i in 0..f {
                    for j in i..f {
                        cov[i * f + j] /= n;
                        cov[j * f + i] = cov[i * f + j];
                    }
                }
                Covariance::Full(cov)
            }
        };
        Ok(Self { class, mean, covariance, count: samples.len() })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sampler(&self) -> Result<Sampler> {
        let f = self.dim();
        match &self.covariance {
            Covariance::Diagonal(var) => {
                let var: Vec<f64> = var.iter().map(|v| v.max(COVARIANCE_FLOOR)).collect();
                let log_det = var.iter().map(|v| v.ln()).sum();
                Ok(Sampler::Diagonal { std: var.iter().map(|v| v.sqrt()).collect(), inv: var.iter().map(|v| 1.0 / v).collect(), log_det })
            }
            Covariance::Full(cov) => {
                let mut cov = cov.clone();
                for i in 0..f {
                    cov[i * f + i] = cov[i * f + i].max(COVARIANCE_FLOOR);
                }
                let chol = cholesky(&cov, f).ok_or_else(|| {
                    Error::invalid(format!("covariance of class {} is degenerate after flooring", self.class))
                })?;
                let log_det = 2.0 * (0..f).map(|i| chol[i * f + i].ln()).sum::<f64>();
                Ok(Sampler::Full { chol, log_det })
            }
        }
    }
}

enum Sampler {
    Diagonal { std: Vec<f64>, inv: Vec<f64>, log_det: f64 },
    Full { chol: Vec<f64>, log_det: f64 },
}

impl Sampler {
    fn draw(&self, mean: &[f64], rng: &mut Rng, out: &mut [f64]) {
        let f = mean.len();
        let z: Vec<f64> = (0..f).map(|_| StandardNormal.sample(rng)).collect();
        match self {
            Sampler::Diagonal { std, .. } => {
                for j in 0..f {
                    out[j] = mean[j] + std[j] * z[j];
                }
            }
            Sampler::Full { chol, .. } => {
                for i in 0..f {
                    out[i] = mean[i] + (0..=i).map(|k| chol[i * f + k] * z[k]).sum::<f64>();
                }
            }
        }
    }

    /// Log density up to the shared `-F/2 ln(2 pi)` constant.
    fn log_density(&self, mean: &[f64], x: &[f64]) -> f64 {
        let f = mean.len();
        match self {
            Sampler::Diagonal { inv, log_det, .. } => {
                let q: f64 = (0..f).map(|j| (x[j] - mean[j]).powi(2) * inv[j]).sum();
                -0.5 * (q + log_det)
            }
            Sampler::Full { chol, log_det } => {
                let mut y = vec![0.0; f];
                for i in 0..f {
                    let s: f64 = (0..i).map(|k| chol[i * f + k] * y[k]).sum();
                    y[i] = (x[i] - mean[i] - s) / chol[i * f + i];
                }
                -0.5 * (y.iter().map(|v| v * v).sum::<f64>() + log_det)
            }
        }
    }
}

/// Lower Cholesky factor of a symmetric `n x n` matrix, `None` unless positive definite.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Monte-Carlo overlap `(r_A + r_B) / (2 - r_A - r_B)`, where `r_A` is the share
/// of draws from A whose density under B exceeds that under A. Exact density
/// ties count one half, so identical Gaussians score 1.
pub fn gaussian_iou(a: &ClassGaussian, b: &ClassGaussian, n_samples: usize, rng: &mut Rng) -> Result<f64> {
    if n_samples < 1000 {
        return Err(Error::invalid(format!("gaussian_iou needs at least 1000 samples, got {n_samples}")));
    }
    if a.dim() != b.dim() {
        return Err(Error::dim(format!("feature dims differ: {} vs {}", a.dim(), b.dim())));
    }
    let (sa, sb) = (a.sampler()?, b.sampler()?);
    let mut x = vec![0.0; a.dim()];
    let mut crossing = |from: &Sampler, from_mean: &[f64], other: &Sampler, other_mean: &[f64], rng: &mut Rng| {
        let mut score = 0.0;
        for _ in 0..n_samples {
            from.draw(from_mean, rng, &mut x);
            let own = from.log_density(from_mean, &x);
            let alt = other.log_density(other_mean, &x);
            if alt > own {
                score += 1.0;
            } else if alt == own {
                score += 0.5;
            }
        }
        score / n_samples as f64
    };
    let r_a = crossing(&sa, &a.mean, &sb, &b.mean, rng);
    let r_b = crossing(&sb, &b.mean, &sa, &a.mean, rng);
    let denom = 2.0 - r_a - r_b;
    Ok(if denom <= 0.0 { 1.0 } else { ((r_a + r_b) / denom).clamp(0.0, 1.0) })
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Per-class feature Gaussians with the cosine table of their means.
#[derive(Clone, Debug)]
pub struct FeatureStats {
    pub classes: Vec<ClassId>,
    /// `None` for a class with no assigned feature vectors.
    pub gaussians: Vec<Option<ClassGaussian>>,
    /// `cosines[i][j]` between the means of `classes[i]` and `classes[j]`.
    pub cosines: Vec<Vec<Option<f64>>>,
}

impl FeatureStats {
    pub fn gaussian(&self, class: ClassId) -> Option<&ClassGaussian> {
        let i = self.classes.iter().position(|&c| c == class)?;
        self.gaussians[i].as_ref()
    }

    pub fn cosine(&self, a: ClassId, b: ClassId) -> Option<f64> {
        let i = self.classes.iter().position(|&c| c == a)?;
        let j = self.classes.iter().position(|&c| c == b)?;
        self.cosines[i][j]
    }
}

/// Groups backbone feature vectors by ground-truth class, assigning pixels
/// through nearest down-sampling of the labels to feature resolution.
pub fn class_feature_stats(
    state: &ModelState,
    split: &[LabeledImage],
    classes: &[ClassId],
    kind: CovarianceKind,
) -> Result<FeatureStats> {
    let mut buckets: Vec<Vec<Vec<f64>>> = vec![Vec::new(); classes.len()];
    for sample in split {
        let batch = sample.image.clone().reshape([&[1], sample.image.shape()].concat())?;
        let features = state.infer(&batch)?.features;
        let (_, f, h, w) = features.dims4()?;
        let labels = sample.labels.resize_nearest(h, w);
        collect_features(&features, f, &labels, classes, &mut buckets);
    }
    let gaussians = classes
        .iter()
        .zip(&buckets)
        .map(|(&c, b)| if b.is_empty() { Ok(None) } else { ClassGaussian::fit(c, b, kind).map(Some) })
        .collect::<Result<Vec<_>>>()?;
    let cosines = gaussians
        .iter()
        .map(|a| {
            gaussians
                .iter()
                .map(|b| match (a, b) {
                    (Some(a), Some(b)) => cosine(&a.mean, &b.mean),
                    _ => None,
                })
                .collect()
        })
        .collect();
    Ok(FeatureStats { classes: classes.to_vec(), gaussians, cosines })
}

fn collect_features(features: &Tensor, f: usize, labels: &LabelMap, classes: &[ClassId], buckets: &mut [Vec<Vec<f64>>]) {
    let plane = labels.height() * labels.width();
    for (p, &c) in labels.values().iter().enumerate() {
        if let Some(slot) = classes.iter().position(|&k| k == c) {
            buckets[slot].push((0..f).map(|ch| features.data()[ch * plane + p]).collect());
        }
    }
}

/// Cosine similarity of every pair of rows.
pub fn relationship_matrix(vectors: &[Vec<f64>], names: &[String]) -> Result<Vec<Vec<f64>>> {
    let normed = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| i.to_string());
                return Err(Error::invalid(format!("class {name} has a zero vector")));
            }
            Ok(v.iter().map(|x| x / n).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    if normed.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(Error::dim("relationship rows must share one length"));
    }
    let c = normed.len();
    let mut m = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in i..c {
            let d: f64 = normed[i].iter().zip(&normed[j]).map(|(a, b)| a * b).sum();
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    Ok(m)
}

/// Pixels per matrix cell in rendered heatmaps.
pub const HEATMAP_CELL: usize = 16;

/// Row-major gray levels of a clipped matrix, one per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapLevels {
    pub gray: Vec<u8>,
    /// Smallest and largest clipped value.
    pub range: (f64, f64),
}

impl HeatmapLevels {
    /// Gray level of a clipped value; a constant matrix maps to mid gray.
    pub fn level(&self, v: f64) -> u8 {
        let (lo, hi) = self.range;
        if hi > lo {
            ((v.clamp(lo, hi) - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    }
}

/// Clips every entry to [-1, 1] and maps the smallest to 0 and the largest to 255.
pub fn heatmap_levels(matrix: &[Vec<f64>]) -> Result<HeatmapLevels> {
    if matrix.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heatmap entry".into()));
    }
    let clipped: Vec<f64> = matrix.iter().flatten().map(|v| v.clamp(-1.0, 1.0)).collect();
    let lo = clipped.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = clipped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut levels = HeatmapLevels { gray: Vec::new(), range: (lo, hi) };
    levels.gray = clipped.iter().map(|&v| levels.level(v)).collect();
    Ok(levels)
}

/// Paths written by [`emit_heatmap`].
#[derive(Clone, Debug)]
pub struct HeatmapFiles {
    pub image: PathBuf,
    pub values: PathBuf,
    pub legend: PathBuf,
}

/// Renders `matrix` as a grayscale PGM (values clipped to [-1, 1], the smallest
/// mapped to black and the largest to white) with two CSV sidecars: the raw
/// values (`.csv`) and the gray-level legend (`_legend.csv`).
pub fn emit_heatmap(matrix: &[Vec<f64>], path: &Path) -> Result<HeatmapFiles> {
    let rows = matrix.len();
    let cols = matrix.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || matrix.iter().any(|r| r.len() != cols) {
        return Err(Error::dim("heatmap matrix must be rectangular and non-empty"));
    }
    let levels = heatmap_levels(matrix)?;
    let (lo, hi) = levels.range;
    let (h, w) = (rows * HEATMAP_CELL, cols * HEATMAP_CELL);
    let pixels: Vec<u8> = (0..h * w).map(|i| levels.gray[(i / w / HEATMAP_CELL) * cols + (i % w) / HEATMAP_CELL]).collect();
    let image = path.to_path_buf();
    io::write_bytes(&image, &io::encode_pgm(w, h, &pixels))?;

    let values = path.with_extension("csv");
    let mut text = String::new();
    for r in matrix {
        let line: Vec<String> = r.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(text, "{}", line.join(","));
    }
    io::write_bytes(&values, text.as_bytes())?;

    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let legend = path.with_file_name(format!("{stem}_legend.csv"));
    let legend_text = format!("value,gray\n{lo:.6},{}\n{hi:.6},{}\n", levels.level(lo), levels.level(hi));
    io::write_bytes(&legend, legend_text.as_bytes())?;
    Ok(HeatmapFiles { image, values, legend })
}

/// Parses a plain numeric CSV matrix such as a heatmap sidecar.
pub fn parse_matrix_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() }))
                .collect()
        })
        .collect()
}

/// `class,iou` rows followed by `miou,<value>`.
pub fn metrics_csv(metrics: &Metrics, class_names: &[&str]) -> String {
    let mut out = String::from("class,iou\n");
    for (name, iou) in class_names.iter().zip(&metrics.per_class_iou) {
        let _ = writeln!(out, "{name},{iou:.6}");
    }
    let _ = writeln!(out, "miou,{:.6}", metrics.miou);
    out
}

/// Confusion counts, one ground-truth class per row.
pub fn confusion_csv(metrics: &Metrics) -> String {
    let mut out = String::new();
    for row in &metrics.confusion {
        let line: Vec<String> = row.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

pub fn parse_confusion_csv(text: &str) -> Result<Vec<Vec<u64>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(',')
                .map(|v| v.trim().parse::<u64>().map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() }))
                .collect()
        })
        .collect()
}
