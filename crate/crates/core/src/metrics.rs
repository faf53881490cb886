//! Distribution metrics over embeddings (FID, KID, IS) and binary overlap
//! metrics over masks.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ops::conv2d_forward;
use crate::raster::{Image, Mask};
use crate::tensor::Tensor;

/// `N x D` embedding matrix, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    features: DMatrix<f64>,
}

impl FeatureSet {
    pub fn new(features: DMatrix<f64>) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(FeatureSet { features })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows have differing lengths".into()));
        }
        Self::new(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.features
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sample mean and unbiased (`N - 1`) covariance.
pub fn compute_stats(f: &FeatureSet) -> Result<GaussianStats> {
    let (n, d) = (f.len(), f.dim());
    if n < 2 {
        return Err(Error::Invalid(format!(
            "statistics need N >= 2 samples, got {n}"
        )));
    }
    let m = f.matrix();
    let mu = DVector::from_fn(d, |j, _| m.column(j).iter().sum::<f64>() / n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let s: f64 = (0..n)
                .map(|i| (m[(i, a)] - mu[a]) * (m[(i, b)] - mu[b]))
                .sum();
            let v = s / (n - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok(GaussianStats { mu, cov })
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`.
///
/// The trace of `(S1 S2)^(1/2)` is taken as the trace of the symmetric
/// square root of `S1^(1/2) S2 S1^(1/2)`, which has the same spectrum.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.mu.len();
    if b.mu.len() != d || a.cov.shape() != (d, d) || b.cov.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "stats of dimension {d} and {} cannot be compared",
            b.mu.len()
        )));
    }
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let root_a = symmetric_sqrt(&a.cov);
    let inner = &root_a * &b.cov * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let fd = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if !fd.is_finite() {
        return Err(Error::NonFinite("Frechet distance".into()));
    }
    Ok(fd.max(0.0))
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

fn rows_of(f: &FeatureSet) -> Vec<Vec<f64>> {
    f.features
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect()
}

/// Row sums of the kernel matrix between `xs` and `ys`, skipping the
/// diagonal when `skip_diagonal`; summed in a fixed order.
fn kernel_sum(xs: &[Vec<f64>], ys: &[Vec<f64>], skip_diagonal: bool) -> f64 {
    let per_row: Vec<f64> = xs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            ys.iter()
                .enumerate()
                .filter(|&(j, _)| !(skip_diagonal && i == j))
                .map(|(_, y)| poly_kernel(x, y))
                .sum()
        })
        .collect();
    per_row.iter().sum()
}

/// Unbiased squared MMD with kernel `(x.y / D + 1)^3`. Can be slightly
/// negative; reported unclamped.
pub fn kid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    let (m, n) = (a.len(), b.len());
    if m < 2 || n < 2 {
        return Err(Error::Invalid(format!(
            "KID needs N >= 2 samples per set, got {m} and {n}"
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "feature dims {} and {} differ",
            a.dim(),
            b.dim()
        )));
    }
    let (ra, rb) = (rows_of(a), rows_of(b));
    let (mf, nf) = (m as f64, n as f64);
    let kaa = kernel_sum(&ra, &ra, true) / (mf * (mf - 1.0));
    let kbb = kernel_sum(&rb, &rb, true) / (nf * (nf - 1.0));
    let kab = kernel_sum(&ra, &rb, false) / (mf * nf);
    Ok(kaa + kbb - 2.0 * kab)
}

/// `exp(E_x KL(p(y|x) || p(y)))` over an `N x K` matrix of class posteriors.
///
/// Each row contributes the factor `prod_y (p_y / m_y)^p_y`, with the ratio
/// formed as `p N / S_y` from the column sum `S_y` (or exactly 1 on a
/// constant column), and the score is the geometric mean of the factors.
/// This keeps the closed forms exact: 1 on uniform rows, K on balanced
/// one-hot rows.
pub fn inception_score(probs: &DMatrix<f64>) -> Result<f64> {
    let (n, k) = probs.shape();
    if n == 0 || k == 0 {
        return Err(Error::Invalid(
            "inception score needs a nonempty probability matrix".into(),
        ));
    }
    for (i, row) in probs.row_iter().enumerate() {
        if row.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
            return Err(Error::Invalid(format!(
                "row {i} has a negative or non-finite entry"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("row {i} sums to {s}, not 1")));
        }
    }
    let columns: Vec<(bool, f64)> = (0..k)
        .map(|j| {
            let col = probs.column(j);
            let constant = col.iter().all(|&v| v == col[0]);
            (constant, col.iter().sum())
        })
        .collect();
    let factors: Vec<f64> = (0..n)
        .map(|i| {
            (0..k)
                .filter(|&j| probs[(i, j)] > 0.0)
                .map(|j| {
                    let p = probs[(i, j)];
                    let (constant, sum) = columns[j];
                    let ratio = if constant { 1.0 } else { p * n as f64 / sum };
                    ratio.powf(p)
                })
                .product()
        })
        .collect();
    let score = if factors.iter().all(|&f| f == factors[0]) {
        factors[0]
    } else {
        (factors.iter().map(|f| f.ln()).sum::<f64>() / n as f64).exp()
    };
    Ok(score.clamp(1.0, k as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlapMetrics {
    pub iou: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub counts: ConfusionCounts,
}

impl OverlapMetrics {
    /// IoU and F1 are 1 when both masks are empty; precision is 1 in that
    /// case and 0 when nothing is predicted but truth is nonempty.
    pub fn from_counts(c: ConfusionCounts) -> Self {
        let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
        let both_empty = c.tp + c.fp + c.fn_ == 0;
        let iou = if both_empty {
            1.0
        } else {
            tp / (tp + fp + fn_)
        };
        let f1 = if both_empty {
            1.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        };
        let precision = match (c.tp + c.fp, both_empty) {
            (0, true) => 1.0,
            (0, false) => 0.0,
            _ => tp / (tp + fp),
        };
        let total = tp + fp + fn_ + tn;
        OverlapMetrics {
            iou,
            f1,
            accuracy: if total > 0.0 { (tp + tn) / total } else { 1.0 },
            precision,
            counts: c,
        }
    }
}

pub fn confusion_counts(pred: &Mask, truth: &Mask) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::Shape(format!(
            "masks {}x{} and {}x{} differ",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p == 1.0, t == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn overlap_metrics(pred: &Mask, truth: &Mask) -> Result<OverlapMetrics> {
    Ok(OverlapMetrics::from_counts(confusion_counts(pred, truth)?))
}

/// Pixels whose channel mean exceeds `threshold`.
pub fn binarize(generated: &Image, threshold: f64) -> Mask {
    let mean = generated.channel_mean();
    Mask::from_fn(generated.height(), generated.width(), |y, x| {
        mean[y * generated.width() + x] > threshold
    })
}

/// IoU between the thresholded channel mean of `generated` and `mask`.
pub fn conditioning_fidelity(generated: &Image, mask: &Mask, threshold: f64) -> Result<f64> {
    if (generated.height(), generated.width()) != (mask.height(), mask.width()) {
        return Err(Error::Shape(format!(
            "image {}x{} and mask {}x{} differ",
            generated.height(),
            generated.width(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(overlap_metrics(&binarize(generated, threshold), mask)?.iou)
}

/// Expected IoU of a prediction that marks each pixel independently with
/// probability 1/2: `a / (total + a)` for a mask of area `a`.
pub fn noise_baseline_iou(mask: &Mask) -> f64 {
    let a = mask.count() as f64;
    let total = (mask.height() * mask.width()) as f64;
    a / (total + a)
}

pub trait FeatureExtractor {
    /// Stable identifier written into reports.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, images: &[Image]) -> Result<FeatureSet>;
}

pub const EMBEDDER_SEED: u64 = 42;
pub const EMBED_DIM: usize = 64;
const EMBEDDER_WIDTHS: [usize; 3] = [16, 32, EMBED_DIM];
const EMBEDDER_STRIDES: [usize; 3] = [2, 2, 1];
const EMBED_CHUNK: usize = 8;

/// Fixed random conv stack (3x3 convs, ReLU) with global average pooling,
/// evaluated in double precision.
#[derive(Clone, Debug)]
pub struct ReferenceEmbedder {
    channels: usize,
    layers: Vec<(Tensor<f64>, Tensor<f64>, usize)>,
}

impl ReferenceEmbedder {
    pub fn new(channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EMBEDDER_SEED);
        let mut cin = channels;
        let layers = EMBEDDER_WIDTHS
            .iter()
            .zip(EMBEDDER_STRIDES)
            .map(|(&cout, stride)| {
                let fan_in = cin * 9;
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let w: Vec<f64> = (0..cout * fan_in)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                let b: Vec<f64> = (0..cout).map(|_| 0.1 * normal.sample(&mut rng)).collect();
                let layer = (
                    Tensor::from_vec(&[cout, cin, 3, 3], w).expect("weight shape"),
                    Tensor::from_vec(&[cout], b).expect("bias shape"),
                    stride,
                );
                cin = cout;
                layer
            })
            .collect();
        ReferenceEmbedder { channels, layers }
    }

    fn embed_batch(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let (c, h, w) = images[0].dims();
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            data.extend_from_slice(img.data());
        }
        let mut x = Tensor::from_vec(&[images.len(), c, h, w], data)?;
        for (weight, bias, stride) in &self.layers {
            x = conv2d_forward(&x, weight, Some(bias), *stride, 1)?.map(|v| v.max(0.0));
        }
        let plane = x.dim(2) * x.dim(3);
        Ok(x.data()
            .chunks(EMBED_DIM * plane)
            .map(|sample| {
                sample
                    .chunks(plane)
                    .map(|p| p.iter().sum::<f64>() / plane as f64)
                    .collect()
            })
            .collect())
    }
}

impl FeatureExtractor for ReferenceEmbedder {
    fn id(&self) -> String {
        format!("refconv-s{EMBEDDER_SEED}-d{EMBED_DIM}-c{}", self.channels)
    }

    fn dim(&self) -> usize {
        EMBED_DIM
    }

    fn embed(&self, images: &[Image]) -> Result<FeatureSet> {
        let Some(first) = images.first() else {
            return Err(Error::Invalid("no images to embed".into()));
        };
        let dims = first.dims();
        if dims.0 != self.channels {
            return Err(Error::Shape(format!(
                "embedder built for {} channels, got {}",
                self.channels, dims.0
            )));
        }
        if let Some(bad) = images.iter().find(|i| i.dims() != dims) {
            return Err(Error::Shape(format!(
                "image {:?} differs from batch shape {dims:?}",
                bad.dims()
            )));
        }
        let rows: Vec<Vec<f64>> = images
            .par_chunks(EMBED_CHUNK)
            .map(|chunk| self.embed_batch(chunk))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        FeatureSet::from_rows(&rows)
    }
}

pub const IS_CLASSES: usize = 10;
const CLASSIFIER_SEED: u64 = EMBEDDER_SEED + 1;

/// Fixed random 10-way softmax head over reference-embedder features.
#[derive(Clone, Debug)]
pub struct ReferenceClassifier {
    weights: DMatrix<f64>,
}

impl Default for ReferenceClassifier {
    fn default() -> Self {
        Self::new()
    }
}

impl ReferenceClassifier {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(CLASSIFIER_SEED);
        let normal = Normal::new(0.0, 1.0).expect("unit std");
        ReferenceClassifier {
            weights: DMatrix::from_fn(IS_CLASSES, EMBED_DIM, |_, _| normal.sample(&mut rng)),
        }
    }

    /// Row-wise softmax of `W f`; each row depends only on its own features.
    pub fn probabilities(&self, f: &FeatureSet) -> Result<DMatrix<f64>> {
        if f.dim() != EMBED_DIM {
            return Err(Error::Shape(format!(
                "classifier expects {EMBED_DIM} features, got {}",
                f.dim()
            )));
        }
        let logits = f.matrix() * self.weights.transpose();
        let mut probs = DMatrix::zeros(f.len(), IS_CLASSES);
        for i in 0..f.len() {
            let row = logits.row(i);
            let max = row.max();
            let exps: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                probs[(i, j)] = e / total;
            }
        }
        Ok(probs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n_real: usize,
    pub n_synth: usize,
    pub embedder_id: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

pub const REPORT_NOTE: &str =
    "# scores use the reference embedder, not Inception-v3; they are not comparable to published FID/KID/IS values";

impl MetricReport {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{REPORT_NOTE}\nmetric\tvalue\tn_real\tn_synth\tembedder_id\n");
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{:.6}\t{}\t{}\t{}",
                r.metric, r.value, r.n_real, r.n_synth, r.embedder_id
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_table()).map_err(|e| Error::io(path, e))
    }
}

/// FID, KID and IS of `synth` against `real` under the reference embedder.
pub fn distribution_report(real: &[Image], synth: &[Image]) -> Result<MetricReport> {
    for (name, set) in [("real", real), ("synthetic", synth)] {
        if set.len() < 2 {
            return Err(Error::Invalid(format!(
                "{name} set has {} image(s); FID and KID need N >= 2",
                set.len()
            )));
        }
    }
    let channels = real[0].channels();
    let embedder = ReferenceEmbedder::new(channels);
    let fr = embedder.embed(real)?;
    let fs = embedder.embed(synth)?;
    let fid = frechet_distance(&compute_stats(&fr)?, &compute_stats(&fs)?)?;
    let kid = kid(&fr, &fs)?;
    let is = inception_score(&ReferenceClassifier::new().probabilities(&fs)?)?;
    let id = embedder.id();
    let row = |metric: &str, value: f64| MetricRow {
        metric: metric.to_string(),
        value,
        n_real: real.len(),
        n_synth: synth.len(),
        embedder_id: id.clone(),
    };
    Ok(MetricReport {
        rows: vec![row("FID", fid), row("KID", kid), row("IS", is)],
    })
}
