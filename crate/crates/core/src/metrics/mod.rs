//! Evaluation battery: classifier-based scores (inception score, top-k
//! accuracy, KL(model || data), FID) and per-pair image quality (SSIM,
//! PSNR, sharpness difference).

mod classifier;
mod fid;
mod quality;
mod report;

use std::path::Path;

pub use classifier::{train_classifier, Classifier, ClassifierOutputs, ClassifierTrainConfig, SceneClassifier};
pub use fid::{fid, fid_from_stats, gaussian_stats};
pub use quality::{luminance8, psnr, sharpness_difference, ssim, ssim_plane, PSNR_CAP};
pub use report::{evaluate, evaluate_outputs, EvalOptions, MetricReport, METRIC_COLUMNS};

use crate::{Error, Result};

/// Floor applied to the data marginal before taking logs in KL(model || data).
pub const KL_EPS: f64 = 1e-12;
const ROW_SUM_TOL: f64 = 1e-6;

fn parse_matrix(text: &str, what: &str) -> Result<(usize, Vec<Vec<f64>>)> {
    let bad = |m: String| Error::Metric(format!("{what}: {m}"));
    let mut nums = text.split_whitespace();
    let mut header = || -> Result<usize> {
        nums.next()
            .ok_or_else(|| bad("missing header".into()))?
            .parse()
            .map_err(|_| bad("header must be `N C`".into()))
    };
    let (n, c) = (header()?, header()?);
    let vals = nums
        .map(|t| t.parse::<f64>().map_err(|_| bad(format!("bad number {t:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != n * c {
        return Err(bad(format!("header says {n} x {c} but found {} values", vals.len())));
    }
    Ok((c, vals.chunks(c.max(1)).take(n).map(|r| r.to_vec()).collect()))
}

fn matrix_text(rows: &[Vec<f64>], cols: usize) -> String {
    let mut s = format!("{} {}\n", rows.len(), cols);
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// Per-image class probability rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    rows: Vec<Vec<f64>>,
    classes: usize,
}

impl ProbMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let classes = rows.first().map_or(0, |r| r.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != classes {
                return Err(Error::Metric(format!("row {i} has {} classes, expected {classes}", r.len())));
            }
            if r.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::Metric(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Metric(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { rows, classes })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (_, rows) = parse_matrix(text, "probability matrix")?;
        Self::new(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        matrix_text(&self.rows, self.classes)
    }

    /// Column mean.
    pub fn marginal(&self) -> Vec<f64> {
        column_mean(&self.rows, self.classes)
    }
}

fn column_mean(rows: &[Vec<f64>], cols: usize) -> Vec<f64> {
    let mut m = vec![0.0; cols];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    let n = rows.len().max(1) as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

/// Per-image feature vectors (penultimate classifier layer).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    rows: Vec<Vec<f64>>,
    dim: usize,
}

impl ActivationMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Metric(format!("row {i} has dimension {}, expected {dim}", r.len())));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Metric(format!("row {i} has a non-finite entry")));
            }
        }
        Ok(Self { rows, dim })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (_, rows) = parse_matrix(text, "activation matrix")?;
        Self::new(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        matrix_text(&self.rows, self.dim)
    }
}

/// Indices of the `k` largest entries, ties broken by lower index.
fn top_indices(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Keeps the `k` largest entries and spreads the remaining mass evenly
/// over the other classes.
pub fn topk_smooth(p: &[f64], k: usize) -> Result<Vec<f64>> {
    let c = p.len();
    if k == 0 || k > c {
        return Err(Error::Metric(format!("k = {k} outside 1..={c}")));
    }
    if k == c {
        return Ok(p.to_vec());
    }
    let top = top_indices(p, k);
    let kept: f64 = top.iter().map(|&i| p[i]).sum();
    let eps = ((1.0 - kept) / (c - k) as f64).max(0.0);
    let mut out = vec![eps; c];
    for &i in &top {
        out[i] = p[i];
    }
    Ok(out)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b.max(KL_EPS)).ln())
        .sum()
}

/// `exp(mean_i KL(p_i || p))` with optional top-k smoothing of every row
/// (`None` uses the rows as given).
pub fn inception_score(p: &ProbMatrix, k: Option<usize>) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Metric("inception score of an empty set".into()));
    }
    let rows: Vec<Vec<f64>> = match k {
        Some(k) => p.rows().iter().map(|r| topk_smooth(r, k)).collect::<Result<_>>()?,
        None => p.rows().to_vec(),
    };
    let marginal = column_mean(&rows, p.classes());
    let mean_kl = rows.iter().map(|r| kl(r, &marginal)).sum::<f64>() / rows.len() as f64;
    Ok(mean_kl.exp())
}

/// Inception score over `splits` contiguous splits, as mean and population
/// standard deviation.
pub fn inception_score_splits(p: &ProbMatrix, k: Option<usize>, splits: usize) -> Result<(f64, f64)> {
    let parts = contiguous_batches(p.len(), splits)?;
    let scores = parts
        .into_iter()
        .map(|r| inception_score(&ProbMatrix::new(p.rows()[r].to_vec())?, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_std(&scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccuracyMode {
    /// Every sample counts.
    All,
    /// Only samples whose real top-1 probability exceeds 0.5.
    Confident,
}

/// Percentage of samples whose real top-1 class is among the fake row's
/// top-`k` classes.
pub fn topk_accuracy(real: &ProbMatrix, fake: &ProbMatrix, k: usize, mode: AccuracyMode) -> Result<f64> {
    if real.len() != fake.len() {
        return Err(Error::Metric(format!(
            "real has {} rows but fake has {}",
            real.len(),
            fake.len()
        )));
    }
    if real.classes() != fake.classes() {
        return Err(Error::Metric("real and fake use different class counts".into()));
    }
    if k == 0 || k > real.classes() {
        return Err(Error::Metric(format!("k = {k} outside 1..={}", real.classes())));
    }
    let (mut hits, mut counted) = (0usize, 0usize);
    for (r, f) in real.rows().iter().zip(fake.rows()) {
        let label = top_indices(r, 1)[0];
        if mode == AccuracyMode::Confident && r[label] <= 0.5 {
            continue;
        }
        counted += 1;
        if top_indices(f, k).contains(&label) {
            hits += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Metric(format!(
            "no real rows with top-1 probability above 0.5 among {} rows",
            real.len()
        )));
    }
    Ok(100.0 * hits as f64 / counted as f64)
}

/// Splits `0..n` into `batches` contiguous ranges of near-equal size;
/// `batches` is clamped to `n`.
fn contiguous_batches(n: usize, batches: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if n == 0 || batches == 0 {
        return Err(Error::Metric("need at least one row and one batch".into()));
    }
    let b = batches.min(n);
    Ok((0..b).map(|i| i * n / b..(i + 1) * n / b).collect())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// KL between each batch's fake marginal and the real marginal, as mean
/// and population standard deviation over batches.
pub fn kl_model_data(fake: &ProbMatrix, real: &ProbMatrix, batches: usize) -> Result<(f64, f64)> {
    if fake.is_empty() || real.is_empty() {
        return Err(Error::Metric("KL(model || data) needs nonempty sets".into()));
    }
    if fake.classes() != real.classes() {
        return Err(Error::Metric("real and fake use different class counts".into()));
    }
    let p = real.marginal();
    let scores: Vec<f64> = contiguous_batches(fake.len(), batches)?
        .into_iter()
        .map(|r| kl(&column_mean(&fake.rows()[r], fake.classes()), &p))
        .collect();
    Ok(mean_std(&scores))
}
