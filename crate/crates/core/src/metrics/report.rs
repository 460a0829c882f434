//! Full metric battery and its CSV / plain-text rendering.

use std::path::Path;

use super::{
    fid, inception_score, kl_model_data, psnr, sharpness_difference, ssim, topk_accuracy, AccuracyMode, Classifier,
    ClassifierOutputs,
};
use crate::{Error, Image, Result};

/// Report columns, in table order.
pub const METRIC_COLUMNS: [&str; 12] = [
    "Inception Score, all",
    "Inception Score, Top-1",
    "Inception Score, Top-5",
    "Accuracy (Top-1, all)",
    "Accuracy (Top-1, 0.5)",
    "Accuracy (Top-5, all)",
    "Accuracy (Top-5, 0.5)",
    "KL(model || data)",
    "SSIM",
    "PSNR",
    "SD",
    "FID Score",
];
const KL_COLUMN: usize = 7;
const MISSING: &str = "--";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Contiguous batches for KL(model || data).
    pub kl_batches: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { kl_batches: 10 }
    }
}

/// One evaluated method: a value (or a gap) per column of [`METRIC_COLUMNS`].
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub values: [Option<f64>; 12],
    /// Standard deviation over KL batches.
    pub kl_std: Option<f64>,
}

impl MetricReport {
    pub fn empty(method: &str) -> Self {
        Self {
            method: method.to_string(),
            values: [None; 12],
            kl_std: None,
        }
    }

    pub fn get(&self, column: &str) -> Option<f64> {
        METRIC_COLUMNS
            .iter()
            .position(|c| *c == column)
            .and_then(|i| self.values[i])
    }

    fn cell(&self, i: usize) -> String {
        match (self.values[i], i == KL_COLUMN, self.kl_std) {
            (None, _, _) => MISSING.to_string(),
            (Some(v), true, Some(s)) => format!("{v:.4} ± {s:.4}"),
            (Some(v), _, _) => format!("{v:.4}"),
        }
    }

    pub fn csv_header() -> Vec<String> {
        std::iter::once("method".to_string())
            .chain(METRIC_COLUMNS.iter().map(|s| s.to_string()))
            .collect()
    }

    /// Single-record CSV with a header row.
    pub fn to_csv(&self) -> Result<String> {
        Self::many_to_csv(std::slice::from_ref(self))
    }

    pub fn many_to_csv(reports: &[MetricReport]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Metric(format!("csv: {e}"));
        w.write_record(Self::csv_header()).map_err(csv_err)?;
        for r in reports {
            let row: Vec<String> = std::iter::once(r.method.clone())
                .chain((0..METRIC_COLUMNS.len()).map(|i| r.cell(i)))
                .collect();
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Metric(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn parse_csv(text: &str) -> Result<Vec<MetricReport>> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let csv_err = |e: csv::Error| Error::Metric(format!("csv: {e}"));
        let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(String::from).collect();
        if header != Self::csv_header() {
            return Err(Error::Metric(format!("unexpected metric columns {header:?}")));
        }
        let mut out = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            let mut r = MetricReport::empty(&rec[0]);
            for i in 0..METRIC_COLUMNS.len() {
                let cell = rec[i + 1].trim();
                if cell == MISSING {
                    continue;
                }
                let mut parts = cell.split('±').map(str::trim);
                let num = |s: Option<&str>| -> Result<f64> {
                    s.unwrap_or_default()
                        .parse()
                        .map_err(|_| Error::Metric(format!("bad metric cell {cell:?}")))
                };
                r.values[i] = Some(num(parts.next())?);
                if i == KL_COLUMN {
                    if let Some(s) = parts.next() {
                        r.kl_std = Some(num(Some(s))?);
                    }
                }
            }
            out.push(r);
        }
        Ok(out)
    }

    pub fn load_csv(path: &Path) -> Result<Vec<MetricReport>> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }

    /// Aligned table with one row per metric and one column per method.
    pub fn table(reports: &[MetricReport]) -> String {
        let mut cols: Vec<Vec<String>> = vec![std::iter::once("Metric".to_string())
            .chain(METRIC_COLUMNS.iter().map(|s| s.to_string()))
            .collect()];
        for r in reports {
            cols.push(
                std::iter::once(r.method.clone())
                    .chain((0..METRIC_COLUMNS.len()).map(|i| r.cell(i)))
                    .collect(),
            );
        }
        let widths: Vec<usize> = cols
            .iter()
            .map(|c| c.iter().map(|s| s.chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in 0..=METRIC_COLUMNS.len() {
            let cells: Vec<String> = cols
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (c, &w))| {
                    let pad = w - c[row].chars().count();
                    if j == 0 {
                        format!("{}{}", c[row], " ".repeat(pad))
                    } else {
                        format!("{}{}", " ".repeat(pad), c[row])
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if row == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }
}

fn optional(r: Result<f64>, what: &str) -> Option<f64> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("{what} left blank: {e}");
            None
        }
    }
}

/// Computes the battery from classifier outputs; per-pair image metrics
/// are filled in when the aligned image sets are given.
pub fn evaluate_outputs(
    method: &str,
    pairs: Option<(&[Image], &[Image])>,
    fake: &ClassifierOutputs,
    real: &ClassifierOutputs,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if fake.probs.len() != real.probs.len() {
        return Err(Error::Metric(format!(
            "{} fake rows but {} real rows",
            fake.probs.len(),
            real.probs.len()
        )));
    }
    let classes = fake.probs.classes();
    let mut r = MetricReport::empty(method);
    r.values[0] = Some(inception_score(&fake.probs, None)?);
    r.values[1] = Some(inception_score(&fake.probs, Some(1))?);
    r.values[2] = (classes >= 5).then(|| inception_score(&fake.probs, Some(5))).transpose()?;
    let mut col = 3;
    for k in [1, 5] {
        for mode in [AccuracyMode::All, AccuracyMode::Confident] {
            if k <= classes {
                r.values[col] = optional(
                    topk_accuracy(&real.probs, &fake.probs, k, mode),
                    METRIC_COLUMNS[col],
                );
            }
            col += 1;
        }
    }
    let (kl, kl_std) = kl_model_data(&fake.probs, &real.probs, opts.kl_batches)?;
    r.values[KL_COLUMN] = Some(kl);
    r.kl_std = Some(kl_std);
    if let Some((f, g)) = pairs {
        if f.len() != g.len() || f.len() != fake.probs.len() {
            return Err(Error::Metric("image sets and classifier outputs are not aligned".into()));
        }
        let n = f.len() as f64;
        let mut sums = [0.0; 3];
        for (a, b) in f.iter().zip(g) {
            sums[0] += ssim(a, b)?;
            sums[1] += psnr(a, b)?;
            sums[2] += sharpness_difference(a, b)?;
        }
        for (i, s) in sums.iter().enumerate() {
            r.values[8 + i] = Some(s / n);
        }
    }
    r.values[11] = optional(fid(&real.acts, &fake.acts), "FID Score");
    Ok(r)
}

/// Runs the classifier on both sets and computes every metric.
pub fn evaluate(
    method: &str,
    fake: &[Image],
    real: &[Image],
    classifier: &dyn Classifier,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if fake.len() != real.len() || fake.is_empty() {
        return Err(Error::Metric(format!(
            "need equally sized nonempty sets, got {} fake and {} real",
            fake.len(),
            real.len()
        )));
    }
    let fo = classifier.outputs(fake)?;
    let ro = classifier.outputs(real)?;
    evaluate_outputs(method, Some((fake, real)), &fo, &ro, opts)
}
