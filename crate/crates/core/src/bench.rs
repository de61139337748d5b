//! Latency/FPS measurement, classification metrics and report emission.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_image, preprocess_image, DatasetIndex, PreprocessSpec, Split};
use crate::engine::{Engine, Kernel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::argmax;

pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_ITERS: usize = 100;
pub const MIN_ITERS: usize = 10;

/// Report method labels in table order.
pub const METHOD_ORDER: [&str; 9] = [
    "original",
    "minmax",
    "ema",
    "omse",
    "percentile",
    "fqvit",
    "int8",
    "fp16",
    "default_range",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub warmup_iters: usize,
    pub measured_iters: usize,
    pub times_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
}

impl LatencyStats {
    /// Summaries of per-iteration wall times. FPS comes from the mean.
    pub fn from_times(warmup_iters: usize, times_ms: Vec<f64>) -> Result<Self> {
        if times_ms.is_empty() || times_ms.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::InvalidArgument("latency samples must be finite and positive".into()));
        }
        let mean_ms = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
        let mut sorted = times_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median_ms = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        // nearest rank
        let p95_ms = sorted[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Ok(LatencyStats {
            warmup_iters,
            measured_iters: n,
            times_ms,
            mean_ms,
            median_ms,
            p95_ms,
            fps: 1000.0 / mean_ms,
        })
    }
}

/// Single-stream latency of `engine` on one preprocessed image.
pub fn measure_latency(engine: &Engine, image: &Tensor, warmup: usize, iters: usize) -> Result<LatencyStats> {
    measure_latency_with(engine, image, warmup, iters, Kernel::Integer)
}

pub fn measure_latency_with(
    engine: &Engine,
    image: &Tensor,
    warmup: usize,
    iters: usize,
    kernel: Kernel,
) -> Result<LatencyStats> {
    if iters < MIN_ITERS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_ITERS} timed iterations, got {iters}")));
    }
    for _ in 0..warmup {
        std::hint::black_box(engine.forward_with(image, kernel)?);
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        std::hint::black_box(engine.forward_with(std::hint::black_box(image), kernel)?);
        // clamp so a sub-resolution tick still yields a positive sample
        times.push((t.elapsed().as_secs_f64() * 1e3).max(1e-9));
    }
    LatencyStats::from_times(warmup, times)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[label][pred]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy and macro-averaged precision, recall and F1 over `k` classes.
/// Classes with no support or no predictions contribute 0 to the means.
pub fn compute_metrics(predictions: &[usize], labels: &[usize], k: usize) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() || k == 0 {
        return Err(Error::InvalidArgument("metrics need at least one sample and one class".into()));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= k || l >= k {
            return Err(Error::InvalidArgument(format!("class {} out of range for {k} classes", p.max(l))));
        }
        confusion[l][p] += 1;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = confusion[c][c];
        let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
        let support: usize = confusion[c].iter().sum();
        let (p, r) = (ratio(tp, predicted), ratio(tp, support));
        ps += p;
        rs += r;
        fs += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(Metrics {
        accuracy: ratio(correct, labels.len()),
        precision: ps / k as f64,
        recall: rs / k as f64,
        f1: fs / k as f64,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub path: PathBuf,
    pub label: usize,
    pub pred: usize,
    pub logits: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<Prediction>,
    /// Test images that failed to decode.
    pub skipped: usize,
}

/// A decoded, preprocessed test image.
#[derive(Debug, Clone)]
pub struct TestImage {
    pub path: PathBuf,
    pub label: usize,
    pub image: Tensor,
}

/// Load the test split in index order. Undecodable images are logged and counted.
pub fn load_test_images(index: &DatasetIndex, spec: &PreprocessSpec) -> Result<(Vec<TestImage>, usize)> {
    let entries: Vec<_> = index.split(Split::Test).collect();
    if entries.is_empty() {
        return Err(Error::Dataset("test split is empty".into()));
    }
    let loaded: Vec<Option<TestImage>> = entries
        .par_iter()
        .map(|s| match read_image(&index.root.join(&s.path)) {
            Ok(img) => Ok(Some(TestImage {
                path: s.path.clone(),
                label: s.class,
                image: preprocess_image(&img, spec)?,
            })),
            Err(e @ Error::Decode { .. }) | Err(e @ Error::Io { .. }) => {
                log::warn!("skipping {}: {e}", s.path.display());
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let skipped = loaded.iter().filter(|x| x.is_none()).count();
    let images: Vec<TestImage> = loaded.into_iter().flatten().collect();
    if images.is_empty() {
        return Err(Error::Dataset("no decodable test images".into()));
    }
    Ok((images, skipped))
}

/// Run `engine` over already loaded images; results keep input order.
pub fn evaluate_images(engine: &Engine, images: &[TestImage], kernel: Kernel) -> Result<Vec<Prediction>> {
    images
        .par_iter()
        .map(|t| {
            let logits = engine.forward_with(&t.image, kernel)?;
            Ok(Prediction {
                path: t.path.clone(),
                label: t.label,
                pred: argmax(&logits),
                logits,
            })
        })
        .collect()
}

pub fn metrics_of(predictions: &[Prediction], k: usize) -> Result<Metrics> {
    let p: Vec<usize> = predictions.iter().map(|x| x.pred).collect();
    let l: Vec<usize> = predictions.iter().map(|x| x.label).collect();
    compute_metrics(&p, &l, k)
}

/// Evaluate on the test split of `index`.
pub fn evaluate(engine: &Engine, index: &DatasetIndex, spec: &PreprocessSpec) -> Result<Evaluation> {
    let (images, skipped) = load_test_images(index, spec)?;
    let predictions = evaluate_images(engine, &images, Kernel::Integer)?;
    Ok(Evaluation {
        metrics: metrics_of(&predictions, index.classes.len())?,
        predictions,
        skipped,
    })
}

/// One JSON object per line.
pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut out = Vec::new();
    for p in predictions {
        serde_json::to_writer(&mut out, p)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub method: String,
    pub bits: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub latency_ms: f64,
    pub fps: f64,
    pub model_size_mb: f64,
    pub threads: usize,
    pub host: String,
}

impl ReportRow {
    pub fn validate(&self) -> Result<()> {
        if !METHOD_ORDER.contains(&self.method.as_str()) {
            return Err(Error::InvalidArgument(format!("unknown report method '{}'", self.method)));
        }
        for (name, v) in [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(self.model_size_mb > 0.0 && self.latency_ms > 0.0 && self.fps > 0.0) {
            return Err(Error::InvalidArgument("size, latency and fps must be positive".into()));
        }
        Ok(())
    }
}

/// Label and host string for this machine.
pub fn host_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{} {cpus} cpu", std::env::consts::OS, std::env::consts::ARCH)
}

/// Rows sorted by dataset (first appearance) then table method order.
pub fn sort_rows(rows: &[ReportRow]) -> Result<Vec<ReportRow>> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one row".into()));
    }
    let mut datasets: Vec<&str> = Vec::new();
    for r in rows {
        r.validate()?;
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
    }
    let rank = |r: &ReportRow| {
        (
            datasets.iter().position(|d| *d == r.dataset).unwrap_or(0),
            METHOD_ORDER.iter().position(|m| *m == r.method).unwrap_or(0),
        )
    };
    let mut sorted = rows.to_vec();
    sorted.sort_by_key(rank);
    if let Some(w) = sorted.windows(2).find(|w| rank(&w[0]) == rank(&w[1])) {
        return Err(Error::InvalidArgument(format!("duplicate row {} / {}", w[0].dataset, w[0].method)));
    }
    Ok(sorted)
}

/// CSV text and an aligned markdown table.
pub fn emit_report(rows: &[ReportRow]) -> Result<(String, String)> {
    let rows = sort_rows(rows)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?)
        .expect("csv output is utf-8");

    let header = [
        "Dataset", "Method (w/a/att)", "Accuracy", "Precision", "Recall", "F1", "Latency [ms]", "FPS",
        "Model Size [MB]",
    ];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.dataset.clone(),
                format!("{} ({})", r.method, r.bits),
                format!("{:.2}", 100.0 * r.accuracy),
                format!("{:.2}", 100.0 * r.precision),
                format!("{:.2}", 100.0 * r.recall),
                format!("{:.2}", 100.0 * r.f1),
                format!("{:.3}", r.latency_ms),
                format!("{:.2}", r.fps),
                format!("{:.3}", r.model_size_mb),
            ]
        })
        .collect();
    let width: Vec<usize> = (0..header.len())
        .map(|i| cells.iter().map(|c| c[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |vals: Vec<&str>| {
        let mut s = String::from("|");
        for (i, v) in vals.iter().enumerate() {
            if i < 2 {
                let _ = write!(s, " {v:<w$} |", w = width[i]);
            } else {
                let _ = write!(s, " {v:>w$} |", w = width[i]);
            }
        }
        s.push('\n');
        s
    };
    let mut md = line(header.to_vec());
    md.push('|');
    for (i, w) in width.iter().enumerate() {
        md.push_str(&if i < 2 { format!(":{}|", "-".repeat(w + 1)) } else { format!("{}:|", "-".repeat(w + 1)) });
    }
    md.push('\n');
    for c in &cells {
        md.push_str(&line(c.iter().map(String::as_str).collect()));
    }
    if let Some(r) = rows.first() {
        let _ = writeln!(md, "\nthreads: {}, host: {}", r.threads, r.host);
    }
    Ok((csv, md))
}

pub fn read_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::InvalidArgument(format!("report.csv: {e}"))))
        .collect()
}

/// Write `report.csv` and `report.md` into `dir`.
pub fn write_report(dir: &Path, rows: &[ReportRow]) -> Result<()> {
    let (csv, md) = emit_report(rows)?;
    for (name, text) in [("report.csv", csv), ("report.md", md)] {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latency_summary() {
        let s = LatencyStats::from_times(0, vec![4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.mean_ms, 2.5);
        assert_eq!(s.median_ms, 2.5);
        assert_eq!(s.p95_ms, 4.0);
        assert_eq!(s.fps, 400.0);
        assert!(LatencyStats::from_times(0, vec![]).is_err());
    }

    #[test]
    fn metrics_reject_bad_input() {
        assert!(compute_metrics(&[0], &[0, 1], 2).is_err());
        assert!(compute_metrics(&[2], &[0], 2).is_err());
        assert!(compute_metrics(&[], &[], 2).is_err());
    }
}
