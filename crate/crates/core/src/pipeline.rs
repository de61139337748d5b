//! End-to-end steps over a run directory with fixed artifact names.
//!
//! ```text
//! <run>/manifest.json          split index
//! <run>/model_config.json      ModelConfig
//! <run>/params.swta            trained parameters
//! <run>/train_metrics.json     per-epoch metrics
//! <run>/calibration/<m>.json   activation parameters per int8 method
//! <run>/engines/<mode>.swqe    committed engines
//! <run>/predictions/<row>.jsonl
//! <run>/report.csv, report.md
//! <run>/run.json               resolved command configuration
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{
    evaluate_images, load_test_images, measure_latency_with, metrics_of, write_predictions, write_report,
    Evaluation, ReportRow, DEFAULT_ITERS, DEFAULT_WARMUP,
};
use crate::data::{DatasetIndex, PreprocessSpec, Split};
use crate::engine::{build_engine, Engine, Kernel, PrecisionMode};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterSet};
use crate::quant::CalibrationMethod;
use crate::train::{save_metrics, train_loop, TrainConfig, TrainOutcome};

pub const MANIFEST: &str = "manifest.json";
pub const MODEL_CONFIG: &str = "model_config.json";
pub const PARAMS: &str = "params.swta";
pub const TRAIN_METRICS: &str = "train_metrics.json";
pub const CALIBRATION_DIR: &str = "calibration";
pub const ENGINES_DIR: &str = "engines";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_MD: &str = "report.md";
pub const RUN_JSON: &str = "run.json";

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `fp32.swqe`, `fp16.swqe`, `int8-<method>.swqe`.
pub fn engine_file_name(mode: PrecisionMode) -> String {
    match mode.method {
        Some(m) => format!("int8-{m}.swqe"),
        None => format!("{}.swqe", mode.precision),
    }
}

pub fn engine_path(run_dir: &Path, mode: PrecisionMode) -> PathBuf {
    run_dir.join(ENGINES_DIR).join(engine_file_name(mode))
}

/// Report rows of an ablation: label, engine and the GEMM kernel used.
/// Calibrator rows run the level-domain reference kernel; the `int8` row
/// is the minmax engine on the integer kernel.
pub fn ablation_plan() -> Vec<(&'static str, PrecisionMode, Kernel)> {
    use CalibrationMethod::*;
    vec![
        ("original", PrecisionMode::FP32, Kernel::Integer),
        ("minmax", PrecisionMode::int8(Minmax), Kernel::FakeQuant),
        ("ema", PrecisionMode::int8(Ema), Kernel::FakeQuant),
        ("omse", PrecisionMode::int8(Omse), Kernel::FakeQuant),
        ("percentile", PrecisionMode::int8(Percentile), Kernel::FakeQuant),
        ("fqvit", PrecisionMode::int8(Fqvit), Kernel::FakeQuant),
        ("int8", PrecisionMode::int8(Minmax), Kernel::Integer),
        ("fp16", PrecisionMode::FP16, Kernel::Integer),
        ("default_range", PrecisionMode::int8(DefaultRange), Kernel::Integer),
    ]
}

pub fn bits_label(mode: PrecisionMode) -> String {
    let (w, a, att) = mode.bits();
    format!("{w}/{a}/{att}")
}

/// Preprocessing for a corpus at model resolution.
pub fn preprocess_for(cfg: &ModelConfig, synthetic: bool) -> PreprocessSpec {
    if synthetic {
        PreprocessSpec::synthetic(cfg.image_size)
    } else {
        PreprocessSpec::imagenet(cfg.image_size * 256 / 224, cfg.image_size)
    }
}

/// Train on the manifest's train split, select on val, and write
/// parameters, config and metrics into `run_dir`.
pub fn train_run(
    run_dir: &Path,
    index: &DatasetIndex,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    spec: &PreprocessSpec,
) -> Result<TrainOutcome> {
    ensure_dir(run_dir)?;
    if index.classes.len() != cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            index.classes.len(),
            cfg.num_classes
        )));
    }
    let train = index.load_split(Split::Train, spec)?;
    let val = index.load_split(Split::Val, spec)?;
    let outcome = train_loop(&train, &val, cfg, tcfg)?;
    cfg.save(run_dir.join(MODEL_CONFIG))?;
    outcome.params.save(run_dir.join(PARAMS))?;
    save_metrics(&outcome.metrics, &run_dir.join(TRAIN_METRICS))?;
    Ok(outcome)
}

/// Build (or rebuild) one engine and write it, plus its calibration table, under `run_dir`.
pub fn build_and_save(
    run_dir: &Path,
    params: &ParameterSet,
    cfg: &ModelConfig,
    mode: PrecisionMode,
    calibration: &[crate::tensor::Tensor],
) -> Result<Engine> {
    let engine = build_engine(params, cfg, mode, calibration)?;
    let path = engine_path(run_dir, mode);
    ensure_dir(path.parent().expect("engine dir"))?;
    engine.save(&path)?;
    if let (Some(m), Some(t)) = (mode.method, engine.calibration()) {
        let dir = run_dir.join(CALIBRATION_DIR);
        ensure_dir(&dir)?;
        t.save(dir.join(format!("{m}.json")))?;
        for w in &t.warnings {
            log::warn!("{m}: {w}");
        }
    }
    Ok(engine)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateOptions {
    pub dataset: String,
    pub warmup: usize,
    pub iters: usize,
    pub threads: usize,
}

impl Default for AblateOptions {
    fn default() -> Self {
        AblateOptions {
            dataset: "synthetic".into(),
            warmup: DEFAULT_WARMUP,
            iters: DEFAULT_ITERS,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub rows: Vec<ReportRow>,
    pub evaluations: Vec<(String, Evaluation)>,
}

/// Build every engine of [`ablation_plan`], evaluate each row on the test
/// split, time it, and write engines, predictions and the report.
pub fn ablate(
    run_dir: &Path,
    index: &DatasetIndex,
    cfg: &ModelConfig,
    params: &ParameterSet,
    spec: &PreprocessSpec,
    opts: &AblateOptions,
) -> Result<AblationOutcome> {
    ensure_dir(run_dir)?;
    let (images, skipped) = load_test_images(index, spec)?;
    let calibration = index.calibration_set(spec)?;
    let host = crate::bench::host_descriptor();
    let pred_dir = run_dir.join(PREDICTIONS_DIR);
    ensure_dir(&pred_dir)?;

    let mut engines: Vec<(PrecisionMode, Engine, f64)> = Vec::new();
    let mut rows = Vec::new();
    let mut evaluations = Vec::new();
    for (label, mode, kernel) in ablation_plan() {
        if !engines.iter().any(|(m, _, _)| *m == mode) {
            log::info!("building {mode}");
            let e = build_and_save(run_dir, params, cfg, mode, &calibration)?;
            let size = fs::metadata(engine_path(run_dir, mode))
                .map_err(|err| Error::io(engine_path(run_dir, mode), err))?
                .len() as f64
                / (1u64 << 20) as f64;
            engines.push((mode, e, size));
        }
        let (_, engine, size) = engines.iter().find(|(m, _, _)| *m == mode).expect("built above");
        let predictions = evaluate_images(engine, &images, kernel)?;
        write_predictions(&pred_dir.join(format!("{label}.jsonl")), &predictions)?;
        let metrics = metrics_of(&predictions, index.classes.len())?;
        let latency = measure_latency_with(engine, &images[0].image, opts.warmup, opts.iters, kernel)?;
        log::info!(
            "{label}: accuracy {:.4}, {:.3} ms, {:.3} MB",
            metrics.accuracy,
            latency.mean_ms,
            size
        );
        rows.push(ReportRow {
            dataset: opts.dataset.clone(),
            method: label.to_string(),
            bits: bits_label(mode),
            accuracy: metrics.accuracy,
            precision: metrics.precision,
            recall: metrics.recall,
            f1: metrics.f1,
            latency_ms: latency.mean_ms,
            fps: latency.fps,
            model_size_mb: *size,
            threads: opts.threads,
            host: host.clone(),
        });
        evaluations.push((
            label.to_string(),
            Evaluation {
                metrics,
                predictions,
                skipped,
            },
        ));
    }
    write_report(run_dir, &rows)?;
    Ok(AblationOutcome { rows, evaluations })
}

/// Load an engine from a run directory by mode.
pub fn load_engine(run_dir: &Path, mode: PrecisionMode) -> Result<Engine> {
    let e = Engine::load(engine_path(run_dir, mode))?;
    if e.mode() != mode {
        return Err(Error::Config(format!("engine file holds {}, expected {mode}", e.mode())));
    }
    Ok(e)
}
