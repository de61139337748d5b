use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use swinq::bench::{
    evaluate_images, load_test_images, measure_latency_with, metrics_of, write_predictions, write_report,
    LatencyStats, Metrics, ReportRow,
};
use swinq::data::{generate_synthetic, index_and_split, DatasetIndex, PreprocessSpec};
use swinq::engine::{calibrate, Kernel, PrecisionMode};
use swinq::model::{ModelConfig, ParameterSet};
use swinq::pipeline::{self, ensure_dir, AblateOptions};
use swinq::quant::CalibrationMethod;
use swinq::tensor::Tensor;
use swinq::train::TrainConfig;

use crate::run_config::run_file;
use crate::{Cli, Command, EngineArgs, Preset, PreprocessKind};

const RESULTS_DIR: &str = "results";

pub fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    if g.threads == 0 {
        return Err(UsageError("--threads must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(g.threads)
        .build_global()
        .context("thread pool")?;
    ensure_dir(&g.out)?;
    let run = serde_json::to_string_pretty(&run_file(cli))?;
    let run_path = g.out.join(pipeline::RUN_JSON);
    std::fs::write(&run_path, run + "\n").with_context(|| format!("writing {}", run_path.display()))?;

    let out = g.out.as_path();
    match &cli.command {
        Command::SynthData(a) => {
            let dir = a.data.clone().unwrap_or_else(|| out.join("data"));
            let summary = generate_synthetic(&dir, a.classes, a.per_class, a.size, g.seed)?;
            std::fs::write(out.join("synthetic.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
            println!("wrote {} x {} images to {}", a.classes, a.per_class, dir.display());
        }
        Command::Split(a) => {
            let dir = a.data.clone().unwrap_or_else(|| out.join("data"));
            let index = index_and_split(&dir, g.seed)?;
            index.save(&out.join(pipeline::MANIFEST))?;
            println!(
                "{} classes: train {}, val {}, test {} ({} skipped)",
                index.classes.len(),
                index.count(swinq::data::Split::Train),
                index.count(swinq::data::Split::Val),
                index.count(swinq::data::Split::Test),
                index.skipped
            );
        }
        Command::Train(a) => {
            let index = manifest(out)?;
            let cfg = match &a.model.model_config {
                Some(p) => ModelConfig::load(p)?,
                None => {
                    let mut cfg = match a.model.model {
                        Preset::Micro => ModelConfig::micro(),
                        Preset::Tiny => ModelConfig::tiny(),
                        Preset::SwinT => ModelConfig::swin_t(index.classes.len()),
                    };
                    cfg.num_classes = index.classes.len();
                    cfg
                }
            };
            let tcfg = TrainConfig {
                learning_rate: a.lr,
                epochs: a.epochs,
                batch_size: a.batch_size,
                seed: g.seed,
                ..TrainConfig::default()
            };
            let spec = spec_for(&cfg, a.model.preprocess);
            let outcome = pipeline::train_run(out, &index, &cfg, &tcfg, &spec)?;
            let best = &outcome.metrics[outcome.best_epoch - 1];
            println!("best epoch {}: val accuracy {:.4}", outcome.best_epoch, best.val_accuracy);
        }
        Command::Calibrate(a) => {
            let (cfg, params) = model(out)?;
            let images = calibration_images(out, &cfg, a.method, a.preprocess)?;
            let table = calibrate(&params, &cfg, a.method, &images)?;
            let dir = out.join(pipeline::CALIBRATION_DIR);
            ensure_dir(&dir)?;
            let path = dir.join(format!("{}.json", a.method));
            table.save(&path)?;
            for w in &table.warnings {
                log::warn!("{w}");
            }
            println!("{} sites -> {}", table.sites.len(), path.display());
        }
        Command::BuildEngine(a) => {
            let mode = mode_of(a)?;
            let (cfg, params) = model(out)?;
            let images = match mode.method {
                Some(m) => calibration_images(out, &cfg, m, a.preprocess)?,
                None => Vec::new(),
            };
            let engine = pipeline::build_and_save(out, &params, &cfg, mode, &images)?;
            println!(
                "{mode}: {} ({:.4} MB)",
                pipeline::engine_path(out, mode).display(),
                engine.size_mb()?
            );
        }
        Command::Evaluate(a) => {
            let mode = mode_of(&a.engine)?;
            let kernel = Kernel::from(a.kernel);
            let engine = pipeline::load_engine(out, mode)?;
            let index = manifest(out)?;
            let (images, skipped) = load_test_images(&index, &spec_for(engine.config(), a.engine.preprocess))?;
            let predictions = evaluate_images(&engine, &images, kernel)?;
            let metrics = metrics_of(&predictions, index.classes.len())?;
            let stem = result_stem(mode, kernel);
            let pred_dir = out.join(pipeline::PREDICTIONS_DIR);
            ensure_dir(&pred_dir)?;
            write_predictions(&pred_dir.join(format!("{stem}.jsonl")), &predictions)?;
            println!(
                "{mode}: accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} ({} images, {skipped} skipped)",
                metrics.accuracy,
                metrics.precision,
                metrics.recall,
                metrics.f1,
                predictions.len()
            );
            save_result(
                out,
                &format!("{stem}.eval.json"),
                &EvalResult {
                    mode,
                    kernel,
                    images: predictions.len(),
                    skipped,
                    metrics,
                },
            )?;
        }
        Command::Bench(a) => {
            let mode = mode_of(&a.engine)?;
            let kernel = Kernel::from(a.kernel);
            let engine = pipeline::load_engine(out, mode)?;
            let index = manifest(out)?;
            let (images, _) = load_test_images(&index, &spec_for(engine.config(), a.engine.preprocess))?;
            let stats = measure_latency_with(&engine, &images[0].image, a.warmup, a.iters, kernel)?;
            println!(
                "{mode}: mean {:.3} ms, median {:.3} ms, p95 {:.3} ms, {:.2} FPS",
                stats.mean_ms, stats.median_ms, stats.p95_ms, stats.fps
            );
            let size_mb = std::fs::metadata(pipeline::engine_path(out, mode))?.len() as f64 / (1u64 << 20) as f64;
            save_result(
                out,
                &format!("{}.latency.json", result_stem(mode, kernel)),
                &LatencyResult {
                    mode,
                    kernel,
                    threads: g.threads,
                    size_mb,
                    stats,
                },
            )?;
        }
        Command::Report(a) => {
            let rows = collect_rows(out, &a.dataset)?;
            write_report(out, &rows)?;
            print!("{}", std::fs::read_to_string(out.join(pipeline::REPORT_MD))?);
        }
        Command::Ablate(a) => {
            let index = manifest(out)?;
            let (cfg, params) = model(out)?;
            let opts = AblateOptions {
                dataset: a.dataset.clone(),
                warmup: a.warmup,
                iters: a.iters,
                threads: g.threads,
            };
            pipeline::ablate(out, &index, &cfg, &params, &spec_for(&cfg, a.preprocess), &opts)?;
            print!("{}", std::fs::read_to_string(out.join(pipeline::REPORT_MD))?);
        }
    }
    Ok(())
}

fn spec_for(cfg: &ModelConfig, kind: PreprocessKind) -> PreprocessSpec {
    pipeline::preprocess_for(cfg, kind == PreprocessKind::Synthetic)
}

fn manifest(out: &Path) -> Result<DatasetIndex> {
    let path = out.join(pipeline::MANIFEST);
    DatasetIndex::load(&path).with_context(|| format!("loading {} (run `split` first)", path.display()))
}

fn model(out: &Path) -> Result<(ModelConfig, ParameterSet)> {
    let cfg_path = out.join(pipeline::MODEL_CONFIG);
    let cfg = ModelConfig::load(&cfg_path).with_context(|| format!("loading {} (run `train` first)", cfg_path.display()))?;
    let params = ParameterSet::load(&cfg, out.join(pipeline::PARAMS))?;
    Ok((cfg, params))
}

fn calibration_images(
    out: &Path,
    cfg: &ModelConfig,
    method: CalibrationMethod,
    kind: PreprocessKind,
) -> Result<Vec<Tensor>> {
    if !method.needs_data() {
        return Ok(Vec::new());
    }
    Ok(manifest(out)?.calibration_set(&spec_for(cfg, kind))?)
}

/// Bad flag combination detected after parsing; exits like a clap error.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn mode_of(a: &EngineArgs) -> Result<PrecisionMode> {
    PrecisionMode::new(a.precision, a.method).map_err(|e| UsageError(e.to_string()).into())
}

fn result_stem(mode: PrecisionMode, kernel: Kernel) -> String {
    let engine = pipeline::engine_file_name(mode);
    let engine = engine.trim_end_matches(".swqe");
    match kernel {
        Kernel::Integer => engine.to_string(),
        Kernel::FakeQuant => format!("{engine}.fake_quant"),
    }
}

/// Report label of an engine run on `kernel`.
fn row_label(mode: PrecisionMode, kernel: Kernel) -> &'static str {
    match (mode.method, kernel) {
        (None, _) if mode == PrecisionMode::FP32 => "original",
        (None, _) => "fp16",
        (Some(CalibrationMethod::Minmax), Kernel::Integer) => "int8",
        (Some(m), _) => m.name(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalResult {
    mode: PrecisionMode,
    kernel: Kernel,
    images: usize,
    skipped: usize,
    metrics: Metrics,
}

#[derive(Debug, Serialize, Deserialize)]
struct LatencyResult {
    mode: PrecisionMode,
    kernel: Kernel,
    threads: usize,
    size_mb: f64,
    stats: LatencyStats,
}

fn save_result<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    let dir = out.join(RESULTS_DIR);
    ensure_dir(&dir)?;
    std::fs::write(dir.join(name), serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn collect_rows(out: &Path, dataset: &str) -> Result<Vec<ReportRow>> {
    let dir = out.join(RESULTS_DIR);
    let mut evals: Vec<PathBuf> = std::fs::read_dir(&dir)
        .with_context(|| format!("reading {} (run `evaluate` and `bench` first)", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".eval.json"))
        .collect();
    evals.sort();
    let host = swinq::bench::host_descriptor();
    let mut rows = Vec::new();
    for path in evals {
        let eval: EvalResult = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        let lat_path = dir.join(format!("{}.latency.json", result_stem(eval.mode, eval.kernel)));
        let Ok(text) = std::fs::read_to_string(&lat_path) else {
            log::warn!("no latency for {}; run `bench` for it", path.display());
            continue;
        };
        let lat: LatencyResult = serde_json::from_str(&text)?;
        rows.push(ReportRow {
            dataset: dataset.to_string(),
            method: row_label(eval.mode, eval.kernel).to_string(),
            bits: pipeline::bits_label(eval.mode),
            accuracy: eval.metrics.accuracy,
            precision: eval.metrics.precision,
            recall: eval.metrics.recall,
            f1: eval.metrics.f1,
            latency_ms: lat.stats.mean_ms,
            fps: lat.stats.fps,
            model_size_mb: lat.size_mb,
            threads: lat.threads,
            host: host.clone(),
        });
    }
    if rows.is_empty() {
        bail!("no engine has both evaluate and bench results in {}", dir.display());
    }
    Ok(rows)
}
