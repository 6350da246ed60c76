//! One function per subcommand. Each takes a resolved [`Context`] and writes
//! its artifacts under `ctx.out`.

use std::fs;
use std::path::{Path, PathBuf};

use relief_core::bounds::bound_report;
use relief_core::data::Dataset;
use relief_core::importance::{draw_pruning_set, network_importance, write_scores_csv, ImportanceScores};
use relief_core::metrics::{compression_stats, export_heatmaps, masked_flops, CompressionReport, FlopsReport};
use relief_core::network::{load_model, save_model, Layer, Network, MODEL_BLOB_FILE, MODEL_MANIFEST_FILE};
use relief_core::pipeline::{
    derive_seed, evaluate, init_params, iterate, read_history, train, IterationReport, RetrainMode, RunInputs,
    BEST_FILE, HISTORY_FILE, OPTIMIZER_FILE, RUN_FILE,
};
use relief_core::{presets, tensor::Tensor, Error, Result, Scalar};
use serde::Serialize;

use crate::config::{Dtype, RunConfig};
use crate::svg::{line_chart, Series};

pub const CONFIG_COPY: &str = "config.json";
pub const INITIAL_DIR: &str = "initial";
pub const BASELINE_DIR: &str = "baseline";
pub const BASELINE_FILE: &str = "baseline.json";
pub const BEST_DIR: &str = "best";
pub const BOUNDS_FILE: &str = "bounds.json";
pub const METRICS_FILE: &str = "metrics.json";

/// Absolute tolerance when checking measured deviations against bounds.
pub const BOUND_TOLERANCE: f64 = 1e-5;

// sub-seed streams used by the commands; the pipeline owns 1..=3
const STREAM_DATA: u64 = 5;
const STREAM_PROBE: u64 = 4;

/// Measured deviations that exceeded their analytic bound.
#[derive(Debug)]
pub struct BoundViolations(pub usize);

impl std::fmt::Display for BoundViolations {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} measured deviations exceed their bound", self.0)
    }
}

impl std::error::Error for BoundViolations {}

pub struct Context {
    pub cfg: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Context {
    fn data<T: Scalar>(&self) -> Result<(Dataset<T>, Dataset<T>)> {
        self.cfg.load_data(derive_seed(self.seed, 0, STREAM_DATA))
    }

    fn write_config(&self) -> Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.seed = Some(self.seed);
        cfg.out = Some(self.out.clone());
        write_json(&self.out.join(CONFIG_COPY), &cfg)
    }

    /// `explicit`, or the first of `defaults` that exists under the run directory.
    fn checkpoint(&self, explicit: Option<&Path>, defaults: &[&str]) -> Result<PathBuf> {
        if let Some(p) = explicit {
            return Ok(p.to_path_buf());
        }
        defaults
            .iter()
            .map(|d| self.out.join(d))
            .find(|p| p.join(MODEL_MANIFEST_FILE).is_file())
            .ok_or_else(|| {
                Error::Config(format!(
                    "checkpoint: none given and no {} model under {}",
                    defaults.join(" or "),
                    self.out.display()
                ))
            })
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn build_model<T: Scalar>(spec: &str, data: &Dataset<T>) -> Result<Network<T>> {
    let net: Network<T> = presets::build(spec)?;
    check_compatible(&net, data)?;
    Ok(net)
}

fn check_compatible<T: Scalar>(net: &Network<T>, data: &Dataset<T>) -> Result<()> {
    let want: usize = net.input_shape().iter().product();
    let have: usize = data.sample_shape().iter().product();
    if want != have {
        return Err(Error::Config(format!(
            "model: expects {want} input values per sample but the data has {have}"
        )));
    }
    if data.classes() > net.classes() {
        return Err(Error::Config(format!(
            "model: {} outputs for {} classes",
            net.classes(),
            data.classes()
        )));
    }
    Ok(())
}

/// `n` training samples drawn for scoring, reshaped to the model input.
fn probe_set<T: Scalar>(net: &Network<T>, train: &Dataset<T>, n: usize, seed: u64) -> Result<Tensor<T>> {
    let idx = draw_pruning_set(train.len(), n, derive_seed(seed, 0, STREAM_PROBE))?;
    Ok(train.batch(&idx, net.input_shape())?.0)
}

fn copy_model(src: &Path, dst: &Path) -> Result<()> {
    if dst.exists() {
        fs::remove_dir_all(dst).map_err(io_err(dst))?;
    }
    fs::create_dir_all(dst).map_err(io_err(dst))?;
    for name in [MODEL_MANIFEST_FILE, MODEL_BLOB_FILE, OPTIMIZER_FILE] {
        let from = src.join(name);
        if from.is_file() {
            fs::copy(&from, dst.join(name)).map_err(io_err(&from))?;
        }
    }
    Ok(())
}

/// Reads the element type recorded in a model directory.
fn model_dtype(dir: &Path) -> Result<Dtype> {
    let path = dir.join(MODEL_MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    match v.get("dtype").and_then(|d| d.as_str()) {
        Some("f32le") => Ok(Dtype::F32),
        Some("f64le") => Ok(Dtype::F64),
        other => Err(Error::Format(format!("{}: unknown dtype {other:?}", path.display()))),
    }
}

#[derive(Serialize)]
struct BaselineRecord {
    model: String,
    accuracy: f64,
    train_accuracy: f64,
    epoch_losses: Vec<f64>,
    steps: u64,
    train_samples: usize,
    test_samples: usize,
}

/// Trains from a seeded initialization; saves `initial/`, `baseline/` and `baseline.json`.
pub fn train_cmd<T: Scalar>(ctx: &Context) -> Result<f64> {
    let (train_set, test_set) = ctx.data::<T>()?;
    let mut net = build_model::<T>(&ctx.cfg.model, &train_set)?;
    init_params(&mut net, derive_seed(ctx.seed, 0, 3));
    ctx.write_config()?;
    save_model(&net, ctx.out.join(INITIAL_DIR))?;
    let (log, optimizer) = train(&mut net, &train_set, &ctx.cfg.train, derive_seed(ctx.seed, 0, 2))?;
    let dir = ctx.out.join(BASELINE_DIR);
    save_model(&net, &dir)?;
    write_json(&dir.join(OPTIMIZER_FILE), &optimizer.to_record())?;
    let accuracy = 100.0 * evaluate(&net, &test_set)?;
    let record = BaselineRecord {
        model: ctx.cfg.model.clone(),
        accuracy,
        train_accuracy: 100.0 * evaluate(&net, &train_set)?,
        epoch_losses: log.epoch_losses,
        steps: log.steps,
        train_samples: train_set.len(),
        test_samples: test_set.len(),
    };
    write_json(&ctx.out.join(BASELINE_FILE), &record)?;
    Ok(accuracy)
}

pub struct PruneArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub initial: Option<&'a Path>,
    pub iterations: Option<usize>,
}

/// Runs (or resumes) the prune/retrain loop; the best model lands in `best/`.
pub fn prune_cmd<T: Scalar>(ctx: &Context, args: &PruneArgs<'_>) -> Result<Vec<IterationReport>> {
    let mut pcfg = ctx
        .cfg
        .prune
        .clone()
        .ok_or_else(|| Error::Config("prune: section missing".into()))?;
    pcfg.seed = ctx.seed;
    if let Some(n) = args.iterations {
        pcfg.iterations = n;
    }
    pcfg.validate()?;
    let (train_set, test_set) = ctx.data::<T>()?;
    let baseline: Network<T> = load_model(ctx.checkpoint(args.checkpoint, &[BASELINE_DIR])?)?;
    check_compatible(&baseline, &train_set)?;
    let initial: Network<T> = match (args.initial, pcfg.retrain_mode) {
        (Some(p), _) => load_model(p)?,
        (None, RetrainMode::Finetune) => baseline.clone(),
        (None, _) => load_model(ctx.checkpoint(None, &[INITIAL_DIR])?)?,
    };
    let mut cfg = ctx.cfg.clone();
    cfg.prune = Some(pcfg.clone());
    Context {
        cfg,
        seed: ctx.seed,
        out: ctx.out.clone(),
    }
    .write_config()?;

    let inputs = RunInputs {
        initial: &initial,
        baseline: &baseline,
        train: &train_set,
        test: &test_set,
    };
    let summary = iterate(inputs, &pcfg, ctx.cfg.retrain_config(), Some(&ctx.out))?;
    let best_dir = ctx.out.join(BEST_DIR);
    match summary.best {
        Some(b) => copy_model(&ctx.out.join(format!("iter_{b:03}")), &best_dir)?,
        None if best_dir.exists() => fs::remove_dir_all(&best_dir).map_err(io_err(&best_dir))?,
        None => {}
    }
    Ok(summary.reports)
}

pub struct BoundsArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub layer: Option<usize>,
    pub alpha: Option<f64>,
    pub n: Option<usize>,
}

/// Prunes one layer of a copy of the checkpoint and writes `bounds.json`.
///
/// The file is written even when the propagated output bound is unavailable;
/// that case, and any bound violation, is then reported as an error.
pub fn bounds_cmd<T: Scalar>(ctx: &Context, args: &BoundsArgs<'_>) -> anyhow::Result<usize> {
    let preset = ctx.cfg.bounds.as_ref();
    let layer = args
        .layer
        .or(preset.map(|b| b.layer))
        .ok_or_else(|| Error::Config("bounds.layer: not set".into()))?;
    let alpha = args
        .alpha
        .or(preset.map(|b| b.alpha))
        .ok_or_else(|| Error::Config("bounds.alpha: not set".into()))?;
    let n = args
        .n
        .or(preset.map(|b| b.n))
        .or(ctx.cfg.prune.as_ref().map(|p| p.n_pruning_samples))
        .ok_or_else(|| Error::Config("bounds.n: not set".into()))?;
    let (train_set, _) = ctx.data::<T>()?;
    let net: Network<T> = load_model(ctx.checkpoint(args.checkpoint, &[BEST_DIR, BASELINE_DIR])?)?;
    check_compatible(&net, &train_set)?;
    let inputs = probe_set(&net, &train_set, n, ctx.seed)?;
    let report = bound_report(&net, layer, T::lit(alpha), &inputs)?;
    write_json(&ctx.out.join(BOUNDS_FILE), &report)?;
    let violations = report.violations(BOUND_TOLERANCE);
    if violations > 0 {
        return Err(BoundViolations(violations).into());
    }
    if report.logits.is_none() {
        let note = report.note.unwrap_or_else(|| "no output bound".into());
        return Err(Error::Capability(note).into());
    }
    Ok(report.targets.len())
}

/// Test accuracy of a checkpoint, in percent.
pub fn eval_cmd<T: Scalar>(ctx: &Context, checkpoint: Option<&Path>) -> Result<(f64, usize)> {
    let (_, test_set) = ctx.data::<T>()?;
    let net: Network<T> = load_model(ctx.checkpoint(checkpoint, &[BEST_DIR, BASELINE_DIR])?)?;
    check_compatible(&net, &test_set)?;
    Ok((100.0 * evaluate(&net, &test_set)?, test_set.len()))
}

/// Writes `scores/layer<k>.csv` for every prunable layer.
pub fn scores_cmd<T: Scalar>(ctx: &Context, checkpoint: Option<&Path>, n: Option<usize>) -> Result<Vec<PathBuf>> {
    let n = n
        .or(ctx.cfg.prune.as_ref().map(|p| p.n_pruning_samples))
        .ok_or_else(|| Error::Config("n: pass --n or set prune.n_pruning_samples".into()))?;
    let (train_set, _) = ctx.data::<T>()?;
    let net: Network<T> = load_model(ctx.checkpoint(checkpoint, &[BEST_DIR, BASELINE_DIR])?)?;
    check_compatible(&net, &train_set)?;
    let inputs = probe_set(&net, &train_set, n, ctx.seed)?;
    let dir = ctx.out.join("scores");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut written = Vec::new();
    for (layer, scores) in network_importance(&net, &inputs)? {
        let path = dir.join(format!("layer{layer}.csv"));
        let mut buf = Vec::new();
        write_scores_csv(&scores, &mut buf).map_err(io_err(&path))?;
        fs::write(&path, buf).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Serialize)]
struct ModelMetrics {
    iteration: usize,
    flops: FlopsReport,
    compression: CompressionReport,
}

#[derive(Serialize)]
struct Homogenization {
    /// Largest over smallest positive live score of the baseline network.
    max_min_ratio_before: Option<f64>,
    /// The same ratio over the final network's kept scores.
    max_min_ratio_after: Option<f64>,
}

#[derive(Serialize)]
struct Metrics {
    baseline_accuracy: Option<f64>,
    best_iteration: Option<usize>,
    iterations: Vec<IterationReport>,
    final_model: ModelMetrics,
    best_model: Option<ModelMetrics>,
    homogenization: Homogenization,
    heatmaps: Vec<String>,
}

fn active_scores<T: Scalar>(all: &[(usize, ImportanceScores<T>)]) -> Vec<f64> {
    all.iter()
        .flat_map(|(_, s)| s.active_scores())
        .map(|v| v.as_f64())
        .collect()
}

/// Summarizes a finished (or partial) run directory.
///
/// Score statistics and heatmaps need the training data and are produced
/// only when the run's `config.json` is present.
pub fn report_cmd(out: &Path, cfg: Option<&RunConfig>, seed: Option<u64>) -> Result<PathBuf> {
    let history = read_history(&out.join(HISTORY_FILE))?;
    let last = history
        .last()
        .ok_or_else(|| Error::Config(format!("out: no {HISTORY_FILE} in {}", out.display())))?;
    let final_dir = out.join(format!("iter_{:03}", last.iteration));
    match model_dtype(&final_dir)? {
        Dtype::F32 => report_typed::<f32>(out, &history, cfg, seed),
        Dtype::F64 => report_typed::<f64>(out, &history, cfg, seed),
    }
}

fn read_json_field(path: &Path, field: &str) -> Option<serde_json::Value> {
    let text = fs::read_to_string(path).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get(field).cloned()
}

fn model_metrics<T: Scalar>(
    net: &Network<T>,
    iteration: usize,
    before: Option<&[f64]>,
    after: Option<&[f64]>,
) -> Result<ModelMetrics> {
    Ok(ModelMetrics {
        iteration,
        flops: masked_flops(net)?,
        compression: compression_stats(net, before, after),
    })
}

fn report_typed<T: Scalar>(
    out: &Path,
    history: &[IterationReport],
    cfg: Option<&RunConfig>,
    seed: Option<u64>,
) -> Result<PathBuf> {
    let last = history.last().expect("non-empty history").iteration;
    let final_net: Network<T> = load_model(out.join(format!("iter_{last:03}")))?;
    let best = read_json_field(&out.join(BEST_FILE), "iteration").and_then(|v| v.as_u64().map(|b| b as usize));
    let baseline_accuracy = read_json_field(&out.join(RUN_FILE), "baseline_accuracy").and_then(|v| v.as_f64());

    let mut before = None;
    let mut after = None;
    let mut heatmaps = Vec::new();
    if let (Some(cfg), Some(seed)) = (cfg, seed) {
        let ctx = Context {
            cfg: cfg.clone(),
            seed,
            out: out.to_path_buf(),
        };
        let (train_set, _) = ctx.data::<T>()?;
        check_compatible(&final_net, &train_set)?;
        let n = cfg.prune.as_ref().map_or(1000, |p| p.n_pruning_samples).min(train_set.len());
        let inputs = probe_set(&final_net, &train_set, n, seed)?;
        let final_scores = network_importance(&final_net, &inputs)?;
        after = Some(active_scores(&final_scores));
        let baseline_dir = out.join(BASELINE_DIR);
        if baseline_dir.join(MODEL_MANIFEST_FILE).is_file() {
            let baseline: Network<T> = load_model(&baseline_dir)?;
            before = Some(active_scores(&network_importance(&baseline, &inputs)?));
        }
        let dir = out.join("heatmaps");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (layer, scores) in &final_scores {
            if let Layer::Dense(_) = &final_net.layers()[*layer] {
                let (s, m) = export_heatmaps(&dir, *layer, &final_net.layers()[*layer], scores)?;
                for p in [s, m] {
                    heatmaps.push(format!("heatmaps/{}", p.file_name().expect("file").to_string_lossy()));
                }
            }
        }
    }

    let final_model = model_metrics(&final_net, last, before.as_deref(), after.as_deref())?;
    let best_model = match best {
        Some(b) if b != last => {
            let net: Network<T> = load_model(out.join(format!("iter_{b:03}")))?;
            Some(model_metrics(&net, b, None, None)?)
        }
        Some(b) => Some(model_metrics(&final_net, b, None, None)?),
        None => None,
    };
    let ratio = |s: &Option<relief_core::metrics::ScoreStats>| s.as_ref().and_then(|s| s.max_min_ratio);
    let homogenization = Homogenization {
        max_min_ratio_before: ratio(&final_model.compression.scores_before),
        max_min_ratio_after: ratio(&final_model.compression.scores_after),
    };
    let metrics = Metrics {
        baseline_accuracy,
        best_iteration: best,
        iterations: history.to_vec(),
        final_model,
        best_model,
        homogenization,
        heatmaps,
    };
    let path = out.join(METRICS_FILE);
    write_json(&path, &metrics)?;

    let accuracy = line_chart(
        "Test accuracy per iteration",
        "accuracy (%)",
        &[
            Series {
                name: "after retraining",
                values: history.iter().map(|r| r.accuracy).collect(),
            },
            Series {
                name: "after pruning",
                values: history.iter().map(|r| r.accuracy_pruned).collect(),
            },
        ],
    );
    let remaining = line_chart(
        "Remaining parameters per iteration",
        "remaining (%)",
        &[Series {
            name: "remaining",
            values: history.iter().map(|r| 100.0 * r.remaining_fraction).collect(),
        }],
    );
    for (name, body) in [("accuracy.svg", accuracy), ("remaining.svg", remaining)] {
        let p = out.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
    }
    Ok(path)
}
