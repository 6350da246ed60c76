//! The prune -> (reinit | finetune) -> retrain -> evaluate loop.
//!
//! With an output directory every completed iteration leaves
//! `iter_XXX/` (model plus `optimizer.json`) and one line of `history.jsonl`.
//! A rerun with the same configuration resumes after the last line.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerConfig;
use super::train::{evaluate, train};
use super::{derive_seed, init_params};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::importance::{check_alpha, draw_pruning_set, prune_pass};
use crate::metrics::{kept_scores, layer_sparsity, masked_flops, score_stats, LayerSparsity, ScoreStats};
use crate::network::{load_model, save_model, Network};
use crate::scalar::Scalar;

pub const HISTORY_FILE: &str = "history.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const BEST_FILE: &str = "best.json";
pub const OPTIMIZER_FILE: &str = "optimizer.json";

/// How surviving weights restart before each retraining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrainMode {
    /// Back to the run's original initial values.
    #[default]
    Reinit,
    /// Keep the post-pruning values.
    Finetune,
    /// A fresh He-normal draw per iteration.
    Fresh,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruningSetPolicy {
    /// One pruning set for the whole run.
    Fixed,
    /// A new draw every iteration.
    #[default]
    Resample,
}

fn default_alpha() -> f64 {
    0.95
}
fn default_n() -> usize {
    1000
}
fn default_tolerance() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    #[serde(default = "default_alpha")]
    pub alpha_conv: f64,
    #[serde(default = "default_alpha")]
    pub alpha_fc: f64,
    #[serde(default = "default_n")]
    pub n_pruning_samples: usize,
    pub iterations: usize,
    #[serde(default)]
    pub retrain_mode: RetrainMode,
    #[serde(default)]
    pub pruning_set_policy: PruningSetPolicy,
    #[serde(default)]
    pub seed: u64,
    /// Largest accepted accuracy drop from the baseline, in percentage points.
    #[serde(default = "default_tolerance")]
    pub accuracy_tolerance: f64,
}

impl PruneConfig {
    pub fn new(alpha_conv: f64, alpha_fc: f64, n_pruning_samples: usize, iterations: usize, seed: u64) -> Self {
        Self {
            alpha_conv,
            alpha_fc,
            n_pruning_samples,
            iterations,
            retrain_mode: RetrainMode::default(),
            pruning_set_policy: PruningSetPolicy::default(),
            seed,
            accuracy_tolerance: default_tolerance(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha_conv).map_err(|_| Error::Config("alpha_conv must lie in (0, 1]".into()))?;
        check_alpha(self.alpha_fc).map_err(|_| Error::Config("alpha_fc must lie in (0, 1]".into()))?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.n_pruning_samples == 0 {
            return Err(Error::EmptyPruningSet);
        }
        if !(self.accuracy_tolerance >= 0.0) {
            return Err(Error::Config("accuracy_tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// One line of `history.jsonl`. Accuracies are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    /// Test accuracy right after pruning, before any retraining.
    pub accuracy_pruned: f64,
    /// Test accuracy after retraining.
    pub accuracy: f64,
    /// Baseline accuracy minus `accuracy`, in points.
    pub accuracy_drop: f64,
    pub parameters: usize,
    pub active: usize,
    pub remaining_fraction: f64,
    pub compression: Option<f64>,
    pub flops_pruned_pct: f64,
    pub layers: Vec<LayerSparsity>,
    /// Scores of contributors that were live when scored.
    pub scores_before: Option<ScoreStats>,
    /// Scores of the contributors this pass kept.
    pub scores_after: Option<ScoreStats>,
    pub final_train_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub baseline_accuracy: f64,
    pub reports: Vec<IterationReport>,
    /// 1-based iteration chosen by [`best_iteration`].
    pub best: Option<usize>,
}

/// Latest iteration whose accuracy drop is within `tolerance` points.
///
/// Compression never decreases across iterations, so this is the most
/// compressed acceptable network.
pub fn best_iteration(reports: &[IterationReport], tolerance: f64) -> Option<usize> {
    reports
        .iter()
        .rev()
        .find(|r| r.accuracy_drop <= tolerance)
        .map(|r| r.iteration)
}

/// Networks and data for [`iterate`].
pub struct RunInputs<'a, T> {
    /// Parameters before baseline training; reinit restores these.
    pub initial: &'a Network<T>,
    /// The trained network the first iteration prunes.
    pub baseline: &'a Network<T>,
    /// Source of pruning sets and retraining data.
    pub train: &'a Dataset<T>,
    /// Data for every reported accuracy.
    pub test: &'a Dataset<T>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct RunRecord {
    prune: PruneConfig,
    retrain: OptimizerConfig,
    baseline_accuracy: f64,
}

/// Reads the complete lines of a history file.
pub fn read_history(path: &Path) -> Result<Vec<IterationReport>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let complete = match text.rfind('\n') {
        Some(end) => &text[..=end],
        None => "",
    };
    complete
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

fn iter_dir(out: &Path, iteration: usize) -> std::path::PathBuf {
    out.join(format!("iter_{iteration:03}"))
}

fn pct(fraction: f64) -> f64 {
    100.0 * fraction
}

/// Runs `pcfg.iterations` prune/retrain rounds starting from `inputs.baseline`.
pub fn iterate<T: Scalar>(
    inputs: RunInputs<'_, T>,
    pcfg: &PruneConfig,
    retrain: &OptimizerConfig,
    out: Option<&Path>,
) -> Result<RunSummary> {
    pcfg.validate()?;
    retrain.validate()?;
    if pcfg.n_pruning_samples > inputs.train.len() {
        return Err(Error::Config(format!(
            "n_pruning_samples = {} exceeds the {} training samples",
            pcfg.n_pruning_samples,
            inputs.train.len()
        )));
    }
    let baseline_accuracy = pct(evaluate(inputs.baseline, inputs.test)?);
    let record = RunRecord {
        prune: pcfg.clone(),
        retrain: retrain.clone(),
        baseline_accuracy,
    };

    let mut reports = Vec::new();
    let mut current = inputs.baseline.clone();
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let run_path = out.join(RUN_FILE);
        let history_path = out.join(HISTORY_FILE);
        if run_path.exists() {
            let text = fs::read_to_string(&run_path).map_err(|e| Error::io(&run_path, e))?;
            let mut previous: RunRecord = serde_json::from_str(&text)?;
            // extending a run only changes the iteration count
            previous.prune.iterations = record.prune.iterations;
            if previous != record {
                return Err(Error::Config(format!(
                    "{} belongs to a different configuration or baseline",
                    out.display()
                )));
            }
            reports = read_history(&history_path)?;
            // drop a torn final line, if any
            let mut text = String::new();
            for r in &reports {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            fs::write(&history_path, text).map_err(|e| Error::io(&history_path, e))?;
            if let Some(last) = reports.last() {
                current = load_model(iter_dir(out, last.iteration))?;
            }
        } else {
            let _ = fs::remove_file(&history_path);
        }
        {
            fs::write(&run_path, serde_json::to_string_pretty(&record)? + "\n").map_err(|e| Error::io(&run_path, e))?;
        }
    }

    let input_shape = current.input_shape().to_vec();
    for iteration in reports.len() + 1..=pcfg.iterations {
        let it = iteration as u64;
        let draw_round = match pcfg.pruning_set_policy {
            PruningSetPolicy::Fixed => 0,
            PruningSetPolicy::Resample => it,
        };
        let idx = draw_pruning_set(inputs.train.len(), pcfg.n_pruning_samples, derive_seed(pcfg.seed, draw_round, 1))?;
        let (pruning_set, _) = inputs.train.batch(&idx, &input_shape)?;
        let pass = prune_pass(&current, &pruning_set, T::lit(pcfg.alpha_conv), T::lit(pcfg.alpha_fc))?;
        let pruned = pass.network;
        let accuracy_pruned = pct(evaluate(&pruned, inputs.test)?);

        let mut before = Vec::new();
        let mut after = Vec::new();
        for lp in &pass.layers {
            let (b, a) = kept_scores(&pruned, lp.layer, &lp.scores)?;
            before.extend(b);
            after.extend(a);
        }

        let mut next = match pcfg.retrain_mode {
            RetrainMode::Finetune => pruned.clone(),
            RetrainMode::Reinit => {
                let mut n = inputs.initial.clone();
                n.copy_masks_from(&pruned)?;
                n
            }
            RetrainMode::Fresh => {
                let mut n = inputs.initial.clone();
                init_params(&mut n, derive_seed(pcfg.seed, it, 3));
                n.copy_masks_from(&pruned)?;
                n
            }
        };
        let (log, optimizer) = train(&mut next, inputs.train, retrain, derive_seed(pcfg.seed, it, 2))?;
        next.check_invariants()?;
        let accuracy = pct(evaluate(&next, inputs.test)?);
        let parameters = next.parameter_count();
        let active = next.active_parameter_count();
        let report = IterationReport {
            iteration,
            accuracy_pruned,
            accuracy,
            accuracy_drop: baseline_accuracy - accuracy,
            parameters,
            active,
            remaining_fraction: active as f64 / parameters as f64,
            compression: (active > 0).then(|| parameters as f64 / active as f64),
            flops_pruned_pct: masked_flops(&next)?.pruned_pct,
            layers: layer_sparsity(&next),
            scores_before: score_stats(&before),
            scores_after: score_stats(&after),
            final_train_loss: log.epoch_losses.last().copied(),
        };
        if let Some(out) = out {
            let dir = iter_dir(out, iteration);
            save_model(&next, &dir)?;
            let opt_path = dir.join(OPTIMIZER_FILE);
            fs::write(&opt_path, serde_json::to_string(&optimizer.to_record())?).map_err(|e| Error::io(&opt_path, e))?;
            let history_path = out.join(HISTORY_FILE);
            let mut line = serde_json::to_string(&report)?;
            line.push('\n');
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&history_path)
                .and_then(|mut f| f.write_all(line.as_bytes()))
                .map_err(|e| Error::io(&history_path, e))?;
        }
        reports.push(report);
        current = next;
    }

    let best = best_iteration(&reports, pcfg.accuracy_tolerance);
    if let Some(out) = out {
        let best_path = out.join(BEST_FILE);
        let body = serde_json::json!({
            "iteration": best,
            "accuracy_tolerance": pcfg.accuracy_tolerance,
            "baseline_accuracy": baseline_accuracy,
        });
        fs::write(&best_path, serde_json::to_string_pretty(&body)? + "\n").map_err(|e| Error::io(&best_path, e))?;
    }
    Ok(RunSummary {
        baseline_accuracy,
        reports,
        best,
    })
}
