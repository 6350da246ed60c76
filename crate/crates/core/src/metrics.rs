//! FLOPs accounting, compression statistics and score-distribution reports.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{format_sig9, ImportanceScores};
use crate::network::{Layer, Network, Prunable};
use crate::scalar::Scalar;

/// FLOPs of a dense layer with `inputs` inputs and `outputs` neurons: `(2I - 1) O`.
pub fn flops_dense(inputs: usize, outputs: usize) -> Result<u64> {
    if inputs == 0 || outputs == 0 {
        return Err(Error::Config(format!("dense FLOPs need I, O >= 1, got I={inputs}, O={outputs}")));
    }
    Ok((2 * inputs as u64 - 1) * outputs as u64)
}

/// FLOPs of a conv layer on an `h x w` input: `2 h w (C_in K^2 + 1) C_out`.
pub fn flops_conv(h: usize, w: usize, c_in: usize, k: usize, c_out: usize) -> Result<u64> {
    if [h, w, c_in, k, c_out].contains(&0) {
        return Err(Error::Config(format!(
            "conv FLOPs need positive sizes, got H={h}, W={w}, C_in={c_in}, K={k}, C_out={c_out}"
        )));
    }
    let (h, w, c_in, k, c_out) = (h as u64, w as u64, c_in as u64, k as u64, c_out as u64);
    Ok(2 * h * w * (c_in * k * k + 1) * c_out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerDims {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        h: usize,
        w: usize,
        c_in: usize,
        k: usize,
        c_out: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: usize,
    #[serde(flatten)]
    pub dims: LayerDims,
    pub baseline: u64,
    pub masked: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub baseline_total: u64,
    pub masked_total: u64,
    pub pruned_pct: f64,
}

/// Dense and masked FLOPs of every dense and conv layer.
///
/// Masking replaces `2I - 1` with `2u - 1` per neuron (`u` live inputs) and
/// `C_in K^2 + 1` with `u K^2 + [bias live]` per filter. A neuron with no
/// live inputs costs nothing.
pub fn masked_flops<T: Scalar>(net: &Network<T>) -> Result<FlopsReport> {
    let mut layers = Vec::new();
    let mut shape = net.input_shape().to_vec();
    for (l, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Dense(d) => {
                let baseline = flops_dense(d.inputs(), d.outputs())?;
                let masked = (0..d.outputs())
                    .map(|j| {
                        let live = (0..d.inputs()).filter(|&i| d.is_active(j, i)).count() as u64;
                        if live == 0 {
                            0
                        } else {
                            2 * live - 1
                        }
                    })
                    .sum();
                layers.push(LayerFlops {
                    layer: l,
                    dims: LayerDims::Dense {
                        inputs: d.inputs(),
                        outputs: d.outputs(),
                    },
                    baseline,
                    masked,
                });
            }
            Layer::Conv(c) => {
                let (h, w, c_in, k, c_out) = (shape[1], shape[2], c.in_channels(), c.kernel_size(), c.out_channels());
                let baseline = flops_conv(h, w, c_in, k, c_out)?;
                let plane = 2 * (h * w) as u64;
                let masked = (0..c_out)
                    .map(|j| {
                        let live = (0..c_in).filter(|&i| c.is_active(j, i)).count() as u64;
                        let bias = u64::from(c.is_active(j, c_in));
                        plane * (live * (k * k) as u64 + bias)
                    })
                    .sum();
                layers.push(LayerFlops {
                    layer: l,
                    dims: LayerDims::Conv { h, w, c_in, k, c_out },
                    baseline,
                    masked,
                });
            }
            _ => {}
        }
        shape = layer.output_shape(&shape)?;
    }
    let baseline_total: u64 = layers.iter().map(|l| l.baseline).sum();
    let masked_total: u64 = layers.iter().map(|l| l.masked).sum();
    let pruned_pct = if baseline_total == 0 {
        0.0
    } else {
        100.0 * (1.0 - masked_total as f64 / baseline_total as f64)
    };
    Ok(FlopsReport {
        layers,
        baseline_total,
        masked_total,
        pruned_pct,
    })
}

/// Summary of a score distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub gini: f64,
    /// `max / min`, absent when the minimum is zero.
    pub max_min_ratio: Option<f64>,
}

/// Population statistics and Gini coefficient; `None` for an empty slice.
pub fn score_stats(values: &[f64]) -> Option<ScoreStats> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let sum: f64 = sorted.iter().sum();
    let mean = sum / n;
    let std = (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let gini = if sum > 0.0 {
        let weighted: f64 = sorted
            .iter()
            .enumerate()
            .map(|(i, v)| (2.0 * (i as f64 + 1.0) - n - 1.0) * v)
            .sum();
        weighted / (n * sum)
    } else {
        0.0
    };
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    Some(ScoreStats {
        count: sorted.len(),
        min,
        max,
        mean,
        std,
        gini,
        max_min_ratio: (min > 0.0).then(|| max / min),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: usize,
    pub kind: String,
    pub parameters: usize,
    pub active: usize,
    /// Fraction of the layer's parameters that are masked.
    pub sparsity: f64,
}

pub fn layer_sparsity<T: Scalar>(net: &Network<T>) -> Vec<LayerSparsity> {
    net.layers()
        .iter()
        .enumerate()
        .filter_map(|(l, layer)| {
            let p = layer.as_prunable()?;
            let (parameters, active) = (p.parameter_count(), p.active_parameter_count());
            Some(LayerSparsity {
                layer: l,
                kind: layer.kind().to_string(),
                parameters,
                active,
                sparsity: 1.0 - active as f64 / parameters as f64,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub parameters: usize,
    pub active: usize,
    pub remaining_pct: f64,
    pub pruned_pct: f64,
    /// `parameters / active`; absent when nothing is left.
    pub compression: Option<f64>,
    pub layers: Vec<LayerSparsity>,
    pub scores_before: Option<ScoreStats>,
    pub scores_after: Option<ScoreStats>,
}

/// Parameter counts from the masks plus optional score statistics.
pub fn compression_stats<T: Scalar>(
    net: &Network<T>,
    scores_before: Option<&[f64]>,
    scores_after: Option<&[f64]>,
) -> CompressionReport {
    let parameters = net.parameter_count();
    let active = net.active_parameter_count();
    let remaining = active as f64 / parameters as f64;
    CompressionReport {
        parameters,
        active,
        remaining_pct: 100.0 * remaining,
        pruned_pct: 100.0 - 100.0 * remaining,
        compression: (active > 0).then(|| parameters as f64 / active as f64),
        layers: layer_sparsity(net),
        scores_before: scores_before.and_then(score_stats),
        scores_after: scores_after.and_then(score_stats),
    }
}

/// Scores of live contributors, and of those that survive `network`'s masks.
pub fn kept_scores<T: Scalar>(
    network: &Network<T>,
    layer: usize,
    scores: &ImportanceScores<T>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = network.layers()[layer]
        .as_prunable()
        .ok_or_else(|| Error::Capability(format!("layer {layer} is not prunable")))?;
    let mut before = Vec::new();
    let mut after = Vec::new();
    for (j, t) in scores.targets.iter().enumerate() {
        for (i, &s) in t.scores.iter().enumerate() {
            if scores.is_active(j, i) {
                before.push(s.as_f64());
                if p.is_active(j, i) {
                    after.push(s.as_f64());
                }
            }
        }
    }
    Ok((before, after))
}

/// Score and magnitude matrices of a dense layer, both `outputs x inputs`.
pub fn heatmap_matrices<T: Scalar>(layer: &Layer<T>, scores: &ImportanceScores<T>) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>)> {
    let d = match layer {
        Layer::Dense(d) => d,
        other => {
            return Err(Error::Capability(format!(
                "heatmaps are defined for dense layers, not {}",
                other.kind()
            )))
        }
    };
    if scores.targets.len() != d.outputs() || scores.contributors != d.inputs() {
        return Err(Error::dim("scores do not match the layer shape"));
    }
    let score_rows = scores.targets.iter().map(|t| t.scores[..d.inputs()].to_vec()).collect();
    let magnitude_rows = (0..d.outputs())
        .map(|j| (0..d.inputs()).map(|i| d.weight(j, i).abs()).collect())
        .collect();
    Ok((score_rows, magnitude_rows))
}

fn write_matrix<T: Scalar>(path: &Path, note: &str, rows: &[Vec<T>]) -> Result<()> {
    let cols = rows.first().map_or(0, Vec::len);
    let mut text = format!("# {note}\ntarget");
    for i in 0..cols {
        text.push_str(&format!(",in{i}"));
    }
    text.push('\n');
    for (j, row) in rows.iter().enumerate() {
        text.push_str(&j.to_string());
        for &v in row {
            text.push(',');
            text.push_str(&format_sig9(v));
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `layer<k>_scores.csv` and `layer<k>_magnitudes.csv` into `dir`.
pub fn export_heatmaps<T: Scalar>(
    dir: &Path,
    index: usize,
    layer: &Layer<T>,
    scores: &ImportanceScores<T>,
) -> Result<(PathBuf, PathBuf)> {
    let (s, m) = heatmap_matrices(layer, scores)?;
    let sp = dir.join(format!("layer{index}_scores.csv"));
    let mp = dir.join(format!("layer{index}_magnitudes.csv"));
    write_matrix(&sp, "importance scores; rows are targets and sum to 1 with the omitted bias score", &s)?;
    write_matrix(&mp, "absolute weights; rows are targets", &m)?;
    Ok((sp, mp))
}
