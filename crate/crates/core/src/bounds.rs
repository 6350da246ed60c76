//! Error bounds for pruning one layer, and their empirical counterparts.
//!
//! Pruning contributors of target `j` with total importance `S_j` and kept
//! mass `m_j` moves its pre-activation by at most `S_j (1 - m_j)` on average
//! over the pruning set, and its activation by at most `C` times that for a
//! `C`-Lipschitz activation. For dense tails the per-target bounds propagate
//! to the logits through the absolute weights of the later layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{check_alpha, layer_importance, select_kept, ImportanceScores, PruneDecision};
use crate::network::{Activation, ConvLayer, DenseLayer, Layer, Network};
use crate::scalar::Scalar;
use crate::tensor::{frobenius_norm, Tensor};

/// `C S (1 - alpha)` for a neuron.
pub fn fc_neuron_bound<T: Scalar>(total: T, alpha: T, lipschitz: T) -> T {
    lipschitz * total * (T::one() - alpha)
}

/// `C S (1 - alpha)` for a filter, in Frobenius norm of its output map.
pub fn conv_filter_bound<T: Scalar>(total: T, alpha: T, lipschitz: T) -> T {
    fc_neuron_bound(total, alpha, lipschitz)
}

/// Mean and per-sample deviation of one target.
#[derive(Clone, Debug, PartialEq)]
pub struct Deviation<T> {
    /// Mean pre-activation deviation.
    pub delta: T,
    /// Mean post-activation deviation.
    pub big_delta: T,
    pub per_sample_delta: Vec<T>,
    pub per_sample_big_delta: Vec<T>,
}

fn mean<T: Scalar>(v: &[T]) -> T {
    let mut acc = T::zero();
    for &x in v {
        acc += x;
    }
    acc / T::from_usize(v.len().max(1)).expect("count")
}

fn deviation<T: Scalar>(delta: Vec<T>, big: Vec<T>) -> Deviation<T> {
    Deviation {
        delta: mean(&delta),
        big_delta: mean(&big),
        per_sample_delta: delta,
        per_sample_big_delta: big,
    }
}

/// Per-neuron `|z - z'|` and `|a - a'|` between two dense layers of equal shape.
pub fn measure_fc_deviation<T: Scalar>(
    before: &DenseLayer<T>,
    after: &DenseLayer<T>,
    inputs: &Tensor<T>,
) -> Result<Vec<Deviation<T>>> {
    if before.weights.shape() != after.weights.shape() || before.activation != after.activation {
        return Err(Error::dim("layers differ in shape or activation"));
    }
    if inputs.outer() == 0 {
        return Err(Error::EmptyPruningSet);
    }
    let zb = before.preactivation(inputs)?;
    let za = after.preactivation(inputs)?;
    let act = before.activation;
    let (n, m) = (inputs.outer(), before.outputs());
    Ok((0..m)
        .map(|j| {
            let mut d = Vec::with_capacity(n);
            let mut big = Vec::with_capacity(n);
            for s in 0..n {
                let (b, a) = (zb.sample(s)[j], za.sample(s)[j]);
                d.push((b - a).abs());
                big.push((act.apply(b) - act.apply(a)).abs());
            }
            deviation(d, big)
        })
        .collect())
}

/// Per-filter Frobenius deviations of the output maps of two conv layers.
pub fn measure_conv_deviation<T: Scalar>(
    before: &ConvLayer<T>,
    after: &ConvLayer<T>,
    inputs: &Tensor<T>,
) -> Result<Vec<Deviation<T>>> {
    if before.kernels.shape() != after.kernels.shape()
        || before.geometry != after.geometry
        || before.activation != after.activation
    {
        return Err(Error::dim("layers differ in shape, geometry or activation"));
    }
    if inputs.outer() == 0 {
        return Err(Error::EmptyPruningSet);
    }
    let zb = before.preactivation(inputs)?;
    let za = after.preactivation(inputs)?;
    let act = before.activation;
    let (n, o) = (inputs.outer(), before.out_channels());
    let plane = zb.inner_len() / o;
    let mut pre = vec![Vec::with_capacity(n); o];
    let mut post = vec![Vec::with_capacity(n); o];
    let mut diff = vec![T::zero(); plane];
    let mut adiff = vec![T::zero(); plane];
    for s in 0..n {
        for j in 0..o {
            let b = &zb.sample(s)[j * plane..(j + 1) * plane];
            let a = &za.sample(s)[j * plane..(j + 1) * plane];
            for k in 0..plane {
                diff[k] = b[k] - a[k];
                adiff[k] = act.apply(b[k]) - act.apply(a[k]);
            }
            pre[j].push(frobenius_norm(&diff));
            post[j].push(frobenius_norm(&adiff));
        }
    }
    Ok(pre.into_iter().zip(post).map(|(d, p)| deviation(d, p)).collect())
}

/// Residual bounds `S (1 - cumulative mass)` along descending scores.
pub fn residual_curve<T: Scalar>(sorted_desc: &[T], total: T) -> Vec<T> {
    let mut cum = T::zero();
    sorted_desc
        .iter()
        .map(|&s| {
            cum += s;
            (total * (T::one() - cum)).max(T::zero())
        })
        .collect()
}

fn dense_tail<T: Scalar>(net: &Network<T>, layer: usize) -> Result<Vec<&DenseLayer<T>>> {
    net.layers()[layer..]
        .iter()
        .map(|l| match l {
            Layer::Dense(d) => Ok(d),
            other => Err(Error::Capability(format!(
                "output bound needs dense layers from the pruned layer on; found {}",
                other.kind()
            ))),
        })
        .collect()
}

/// Per-logit bound on the mean absolute logit change when only `layer` is
/// pruned and target `j` loses `residual[j] = S_j (1 - m_j)` of its signal.
///
/// The bound `C_l residual` is pushed through every later dense layer as
/// `u <- C_k |W_k| u`; the identity output layer has `C = 1`.
pub fn network_output_bound<T: Scalar>(net: &Network<T>, layer: usize, residual: &[T]) -> Result<Vec<T>> {
    if layer >= net.layers().len() {
        return Err(Error::Index(format!("layer {layer} of {}", net.layers().len())));
    }
    let tail = dense_tail(net, layer)?;
    if residual.len() != tail[0].outputs() {
        return Err(Error::dim(format!(
            "{} residuals for {} targets",
            residual.len(),
            tail[0].outputs()
        )));
    }
    let lip = |a: Activation| T::lit(a.lipschitz());
    let c0 = lip(tail[0].activation);
    let mut u: Vec<T> = residual.iter().map(|&r| c0 * r).collect();
    for d in &tail[1..] {
        let c = lip(d.activation);
        u = (0..d.outputs())
            .map(|j| {
                let mut acc = T::zero();
                for (i, &ui) in u.iter().enumerate() {
                    acc += d.weight(j, i).abs() * ui;
                }
                c * acc
            })
            .collect();
    }
    Ok(u)
}

/// Same as [`network_output_bound`] with the uniform worst case `1 - alpha`.
pub fn network_output_bound_alpha<T: Scalar>(
    net: &Network<T>,
    layer: usize,
    alpha: T,
    scores: &ImportanceScores<T>,
) -> Result<Vec<T>> {
    let residual: Vec<T> = scores.targets.iter().map(|t| t.total * (T::one() - alpha)).collect();
    network_output_bound(net, layer, &residual)
}

/// Mean `|logit_before - logit_after|` per output over `inputs`.
pub fn measure_output_deviation<T: Scalar>(before: &Network<T>, after: &Network<T>, inputs: &Tensor<T>) -> Result<Vec<T>> {
    let (a, _) = before.forward_batch(inputs, false)?;
    let (b, _) = after.forward_batch(inputs, false)?;
    let n = inputs.outer();
    if n == 0 {
        return Err(Error::EmptyPruningSet);
    }
    let k = a.inner_len();
    let mut acc = vec![T::zero(); k];
    for s in 0..n {
        for (m, (x, y)) in acc.iter_mut().zip(a.sample(s).iter().zip(b.sample(s))) {
            *m += (*x - *y).abs();
        }
    }
    let inv = T::one() / T::from_usize(n).expect("count");
    Ok(acc.into_iter().map(|v| v * inv).collect())
}

/// One record of `bounds.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetBound {
    pub layer: usize,
    pub target: usize,
    #[serde(rename = "S")]
    pub total: f64,
    pub alpha: f64,
    pub kept_mass: f64,
    /// Total score of the pruned contributors, `1 - kept_mass` up to rounding.
    pub pruned_mass: f64,
    #[serde(rename = "C")]
    pub lipschitz: f64,
    /// `C S pruned_mass`.
    pub bound: f64,
    /// `C S (1 - alpha)`, never smaller than `bound`.
    pub bound_alpha: f64,
    pub measured_delta: f64,
    #[serde(rename = "measured_Delta")]
    pub measured_big_delta: f64,
    pub per_sample_delta: Vec<f64>,
    #[serde(rename = "per_sample_Delta")]
    pub per_sample_big_delta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitBound {
    pub output: usize,
    /// Bound from the achieved kept masses.
    pub bound: f64,
    /// Bound from `alpha`.
    pub bound_alpha: f64,
    pub measured: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub layer: usize,
    pub kind: String,
    pub alpha: f64,
    pub samples: usize,
    pub targets: Vec<TargetBound>,
    /// Absent when the layers after the pruned one are not all dense.
    pub logits: Option<Vec<LogitBound>>,
    pub note: Option<String>,
}

impl BoundReport {
    /// Targets or logits whose measured deviation exceeds its bound by more than `tol`.
    pub fn violations(&self, tol: f64) -> usize {
        let t = self
            .targets
            .iter()
            .filter(|t| {
                t.measured_delta > t.total * t.pruned_mass + tol
                    || t.measured_big_delta > t.lipschitz * t.measured_delta + tol
                    || t.measured_big_delta > t.bound + tol
            })
            .count();
        let l = self
            .logits
            .iter()
            .flatten()
            .filter(|l| l.measured > l.bound + tol)
            .count();
        t + l
    }
}

/// Mass lost by a target. Summing the pruned scores, rather than taking
/// `1 - kept_mass`, keeps it exactly zero when nothing is pruned.
fn pruned_mass<T: Scalar>(scores: &[T], d: &PruneDecision<T>) -> f64 {
    d.pruned.iter().map(|&i| scores[i].as_f64()).sum()
}

/// Prunes a copy of `net` at `layer` only (no retraining) and compares every
/// bound with the deviations measured on `inputs`.
pub fn bound_report<T: Scalar>(net: &Network<T>, layer: usize, alpha: T, inputs: &Tensor<T>) -> Result<BoundReport> {
    check_alpha(alpha)?;
    if inputs.rank() < 2 || inputs.outer() == 0 {
        return Err(Error::EmptyPruningSet);
    }
    let target_layer = net
        .layer(layer)
        .ok_or_else(|| Error::Index(format!("layer {layer} of {}", net.layers().len())))?;
    if target_layer.as_prunable().is_none() {
        return Err(Error::Capability(format!("layer {layer} ({}) is not prunable", target_layer.kind())));
    }
    let (_, trace) = net.forward_batch(inputs, true)?;
    let trace = trace.expect("captured");
    let layer_in = trace.input_to(layer);
    let scores = layer_importance(target_layer, layer_in)?;
    let decisions: Vec<PruneDecision<T>> = scores
        .targets
        .iter()
        .map(|t| select_kept(&t.scores, alpha))
        .collect::<Result<_>>()?;
    let mut pruned = net.clone();
    for (j, d) in decisions.iter().enumerate() {
        pruned.layers_mut()[layer].apply_mask(j, &d.pruned)?;
    }
    let (deviations, activation) = match (&net.layers()[layer], &pruned.layers()[layer]) {
        (Layer::Dense(a), Layer::Dense(b)) => (measure_fc_deviation(a, b, layer_in)?, a.activation),
        (Layer::Conv(a), Layer::Conv(b)) => (measure_conv_deviation(a, b, layer_in)?, a.activation),
        _ => unreachable!("checked prunable"),
    };
    let c = activation.lipschitz();
    let a64 = alpha.as_f64();
    let targets: Vec<TargetBound> = scores
        .targets
        .iter()
        .zip(&decisions)
        .zip(deviations)
        .enumerate()
        .map(|(j, ((t, d), dev))| {
            let total = t.total.as_f64();
            let pruned_mass = pruned_mass(&t.scores, d);
            TargetBound {
                layer,
                target: j,
                total,
                alpha: a64,
                kept_mass: d.kept_mass.as_f64(),
                pruned_mass,
                lipschitz: c,
                bound: c * total * pruned_mass,
                bound_alpha: c * total * (1.0 - a64),
                measured_delta: dev.delta.as_f64(),
                measured_big_delta: dev.big_delta.as_f64(),
                per_sample_delta: dev.per_sample_delta.iter().map(|v| v.as_f64()).collect(),
                per_sample_big_delta: dev.per_sample_big_delta.iter().map(|v| v.as_f64()).collect(),
            }
        })
        .collect();

    let residual: Vec<T> = scores
        .targets
        .iter()
        .zip(&decisions)
        .map(|(t, d)| t.total * T::lit(pruned_mass(&t.scores, d)))
        .collect();
    let (logits, note) = match network_output_bound(net, layer, &residual) {
        Ok(bound) => {
            let bound_alpha = network_output_bound_alpha(net, layer, alpha, &scores)?;
            let measured = measure_output_deviation(net, &pruned, inputs)?;
            let rows = bound
                .iter()
                .zip(&bound_alpha)
                .zip(&measured)
                .enumerate()
                .map(|(i, ((b, ba), m))| LogitBound {
                    output: i,
                    bound: b.as_f64(),
                    bound_alpha: ba.as_f64(),
                    measured: m.as_f64(),
                })
                .collect();
            (Some(rows), None)
        }
        Err(Error::Capability(msg)) => (None, Some(msg)),
        Err(e) => return Err(e),
    };
    Ok(BoundReport {
        layer,
        kind: net.layers()[layer].kind().to_string(),
        alpha: a64,
        samples: inputs.outer(),
        targets,
        logits,
        note,
    })
}
