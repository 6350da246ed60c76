//! Importance scores and alpha-mass threshold pruning.
//!
//! For target `j` (a neuron or a filter) with contributors `i` (incoming
//! connections or kernels, plus the bias), the raw contribution of `i` is its
//! mean absolute signal over the pruning set:
//!
//! * dense: `mean_n |w_ij x_ni|`, bias `|b_j|`;
//! * conv:  `mean_n || |K_ij| * |x_ni| ||_F`, bias `|b_j| sqrt(h_out w_out)`.
//!
//! `S_j` is the sum of all raw contributions and the score is `raw / S_j`.

use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{ConvLayer, DenseLayer, Layer, Network, Prunable};
use crate::scalar::Scalar;
use crate::tensor::{frobenius_norm, gemm_acc, im2col, Tensor};

/// Scores of one target. `scores[contributors]` is the bias score.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetScores<T> {
    pub scores: Vec<T>,
    /// Total importance `S_j`, in signal units.
    pub total: T,
    /// `S_j == 0`: the target carries no signal on the pruning set.
    pub dead: bool,
}

impl<T: Scalar> TargetScores<T> {
    fn from_raw(raw: Vec<T>) -> Self {
        let mut total = T::zero();
        for &r in &raw {
            total += r;
        }
        if total > T::zero() {
            let scores = raw.iter().map(|&r| r / total).collect();
            Self {
                scores,
                total,
                dead: false,
            }
        } else {
            Self {
                scores: vec![T::zero(); raw.len()],
                total: T::zero(),
                dead: true,
            }
        }
    }

    pub fn bias_score(&self) -> T {
        *self.scores.last().expect("bias slot")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoredKind {
    Dense,
    Conv,
}

/// Scores of every target in one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores<T> {
    pub kind: ScoredKind,
    /// Contributors per target, excluding the bias.
    pub contributors: usize,
    pub targets: Vec<TargetScores<T>>,
    /// Mask state at scoring time, `targets x (contributors + 1)`.
    pub active: Vec<bool>,
}

impl<T: Scalar> ImportanceScores<T> {
    pub fn is_active(&self, target: usize, contributor: usize) -> bool {
        self.active[target * (self.contributors + 1) + contributor]
    }

    /// Scores of the contributors that were unmasked when scored.
    pub fn active_scores(&self) -> Vec<T> {
        let width = self.contributors + 1;
        self.targets
            .iter()
            .enumerate()
            .flat_map(|(j, t)| {
                t.scores
                    .iter()
                    .enumerate()
                    .filter(move |&(i, _)| self.active[j * width + i])
                    .map(|(_, &s)| s)
            })
            .collect()
    }
}

fn active_flags(layer: &dyn Prunable) -> Vec<bool> {
    let width = layer.contributors() + 1;
    (0..layer.targets() * width)
        .map(|k| layer.is_active(k / width, k % width))
        .collect()
}

/// Scores a dense layer from its `N x inputs` pruning-set inputs.
pub fn fc_importance<T: Scalar>(layer: &DenseLayer<T>, inputs: &Tensor<T>) -> Result<ImportanceScores<T>> {
    if inputs.rank() != 2 || inputs.shape()[1] != layer.inputs() {
        return Err(Error::Dimension(format!(
            "dense layer with {} inputs scored on {:?}",
            layer.inputs(),
            inputs.shape()
        )));
    }
    let n = inputs.outer();
    if n == 0 {
        return Err(Error::EmptyPruningSet);
    }
    let d = layer.inputs();
    // mean_n |w x_n| = |w| mean_n |x_n|
    let mut mean_abs = vec![T::zero(); d];
    for s in 0..n {
        for (m, &x) in mean_abs.iter_mut().zip(inputs.sample(s)) {
            *m += x.abs();
        }
    }
    let inv = T::one() / T::from_usize(n).expect("sample count");
    for m in &mut mean_abs {
        *m *= inv;
    }
    let targets = (0..layer.outputs())
        .map(|j| {
            let row = &layer.weights.data()[j * d..(j + 1) * d];
            let mut raw: Vec<T> = row.iter().zip(&mean_abs).map(|(w, &m)| w.abs() * m).collect();
            raw.push(layer.bias[j].abs());
            TargetScores::from_raw(raw)
        })
        .collect();
    Ok(ImportanceScores {
        kind: ScoredKind::Dense,
        contributors: d,
        targets,
        active: active_flags(layer),
    })
}

/// Scores a conv layer from its `N x C x H x W` pruning-set inputs.
pub fn conv_importance<T: Scalar>(layer: &ConvLayer<T>, inputs: &Tensor<T>) -> Result<ImportanceScores<T>> {
    if inputs.rank() != 4 {
        return Err(Error::Dimension(format!("conv layer scored on {:?}", inputs.shape())));
    }
    let n = inputs.outer();
    if n == 0 {
        return Err(Error::EmptyPruningSet);
    }
    let out = layer.output_shape(&inputs.shape()[1..])?;
    let (c, h, w) = (inputs.shape()[1], inputs.shape()[2], inputs.shape()[3]);
    let (o, oh, ow) = (out[0], out[1], out[2]);
    let r = layer.kernel_size();
    let rr = r * r;
    let plane = oh * ow;

    // |K| regrouped per input channel: abs_by_channel[i] is `o x rr`.
    let abs_by_channel: Vec<Vec<T>> = (0..c)
        .map(|i| (0..o).flat_map(|j| layer.kernel(j, i).iter().map(|v| v.abs())).collect())
        .collect();

    let mut sums = vec![T::zero(); o * c];
    let mut cols = vec![T::zero(); c * rr * plane];
    let mut maps = vec![T::zero(); o * plane];
    for s in 0..n {
        let abs_x: Vec<T> = inputs.sample(s).iter().map(|v| v.abs()).collect();
        im2col(&abs_x, (c, h, w), r, layer.geometry, (oh, ow), &mut cols);
        for (i, k_abs) in abs_by_channel.iter().enumerate() {
            maps.fill(T::zero());
            gemm_acc(k_abs, &cols[i * rr * plane..(i + 1) * rr * plane], &mut maps, o, rr, plane);
            for (j, map) in maps.chunks_exact(plane).enumerate() {
                sums[j * c + i] += frobenius_norm(map);
            }
        }
    }
    let inv = T::one() / T::from_usize(n).expect("sample count");
    let bias_weight = T::from_usize(plane).expect("plane size").sqrt();
    let targets = (0..o)
        .map(|j| {
            let mut raw: Vec<T> = sums[j * c..(j + 1) * c].iter().map(|&v| v * inv).collect();
            raw.push(layer.bias[j].abs() * bias_weight);
            TargetScores::from_raw(raw)
        })
        .collect();
    Ok(ImportanceScores {
        kind: ScoredKind::Conv,
        contributors: c,
        targets,
        active: active_flags(layer),
    })
}

/// Scores any prunable layer; other layer kinds are a capability error.
pub fn layer_importance<T: Scalar>(layer: &Layer<T>, inputs: &Tensor<T>) -> Result<ImportanceScores<T>> {
    match layer {
        Layer::Dense(d) => fc_importance(d, inputs),
        Layer::Conv(c) => conv_importance(c, inputs),
        other => Err(Error::Capability(format!("{} layers are not scored", other.kind()))),
    }
}

/// Outcome of thresholding one target's scores.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneDecision<T> {
    /// Contributor indices kept, ascending (bias index = contributor count).
    pub kept: Vec<usize>,
    /// Contributor indices pruned, ascending.
    pub pruned: Vec<usize>,
    /// Length of the shortest descending prefix whose mass reaches alpha.
    pub p0: usize,
    /// Score of the `p0`-th largest contributor; strictly smaller ones are pruned.
    pub threshold: T,
    /// Total score of the kept contributors.
    pub kept_mass: T,
    pub dead: bool,
}

pub(crate) fn check_alpha<T: Scalar>(alpha: T) -> Result<()> {
    if alpha > T::zero() && alpha <= T::one() {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")))
    }
}

/// Contributor order by descending score, ties by ascending index.
pub fn descending_order<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores").then(a.cmp(&b)));
    order
}

/// Keeps the shortest descending prefix of `scores` whose cumulative mass
/// reaches `alpha`, plus anything tied with its last element.
///
/// With `alpha = 1`, or when rounding leaves the total below `alpha`, every
/// positive score is kept. An all-zero (dead) target loses every contributor.
pub fn select_kept<T: Scalar>(scores: &[T], alpha: T) -> Result<PruneDecision<T>> {
    check_alpha(alpha)?;
    if let Some(bad) = scores.iter().find(|s| !(**s >= T::zero()) || !s.is_finite()) {
        return Err(Error::Config(format!("scores must be finite and non-negative, got {bad}")));
    }
    if scores.iter().all(|&s| s == T::zero()) {
        return Ok(PruneDecision {
            kept: Vec::new(),
            pruned: (0..scores.len()).collect(),
            p0: 0,
            threshold: T::zero(),
            kept_mass: T::zero(),
            dead: true,
        });
    }
    let order = descending_order(scores);
    let positive = scores.iter().filter(|&&s| s > T::zero()).count();
    // Full mass keeps every positive score even when a rounded prefix sum
    // reaches 1 early; otherwise accumulate in f64 to limit that drift.
    let mut p0 = positive;
    if alpha < T::one() {
        let target = alpha.as_f64();
        let mut cum = 0.0;
        for (p, &i) in order.iter().enumerate() {
            cum += scores[i].as_f64();
            if cum >= target {
                p0 = p + 1;
                break;
            }
        }
    }
    let threshold = scores[order[p0 - 1]];
    let (kept, pruned): (Vec<usize>, Vec<usize>) = (0..scores.len()).partition(|&i| scores[i] >= threshold);
    let mut kept_mass = T::zero();
    for &i in &kept {
        kept_mass += scores[i];
    }
    Ok(PruneDecision {
        kept,
        pruned,
        p0,
        threshold,
        kept_mass,
        dead: false,
    })
}

/// Scores, decisions and alpha for one pruned layer.
#[derive(Clone, Debug)]
pub struct LayerPass<T> {
    pub layer: usize,
    pub alpha: T,
    pub scores: ImportanceScores<T>,
    pub decisions: Vec<PruneDecision<T>>,
}

#[derive(Clone, Debug)]
pub struct PassOutcome<T> {
    pub network: Network<T>,
    pub layers: Vec<LayerPass<T>>,
}

/// One pruning pass over every dense and conv layer.
///
/// All layers are scored on activations of the network as it was when the
/// pass started; masks are applied to a copy.
pub fn prune_pass<T: Scalar>(
    net: &Network<T>,
    pruning_set: &Tensor<T>,
    alpha_conv: T,
    alpha_fc: T,
) -> Result<PassOutcome<T>> {
    check_alpha(alpha_conv)?;
    check_alpha(alpha_fc)?;
    if pruning_set.rank() < 2 || pruning_set.outer() == 0 {
        return Err(Error::EmptyPruningSet);
    }
    let (_, trace) = net.forward_batch(pruning_set, true)?;
    let trace = trace.expect("captured");
    let mut pruned = net.clone();
    let mut layers = Vec::new();
    for l in net.prunable_indices() {
        let layer = &net.layers()[l];
        let alpha = match layer {
            Layer::Conv(_) => alpha_conv,
            _ => alpha_fc,
        };
        let scores = layer_importance(layer, trace.input_to(l))?;
        let decisions = scores
            .targets
            .iter()
            .map(|t| select_kept(&t.scores, alpha))
            .collect::<Result<Vec<_>>>()?;
        let target = &mut pruned.layers_mut()[l];
        for (j, d) in decisions.iter().enumerate() {
            target.apply_mask(j, &d.pruned)?;
        }
        layers.push(LayerPass {
            layer: l,
            alpha,
            scores,
            decisions,
        });
    }
    Ok(PassOutcome {
        network: pruned,
        layers,
    })
}

/// Scores every prunable layer of `net` on one pruning set.
pub fn network_importance<T: Scalar>(
    net: &Network<T>,
    pruning_set: &Tensor<T>,
) -> Result<Vec<(usize, ImportanceScores<T>)>> {
    if pruning_set.rank() < 2 || pruning_set.outer() == 0 {
        return Err(Error::EmptyPruningSet);
    }
    let (_, trace) = net.forward_batch(pruning_set, true)?;
    let trace = trace.expect("captured");
    net.prunable_indices()
        .into_iter()
        .map(|l| Ok((l, layer_importance(&net.layers()[l], trace.input_to(l))?)))
        .collect()
}

/// `n` distinct indices drawn uniformly from `0..available`, ascending.
pub fn draw_pruning_set(available: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::EmptyPruningSet);
    }
    if n > available {
        return Err(Error::Config(format!(
            "pruning set of {n} samples requested from {available}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, available, n).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Decimal rendering with 9 significant digits; exact round trip for `f32`.
pub fn format_sig9<T: Scalar>(v: T) -> String {
    format!("{:.8e}", v.as_f64())
}

/// Writes a score matrix as CSV: one row per target, contributors then bias.
pub fn write_scores_csv<T: Scalar, W: Write>(scores: &ImportanceScores<T>, mut out: W) -> std::io::Result<()> {
    let mut header = String::from("target");
    for i in 0..scores.contributors {
        header.push_str(&format!(",c{i}"));
    }
    header.push_str(",bias");
    writeln!(out, "{header}")?;
    for (j, t) in scores.targets.iter().enumerate() {
        let mut line = j.to_string();
        for &s in &t.scores {
            line.push(',');
            line.push_str(&format_sig9(s));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}
