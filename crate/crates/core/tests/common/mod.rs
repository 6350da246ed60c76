//! Random fixtures and independent reference computations for the
//! integration tests. Everything here is written with plain loops in `f64`
//! and shares no code with the library beyond its public types.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relief_core::network::{Activation, ConvLayer, DenseLayer, Layer, Network, Prunable};
use relief_core::tensor::{ConvGeometry, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Weights in `[-1, 1]` with a few exact zeros.
pub fn weight_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.random_bool(0.05) { 0.0 } else { rng.random_range(-1.0..1.0) })
        .collect()
}

pub fn random_dense(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, act: Activation) -> DenseLayer<f64> {
    let w = Tensor::new(vec![outputs, inputs], weight_vec(rng, inputs * outputs)).unwrap();
    let b = if rng.random_bool(0.3) { vec![0.0; outputs] } else { weight_vec(rng, outputs) };
    DenseLayer::new(w, b, act).unwrap()
}

pub fn random_conv(
    rng: &mut ChaCha8Rng,
    c_in: usize,
    c_out: usize,
    k: usize,
    geometry: ConvGeometry,
    act: Activation,
) -> ConvLayer<f64> {
    let kernels = Tensor::new(vec![c_out, c_in, k, k], weight_vec(rng, c_out * c_in * k * k)).unwrap();
    let b = if rng.random_bool(0.3) { vec![0.0; c_out] } else { weight_vec(rng, c_out) };
    ConvLayer::new(kernels, b, geometry, act).unwrap()
}

/// Masks a random subset of contributors (bias included) with probability `p`.
pub fn random_masks(rng: &mut ChaCha8Rng, layer: &mut dyn Prunable, p: f64) {
    for j in 0..layer.targets() {
        let pruned: Vec<usize> = (0..=layer.contributors()).filter(|_| rng.random_bool(p)).collect();
        layer.prune(j, &pruned).unwrap();
    }
}

/// Non-negative activations with some exact zeros, like post-ReLU data.
pub fn activations(rng: &mut ChaCha8Rng, shape: Vec<usize>, signed: bool) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if rng.random_bool(0.1) {
                0.0
            } else if signed {
                rng.random_range(-2.0..2.0)
            } else {
                rng.random_range(0.0..2.0)
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Reference dense scores: rows are targets, columns inputs then bias.
pub fn naive_fc_scores(layer: &DenseLayer<f64>, x: &Tensor<f64>) -> Vec<Vec<f64>> {
    naive_fc_raw(layer, x).into_iter().map(normalize).collect()
}

/// Unnormalized dense scores; each row sums to the target's total `S_j`.
pub fn naive_fc_raw(layer: &DenseLayer<f64>, x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (n, m, k) = (x.outer(), layer.outputs(), layer.inputs());
    let mut mean_abs = vec![0.0; k];
    for s in 0..n {
        for i in 0..k {
            mean_abs[i] += x.sample(s)[i].abs();
        }
    }
    for v in &mut mean_abs {
        *v /= n as f64;
    }
    (0..m)
        .map(|j| {
            let mut row: Vec<f64> = (0..k)
                .map(|i| {
                    let w = if layer.is_active(j, i) { layer.weight(j, i) } else { 0.0 };
                    w.abs() * mean_abs[i]
                })
                .collect();
            let b = if layer.is_active(j, k) { layer.bias[j] } else { 0.0 };
            row.push(b.abs());
            row
        })
        .collect()
}

pub fn normalize(mut row: Vec<f64>) -> Vec<f64> {
    let total: f64 = row.iter().sum();
    if total > 0.0 {
        for v in &mut row {
            *v /= total;
        }
    } else {
        row.iter_mut().for_each(|v| *v = 0.0);
    }
    row
}

/// Direct-loop cross-correlation of one `h x w` map with one `k x k` kernel.
pub fn naive_correlate(
    map: &[f64],
    (h, w): (usize, usize),
    kernel: &[f64],
    k: usize,
    g: ConvGeometry,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * g.padding.0 - k) / g.stride.0 + 1;
    let ow = (w + 2 * g.padding.1 - k) / g.stride.1 + 1;
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for ky in 0..k {
                for kx in 0..k {
                    let y = (oy * g.stride.0 + ky) as isize - g.padding.0 as isize;
                    let x = (ox * g.stride.1 + kx) as isize - g.padding.1 as isize;
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        acc += kernel[ky * k + kx] * map[y as usize * w + x as usize];
                    }
                }
            }
            out[oy * ow + ox] = acc;
        }
    }
    (out, oh, ow)
}

/// Reference conv scores: mean over samples of `|| |K_ij| * |x_ni| ||_F`, and
/// `|b_j| sqrt(oh ow)` for the bias, normalized per filter.
pub fn naive_conv_scores(layer: &ConvLayer<f64>, x: &Tensor<f64>) -> Vec<Vec<f64>> {
    naive_conv_raw(layer, x).into_iter().map(normalize).collect()
}

/// Unnormalized conv scores; each row sums to the filter's total `S_j`.
pub fn naive_conv_raw(layer: &ConvLayer<f64>, x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (layer.out_channels(), layer.kernel_size());
    let g = layer.geometry;
    let mut rows = Vec::with_capacity(o);
    let mut plane = 0;
    for j in 0..o {
        let mut row = vec![0.0; c + 1];
        for i in 0..c {
            if !layer.is_active(j, i) {
                continue;
            }
            let kabs: Vec<f64> = layer.kernel(j, i).iter().map(|v| v.abs()).collect();
            for s in 0..n {
                let map: Vec<f64> = x.sample(s)[i * h * w..(i + 1) * h * w].iter().map(|v| v.abs()).collect();
                let (out, oh, ow) = naive_correlate(&map, (h, w), &kabs, k, g);
                plane = oh * ow;
                row[i] += out.iter().map(|v| v * v).sum::<f64>().sqrt() / n as f64;
            }
        }
        if plane == 0 {
            let oh = (h + 2 * g.padding.0 - k) / g.stride.0 + 1;
            let ow = (w + 2 * g.padding.1 - k) / g.stride.1 + 1;
            plane = oh * ow;
        }
        let b = if layer.is_active(j, c) { layer.bias[j] } else { 0.0 };
        row[c] = b.abs() * (plane as f64).sqrt();
        rows.push(row);
    }
    rows
}

/// Exhaustive reference for the kept set: the smallest cardinality `k` such
/// that some subset of size `k` carries at least `alpha` of the mass, then
/// every contributor scoring at least the `k`-th largest score.
///
/// Subset sums are exact when scores are dyadic rationals, which is how the
/// callers build them. Returns `None` for an all-zero vector.
pub fn brute_force_kept(scores: &[f64], alpha: f64) -> Option<Vec<usize>> {
    let m = scores.len();
    if scores.iter().all(|&s| s == 0.0) {
        return None;
    }
    let mut best: Option<(u32, u32)> = None;
    for mask in 1u32..(1 << m) {
        let sum: f64 = (0..m).filter(|i| mask >> i & 1 == 1).map(|i| scores[i]).sum();
        let card = mask.count_ones();
        if sum >= alpha && best.is_none_or(|(c, _)| card < c) {
            best = Some((card, mask));
        }
    }
    // no subset reaches alpha: keep every positive contributor
    let k = match best {
        Some((c, _)) => c as usize,
        None => scores.iter().filter(|&&s| s > 0.0).count(),
    };
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let threshold = sorted[k - 1];
    Some((0..m).filter(|&i| scores[i] >= threshold).collect())
}

/// `n` non-negative dyadic scores (multiples of 1/128) summing to exactly 1.
pub fn dyadic_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let cap = if n > 1 { 128 / (n - 1) as u32 } else { 0 };
    let mut ints: Vec<u32> = (0..n.saturating_sub(1))
        .map(|_| if rng.random_bool(0.2) { 0 } else { rng.random_range(0..=cap.min(12)) })
        .collect();
    let used: u32 = ints.iter().sum();
    ints.push(128 - used);
    // move the remainder to a random position
    let pos = rng.random_range(0..n);
    ints.swap(pos, n - 1);
    ints.into_iter().map(|c| c as f64 / 128.0).collect()
}

/// Random small network mixing every layer kind, for gradient checks.
pub fn random_small_net(rng: &mut ChaCha8Rng) -> Network<f64> {
    let act = |rng: &mut ChaCha8Rng| Activation::ALL[rng.random_range(0..Activation::ALL.len())];
    let classes = rng.random_range(2..=4);
    if rng.random_bool(0.5) {
        let inputs = rng.random_range(2..=6);
        let hidden = rng.random_range(2..=6);
        let a = act(rng);
        let mut layers = vec![Layer::Dense(random_dense(rng, inputs, hidden, a))];
        let mut width = hidden;
        if rng.random_bool(0.5) {
            let h2 = rng.random_range(2..=5);
            let a = act(rng);
            layers.push(Layer::Dense(random_dense(rng, width, h2, a)));
            width = h2;
        }
        layers.push(Layer::Dense(random_dense(rng, width, classes, Activation::Identity)));
        Network::new(vec![inputs], layers).unwrap()
    } else {
        let c = rng.random_range(1..=2);
        let size = rng.random_range(5..=7);
        let k = rng.random_range(2..=3);
        let pad = rng.random_range(0..=1);
        let stride = rng.random_range(1..=2);
        let g = ConvGeometry::new((stride, stride), (pad, pad));
        let filters = rng.random_range(1..=3);
        let a = act(rng);
        let conv = random_conv(rng, c, filters, k, g, a);
        let (oh, ow) = g.output_hw(size, size, k).unwrap();
        let mut layers = vec![Layer::Conv(conv)];
        let (mut h, mut w) = (oh, ow);
        if oh >= 2 && ow >= 2 && rng.random_bool(0.6) {
            layers.push(Layer::MaxPool(relief_core::network::MaxPool::new(2, 2)));
            h = (oh - 2) / 2 + 1;
            w = (ow - 2) / 2 + 1;
        }
        layers.push(Layer::Flatten);
        let flat = filters * h * w;
        let hidden = rng.random_range(2..=5);
        let a = act(rng);
        layers.push(Layer::Dense(random_dense(rng, flat, hidden, a)));
        layers.push(Layer::Dense(random_dense(rng, hidden, classes, Activation::Identity)));
        Network::new(vec![c, size, size], layers).unwrap()
    }
}
