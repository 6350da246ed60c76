//! Softmax cross-entropy training with hand-derived backward passes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{Optimizer, OptimizerConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{argmax, Layer, Network};
use crate::scalar::Scalar;
use crate::tensor::{col2im, gemm_acc, im2col, transpose, Tensor};

/// Per-layer values kept from the forward pass.
struct Cache<T> {
    /// `inputs[l]` feeds layer `l`; the last entry holds the logits.
    inputs: Vec<Tensor<T>>,
    /// Pre-activations of dense and conv layers.
    pre: Vec<Option<Tensor<T>>>,
}

fn forward_cached<T: Scalar>(net: &Network<T>, x: &Tensor<T>) -> Result<Cache<T>> {
    let mut inputs = vec![x.clone()];
    let mut pre = Vec::with_capacity(net.layers().len());
    for layer in net.layers() {
        let input = inputs.last().expect("nonempty");
        let (z, out) = match layer {
            Layer::Dense(d) => {
                let z = d.preactivation(input)?;
                let act = d.activation;
                let a = z.map(|v| act.apply(v));
                (Some(z), a)
            }
            Layer::Conv(c) => {
                let z = c.preactivation(input)?;
                let act = c.activation;
                let a = z.map(|v| act.apply(v));
                (Some(z), a)
            }
            other => (None, other.forward(input)?),
        };
        pre.push(z);
        inputs.push(out);
    }
    Ok(Cache { inputs, pre })
}

/// Mean softmax cross-entropy of `logits` (`N x classes`) and its gradient.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let n = logits.outer();
    if n != labels.len() || n == 0 {
        return Err(Error::dim(format!("{} logit rows for {} labels", n, labels.len())));
    }
    let k = logits.inner_len();
    let inv_n = T::one() / T::from_usize(n).expect("batch size");
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    let mut total = 0.0;
    for (s, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Index(format!("label {y} with {k} classes")));
        }
        let z = logits.sample(s);
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &v in z {
            sum += (v - m).exp();
        }
        let lse = m + sum.ln();
        total += (lse - z[y]).as_f64();
        for (g, &v) in grad.sample_mut(s).iter_mut().zip(z) {
            *g = (v - lse).exp() * inv_n;
        }
        grad.sample_mut(s)[y] -= inv_n;
    }
    Ok((total / n as f64, grad))
}

/// Mean loss of a batch and the gradient of every parameter buffer
/// (per dense/conv layer: weights, then bias).
pub fn loss_and_gradients<T: Scalar>(net: &Network<T>, x: &Tensor<T>, labels: &[usize]) -> Result<(f64, Vec<Vec<T>>)> {
    let cache = forward_cached(net, x)?;
    let (loss, mut g) = softmax_cross_entropy(cache.inputs.last().expect("logits"), labels)?;
    let mut grads: Vec<Vec<T>> = Vec::new();
    for (l, layer) in net.layers().iter().enumerate().rev() {
        let input = &cache.inputs[l];
        let need_dx = l > 0;
        match layer {
            Layer::Dense(d) => {
                let z = cache.pre[l].as_ref().expect("dense pre-activation");
                let a = &cache.inputs[l + 1];
                let dz = delta(d.activation, z, a, &g);
                let (b, m, k) = (input.outer(), d.outputs(), d.inputs());
                let dzt = transpose(dz.data(), b, m);
                let mut dw = vec![T::zero(); m * k];
                gemm_acc(&dzt, input.data(), &mut dw, m, b, k);
                let db: Vec<T> = dzt.chunks_exact(b.max(1)).map(|row| sum_in_order(row)).collect();
                grads.push(db);
                grads.push(dw);
                if need_dx {
                    let mut dx = vec![T::zero(); b * k];
                    gemm_acc(dz.data(), d.weights.data(), &mut dx, b, m, k);
                    g = Tensor::new(input.shape().to_vec(), dx)?;
                }
            }
            Layer::Conv(c) => {
                let z = cache.pre[l].as_ref().expect("conv pre-activation");
                let a = &cache.inputs[l + 1];
                let dz = delta(c.activation, z, a, &g);
                let (ci, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
                let (o, oh, ow) = (z.shape()[1], z.shape()[2], z.shape()[3]);
                let r = c.kernel_size();
                let (rows, plane) = (ci * r * r, oh * ow);
                let kt = transpose(c.kernels.data(), o, rows);
                let mut dk = vec![T::zero(); o * rows];
                let mut db = vec![T::zero(); o];
                let mut cols = vec![T::zero(); rows * plane];
                let mut dcols = vec![T::zero(); rows * plane];
                let mut dx = Tensor::zeros(input.shape().to_vec());
                for s in 0..input.outer() {
                    let dzs = dz.sample(s);
                    im2col(input.sample(s), (ci, h, w), r, c.geometry, (oh, ow), &mut cols);
                    let cols_t = transpose(&cols, rows, plane);
                    gemm_acc(dzs, &cols_t, &mut dk, o, plane, rows);
                    for (acc, map) in db.iter_mut().zip(dzs.chunks_exact(plane)) {
                        *acc += sum_in_order(map);
                    }
                    if need_dx {
                        dcols.fill(T::zero());
                        gemm_acc(&kt, dzs, &mut dcols, rows, o, plane);
                        col2im(&dcols, (ci, h, w), r, c.geometry, (oh, ow), dx.sample_mut(s));
                    }
                }
                grads.push(db);
                grads.push(dk);
                g = dx;
            }
            Layer::MaxPool(p) => {
                let mut dx = Tensor::zeros(input.shape().to_vec());
                for s in 0..input.outer() {
                    let idx = p.argmax(input.sample(s), &input.shape()[1..]);
                    let gs = g.sample(s).to_vec();
                    let dst = dx.sample_mut(s);
                    for (&at, gv) in idx.iter().zip(gs) {
                        dst[at] += gv;
                    }
                }
                g = dx;
            }
            Layer::Flatten => {
                g = g.reshape(input.shape().to_vec())?;
            }
        }
    }
    grads.reverse();
    Ok((loss, grads))
}

fn sum_in_order<T: Scalar>(v: &[T]) -> T {
    let mut acc = T::zero();
    for &x in v {
        acc += x;
    }
    acc
}

fn delta<T: Scalar>(act: crate::network::Activation, z: &Tensor<T>, a: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let data = z
        .data()
        .iter()
        .zip(a.data())
        .zip(g.data())
        .map(|((&z, &a), &g)| g * act.derivative(z, a))
        .collect();
    Tensor::new(z.shape().to_vec(), data).expect("same shape")
}

/// Outcome of [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    /// Mean batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

fn check_dataset<T: Scalar>(net: &Network<T>, data: &Dataset<T>) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if data.classes() > net.classes() {
        return Err(Error::dim(format!(
            "dataset has {} classes, network emits {}",
            data.classes(),
            net.classes()
        )));
    }
    Ok(())
}

/// Trains `net` in place with a fresh optimizer.
///
/// Samples are reshuffled every epoch from a generator seeded with `seed`.
/// A non-finite batch loss stops training with [`Error::Diverged`].
pub fn train<T: Scalar>(net: &mut Network<T>, data: &Dataset<T>, cfg: &OptimizerConfig, seed: u64) -> Result<(TrainLog, Optimizer<T>)> {
    let mut opt = Optimizer::new(cfg.clone(), net)?;
    let log = train_with(net, data, &mut opt, seed)?;
    Ok((log, opt))
}

/// Like [`train`] but continues from existing optimizer state.
pub fn train_with<T: Scalar>(net: &mut Network<T>, data: &Dataset<T>, opt: &mut Optimizer<T>, seed: u64) -> Result<TrainLog> {
    check_dataset(net, data)?;
    let cfg = opt.config.clone();
    cfg.validate()?;
    net.enforce_masks();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let input_shape = net.input_shape().to_vec();
    let mut log = TrainLog {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        steps: 0,
    };
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.batch(idx, &input_shape)?;
            let (loss, grads) = loss_and_gradients(net, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b + 1 });
            }
            opt.apply(net, &grads, lr)?;
            if net.layers().iter().any(|l| !params_finite(l)) {
                return Err(Error::Diverged { epoch, batch: b + 1 });
            }
            epoch_loss += loss;
            batches += 1;
            log.steps += 1;
        }
        log.epoch_losses.push(epoch_loss / batches as f64);
    }
    Ok(log)
}

fn params_finite<T: Scalar>(layer: &Layer<T>) -> bool {
    match layer {
        Layer::Dense(d) => d.weights.is_finite() && d.bias.iter().all(|v| v.is_finite()),
        Layer::Conv(c) => c.kernels.is_finite() && c.bias.iter().all(|v| v.is_finite()),
        _ => true,
    }
}

const EVAL_BATCH: usize = 1000;

/// Fraction of samples whose largest logit is the label.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset<T>) -> Result<f64> {
    check_dataset(net, data)?;
    let shape = net.input_shape().to_vec();
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(idx, &shape)?;
        let (logits, _) = net.forward_batch(&x, false)?;
        correct += (0..logits.outer()).filter(|&s| argmax(logits.sample(s)) == y[s]).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Worst agreement between analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub checked: usize,
    pub failures: usize,
    /// Largest `|a - n| / max(|a|, |n|)` over entries above the noise floor.
    pub max_rel_error: f64,
}

/// Compares analytic gradients with central differences of step `h` on every
/// live parameter. An entry passes when `|a - n| <= rtol max(|a|, |n|) + atol`.
pub fn gradient_check(net: &Network<f64>, x: &Tensor<f64>, labels: &[usize], h: f64, rtol: f64, atol: f64) -> Result<GradientCheck> {
    let (_, grads) = loss_and_gradients(net, x, labels)?;
    let mut probe = net.clone();
    let mut report = GradientCheck {
        checked: 0,
        failures: 0,
        max_rel_error: 0.0,
    };
    let mut k = 0;
    for l in 0..probe.layers().len() {
        let buffers = probe.layers_mut()[l].parameters_mut().len();
        for b in 0..buffers {
            let len = grads[k].len();
            for e in 0..len {
                let (live, original) = {
                    let mut bufs = probe.layers_mut()[l].parameters_mut();
                    let (w, active, group) = &mut bufs[b];
                    (active[e / *group], w[e])
                };
                if !live {
                    continue;
                }
                let mut at = |v: f64| -> Result<f64> {
                    probe.layers_mut()[l].parameters_mut()[b].0[e] = v;
                    let (logits, _) = probe.forward_batch(x, false)?;
                    Ok(softmax_cross_entropy(&logits, labels)?.0)
                };
                let numeric = (at(original + h)? - at(original - h)?) / (2.0 * h);
                at(original)?;
                let analytic = grads[k][e];
                let diff = (analytic - numeric).abs();
                let scale = analytic.abs().max(numeric.abs());
                report.checked += 1;
                if diff > rtol * scale + atol {
                    report.failures += 1;
                }
                if scale > atol {
                    report.max_rel_error = report.max_rel_error.max(diff / scale);
                }
            }
            k += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::network::{Activation, ConvLayer, DenseLayer, MaxPool};
    use crate::pipeline::optim::OptimizerKind;
    use crate::pipeline::init_params;
    use crate::tensor::ConvGeometry;

    #[test]
    fn softmax_gradient_sums_to_zero() {
        let logits = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let (loss, g) = softmax_cross_entropy(&logits, &[2, 0]).unwrap();
        let expected = ((1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0 + 3f64.ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
        for s in 0..2 {
            assert!(g.sample(s).iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let layers = vec![
            Layer::Conv(ConvLayer::zeros(2, 3, 3, ConvGeometry::new((1, 1), (1, 1)), Activation::Tanh)),
            Layer::MaxPool(MaxPool::new(2, 2)),
            Layer::Conv(ConvLayer::zeros(3, 2, 2, ConvGeometry::new((2, 1), (0, 1)), Activation::Elu)),
            Layer::Flatten,
            Layer::Dense(DenseLayer::zeros(2 * 4, 5, Activation::Sigmoid)),
            Layer::Dense(DenseLayer::zeros(5, 3, Activation::Identity)),
        ];
        let mut net = Network::new(vec![2, 6, 6], layers).unwrap();
        init_params(&mut net, 5);
        for layer in net.layers_mut() {
            if let Layer::Conv(c) = layer {
                c.bias.iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * i as f64);
            }
        }
        let x = Tensor::from_fn(vec![3, 2, 6, 6], |i| ((i * 37 % 101) as f64 / 50.0) - 1.0);
        let report = gradient_check(&net, &x, &[0, 2, 1], 1e-6, 1e-3, 1e-8).unwrap();
        assert_eq!(report.failures, 0, "{report:?}");
        assert!(report.checked > 100);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data: Dataset<f64> = synth_dataset(9, 200, 2).unwrap();
        let mut net: Network<f64> = crate::presets::build("mlp:2-8-2").unwrap();
        init_params(&mut net, 1);
        let cfg = OptimizerConfig::constant(OptimizerKind::Sgd, 0.05, 50, 16);
        let (log, _) = train(&mut net, &data, &cfg, 3).unwrap();
        assert!(log.epoch_losses.last().unwrap() < &log.epoch_losses[0]);
        assert!(evaluate(&net, &data).unwrap() >= 0.99);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let data: Dataset<f32> = synth_dataset(2, 40, 3).unwrap();
        let mut net: Network<f32> = crate::presets::build("mlp:3-4-3").unwrap();
        init_params(&mut net, 2);
        let before = net.clone();
        let cfg = OptimizerConfig::constant(OptimizerKind::Adam, 0.0, 3, 8).with_weight_decay(5e-4);
        train(&mut net, &data, &cfg, 1).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn training_is_deterministic() {
        let data: Dataset<f32> = synth_dataset(4, 64, 4).unwrap();
        let mut a: Network<f32> = crate::presets::build("mlp:4-6-4").unwrap();
        init_params(&mut a, 8);
        let mut b = a.clone();
        let cfg = OptimizerConfig::constant(OptimizerKind::Adam, 1e-2, 3, 10);
        train(&mut a, &data, &cfg, 11).unwrap();
        train(&mut b, &data, &cfg, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let data: Dataset<f64> = synth_dataset(4, 32, 2).unwrap();
        let mut net: Network<f64> = crate::presets::build("mlp:2-4-2").unwrap();
        init_params(&mut net, 0);
        let cfg = OptimizerConfig::constant(OptimizerKind::Sgd, 1e300, 3, 8);
        assert!(matches!(train(&mut net, &data, &cfg, 0), Err(Error::Diverged { .. })));
    }
}
