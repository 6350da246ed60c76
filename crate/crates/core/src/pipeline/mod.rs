//! Training, masked retraining and the iterative prune/retrain loop.

mod iterate;
mod optim;
mod train;

pub use iterate::{
    best_iteration, iterate, read_history, IterationReport, PruneConfig, PruningSetPolicy, RetrainMode, RunInputs,
    RunSummary, BEST_FILE, HISTORY_FILE, OPTIMIZER_FILE, RUN_FILE,
};
pub use optim::{
    adam_step, parameter_sizes, sgd_step, LrPhase, Optimizer, OptimizerConfig, OptimizerKind, OptimizerRecord, StepParams,
};
pub use train::{
    evaluate, gradient_check, loss_and_gradients, softmax_cross_entropy, train, train_with, GradientCheck, TrainLog,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::network::{Layer, Network};
use crate::scalar::Scalar;

/// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases, all masks set.
///
/// Layers are filled in order from one generator seeded with `seed`.
pub fn init_params<T: Scalar>(net: &mut Network<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.reset_masks();
    for layer in net.layers_mut() {
        let (weights, bias, fan_in) = match layer {
            Layer::Dense(d) => {
                let fan_in = d.inputs();
                (d.weights.data_mut(), &mut d.bias, fan_in)
            }
            Layer::Conv(c) => {
                let fan_in = c.in_channels() * c.kernel_size() * c.kernel_size();
                (c.kernels.data_mut(), &mut c.bias, fan_in)
            }
            _ => continue,
        };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for w in weights {
            *w = T::lit(normal.sample(&mut rng));
        }
        bias.fill(T::zero());
    }
}

/// Independent sub-seed for `(iteration, stream)` of a run seeded with `base`.
pub fn derive_seed(base: u64, iteration: u64, stream: u64) -> u64 {
    let mut z = base ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn he_init_statistics() {
        let mut net: Network<f64> = crate::presets::build("mlp:100-200-10").unwrap();
        init_params(&mut net, 42);
        let mut again = net.clone();
        init_params(&mut again, 42);
        assert_eq!(net, again);
        let Layer::Dense(d) = &net.layers()[0] else { panic!() };
        let w = d.weights.data();
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let target = (2.0f64 / 100.0).sqrt();
        assert!((std - target).abs() < 0.2 * target);
        assert!(d.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn derived_seeds_differ() {
        let seeds: std::collections::HashSet<u64> =
            (0..10).flat_map(|i| (0..4).map(move |s| derive_seed(7, i, s))).collect();
        assert_eq!(seeds.len(), 40);
    }
}
