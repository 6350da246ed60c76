mod common;

use common::*;
use proptest::prelude::*;
use relief_core::metrics::{compression_stats, flops_conv, flops_dense, masked_flops, score_stats};
use relief_core::network::{Activation, Layer, MaxPool, Network};
use relief_core::tensor::ConvGeometry;

/// The appendix expressions evaluated in wide integers.
fn dense_reference(i: u128, o: u128) -> u128 {
    (2 * i - 1) * o
}

fn conv_reference(h: u128, w: u128, c: u128, k: u128, o: u128) -> u128 {
    2 * h * w * (c * k * k + 1) * o
}

proptest! {
    #[test]
    fn flops_match_appendix(i in 1usize..5000, o in 1usize..5000, h in 1usize..256, w in 1usize..256, c in 1usize..512, k in 1usize..12) {
        prop_assert_eq!(flops_dense(i, o).unwrap() as u128, dense_reference(i as u128, o as u128));
        prop_assert_eq!(
            flops_conv(h, w, c, k, o).unwrap() as u128,
            conv_reference(h as u128, w as u128, c as u128, k as u128, o as u128)
        );
        // linear in the output count
        prop_assert_eq!(flops_conv(h, w, c, k, 2 * o).unwrap(), 2 * flops_conv(h, w, c, k, o).unwrap());
    }

    #[test]
    fn equal_scores_have_no_spread(v in 0.001f64..10.0, n in 1usize..50) {
        let s = score_stats(&vec![v; n]).unwrap();
        prop_assert!(s.std.abs() < 1e-12 * v);
        prop_assert!(s.gini.abs() < 1e-12);
        prop_assert!((s.max_min_ratio.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gini_is_a_fraction(values in prop::collection::vec(0.0f64..5.0, 1..40)) {
        let s = score_stats(&values).unwrap();
        prop_assert!(s.gini >= -1e-12 && s.gini < 1.0);
        prop_assert!(s.min <= s.mean && s.mean <= s.max);
    }

    #[test]
    fn compression_identities(seed in any::<u64>(), p in 0.0f64..0.95) {
        let mut r = rng(seed);
        let mut net = small_cnn(&mut r);
        for l in net.layers_mut() {
            if let Some(pr) = l.as_prunable_mut() {
                random_masks(&mut r, pr, p);
            }
        }
        let c = compression_stats(&net, None, None);
        prop_assert!((c.remaining_pct + c.pruned_pct - 100.0).abs() < 1e-9);
        if let Some(rate) = c.compression {
            prop_assert!(rate >= 1.0);
            prop_assert!((rate * c.remaining_pct / 100.0 - 1.0).abs() < 1e-9);
        }
        let f = masked_flops(&net).unwrap();
        prop_assert!(f.masked_total <= f.baseline_total);
        prop_assert!((0.0..=100.0).contains(&f.pruned_pct));
    }
}

fn small_cnn(r: &mut rand_chacha::ChaCha8Rng) -> Network<f64> {
    Network::new(
        vec![2, 8, 8],
        vec![
            Layer::Conv(random_conv(r, 2, 3, 3, ConvGeometry::new((1, 1), (1, 1)), Activation::Relu)),
            Layer::MaxPool(MaxPool::new(2, 2)),
            Layer::Flatten,
            Layer::Dense(random_dense(r, 48, 5, Activation::Relu)),
            Layer::Dense(random_dense(r, 5, 3, Activation::Identity)),
        ],
    )
    .unwrap()
}

#[test]
fn unmasked_flops_equal_formulas() {
    let mut r = rng(20);
    let net = small_cnn(&mut r);
    let f = masked_flops(&net).unwrap();
    let want = conv_reference(8, 8, 2, 3, 3) + dense_reference(48, 5) + dense_reference(5, 3);
    assert_eq!(f.baseline_total as u128, want);
    assert_eq!(f.masked_total, f.baseline_total);
    assert_eq!(f.pruned_pct, 0.0);
    // pooling and flatten contribute nothing
    assert_eq!(f.layers.len(), 3);
}

#[test]
fn fully_masked_network_prunes_all_flops() {
    let mut r = rng(21);
    let mut net = small_cnn(&mut r);
    for l in net.layers_mut() {
        if let Some(p) = l.as_prunable_mut() {
            for j in 0..p.targets() {
                let all: Vec<usize> = (0..=p.contributors()).collect();
                p.prune(j, &all).unwrap();
            }
        }
    }
    let f = masked_flops(&net).unwrap();
    assert_eq!(f.masked_total, 0);
    assert_eq!(f.pruned_pct, 100.0);
    let c = compression_stats(&net, None, None);
    assert_eq!(c.active, 0);
    assert_eq!(c.compression, None);
}

#[test]
fn lenet300100_compression_example() {
    let net: Network<f32> = relief_core::presets::build("lenet300100").unwrap();
    assert_eq!(net.parameter_count(), 266_610);
    let remaining = 0.0151;
    let active = (net.parameter_count() as f64 * remaining).round();
    let rate = net.parameter_count() as f64 / active;
    assert!((rate - 66.0).abs() < 0.5, "{rate}");
}

#[test]
fn one_masked_kernel_example() {
    let kernels = relief_core::tensor::Tensor::new(vec![1, 2, 3, 3], vec![0.5; 18]).unwrap();
    let conv = relief_core::network::ConvLayer::new(kernels, vec![0.1], ConvGeometry::new((1, 1), (1, 1)), Activation::Relu).unwrap();
    let mut r = rng(23);
    let mut net = Network::new(
        vec![2, 4, 4],
        vec![Layer::Conv(conv), Layer::Flatten, Layer::Dense(random_dense(&mut r, 16, 2, Activation::Identity))],
    )
    .unwrap();
    net.layers_mut()[0].apply_mask(0, &[1]).unwrap();
    let f = masked_flops(&net).unwrap();
    assert_eq!(f.layers[0].baseline, 608);
    assert_eq!(f.layers[0].masked, 320);
    let pct = 100.0 * (1.0 - 320.0 / 608.0);
    let conv_only = 100.0 * (f.layers[0].baseline - f.layers[0].masked) as f64 / f.layers[0].baseline as f64;
    assert!((conv_only - pct).abs() < 1e-12);
    assert!((conv_only - 47.4).abs() < 0.05);
}

#[test]
fn appendix_examples() {
    assert_eq!(flops_dense(3, 2).unwrap(), 10);
    assert_eq!(flops_conv(4, 4, 1, 3, 2).unwrap(), 640);
}
