mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use relief_core::data::{encode_idx, parse_idx_pair, synth_dataset, Dataset};
use relief_core::network::{load_model, save_model};
use relief_core::network::{Layer, Network, Prunable as _};
use relief_core::pipeline::{
    derive_seed, gradient_check, init_params, iterate, parameter_sizes, read_history, OptimizerConfig, OptimizerKind,
    Optimizer, PruneConfig, RunInputs, HISTORY_FILE,
};
use relief_core::tensor::{conv2d, ConvGeometry, Tensor};

/// Every masked weight or bias, read through the public accessors.
fn masked_values(net: &Network<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in net.layers() {
        match layer {
            Layer::Dense(d) => {
                for j in 0..d.outputs() {
                    for i in 0..d.inputs() {
                        if !d.is_active(j, i) {
                            out.push(d.weight(j, i));
                        }
                    }
                    if !d.is_active(j, d.inputs()) {
                        out.push(d.bias[j]);
                    }
                }
            }
            Layer::Conv(c) => {
                for j in 0..c.out_channels() {
                    for i in 0..c.in_channels() {
                        if !c.is_active(j, i) {
                            out.extend_from_slice(c.kernel(j, i));
                        }
                    }
                    if !c.is_active(j, c.in_channels()) {
                        out.push(c.bias[j]);
                    }
                }
            }
            _ => {}
        }
    }
    out
}

fn mask_half(r: &mut ChaCha8Rng, net: &mut Network<f64>) {
    for l in net.layers_mut() {
        if let Some(p) = l.as_prunable_mut() {
            random_masks(r, p, 0.5);
        }
    }
}

/// Runs `steps` updates with random gradients and returns the masked values.
pub fn hammer(seed: u64, kind: OptimizerKind, steps: usize) -> (usize, Vec<f64>) {
    let mut r = rng(seed);
    let mut net = random_small_net(&mut r);
    mask_half(&mut r, &mut net);
    let cfg = OptimizerConfig::constant(kind, 0.05, 1, 8).with_weight_decay(5e-4);
    let mut opt = Optimizer::new(cfg, &net).unwrap();
    let sizes = parameter_sizes(&net);
    for _ in 0..steps {
        let grads: Vec<Vec<f64>> = sizes.iter().map(|&n| uniform_vec(&mut r, n, -3.0, 3.0)).collect();
        opt.apply(&mut net, &grads, 0.05).unwrap();
    }
    let masked = masked_values(&net);
    (masked.len(), masked)
}

#[test]
fn masked_parameters_stay_zero_under_both_optimizers() {
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        for seed in 0..10 {
            let (n, values) = hammer(seed, kind, 100);
            assert!(n > 0);
            assert!(values.iter().all(|&v| v == 0.0), "{kind:?} seed {seed}");
        }
    }
}

#[test]
fn real_gradients_respect_masks() {
    let mut r = rng(40);
    for _ in 0..10 {
        let mut net = random_small_net(&mut r);
        mask_half(&mut r, &mut net);
        let n = r.random_range(2..6);
        let x = activations(&mut r, [vec![n], net.input_shape().to_vec()].concat(), true);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..net.classes())).collect();
        let (_, grads) = relief_core::pipeline::loss_and_gradients(&net, &x, &labels).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::constant(OptimizerKind::Adam, 0.01, 1, 8), &net).unwrap();
        for _ in 0..20 {
            opt.apply(&mut net, &grads, 0.01).unwrap();
        }
        assert!(masked_values(&net).iter().all(|&v| v == 0.0));
        net.check_invariants().unwrap();
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut r = rng(41);
    for _ in 0..20 {
        let net = random_small_net(&mut r);
        let n = r.random_range(1..4);
        let x = activations(&mut r, [vec![n], net.input_shape().to_vec()].concat(), true);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..net.classes())).collect();
        let check = gradient_check(&net, &x, &labels, 1e-6, 1e-3, 1e-7).unwrap();
        assert!(check.checked > 0);
        assert_eq!(check.failures, 0, "{check:?}");
    }
}

#[test]
fn seeds_are_distinct_per_iteration_and_stream() {
    let mut seen = std::collections::HashSet::new();
    for it in 0..50 {
        for stream in 0..8 {
            assert!(seen.insert(derive_seed(7, it, stream)));
        }
    }
    assert_eq!(derive_seed(7, 3, 1), derive_seed(7, 3, 1));
}

#[test]
fn iterate_only_removes_parameters() {
    let data: Dataset<f64> = synth_dataset(50, 300, 3).unwrap();
    let test: Dataset<f64> = synth_dataset(51, 90, 3).unwrap();
    let mut initial: Network<f64> = relief_core::presets::build("mlp:3-12-8-3").unwrap();
    init_params(&mut initial, 52);
    let mut baseline = initial.clone();
    let cfg = OptimizerConfig::constant(OptimizerKind::Adam, 0.01, 3, 32);
    relief_core::pipeline::train(&mut baseline, &data, &cfg, 53).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let pcfg = PruneConfig::new(0.9, 0.9, 100, 3, 54);
    let summary = iterate(
        RunInputs {
            initial: &initial,
            baseline: &baseline,
            train: &data,
            test: &test,
        },
        &pcfg,
        &cfg,
        Some(dir.path()),
    )
    .unwrap();
    assert_eq!(summary.reports.len(), 3);
    for w in summary.reports.windows(2) {
        assert!(w[1].active <= w[0].active);
        assert!(w[1].flops_pruned_pct >= w[0].flops_pruned_pct);
    }
    assert!(summary.reports[0].active < baseline.parameter_count());
    assert_eq!(read_history(&dir.path().join(HISTORY_FILE)).unwrap(), summary.reports);

    // every mask of a later iteration is contained in the earlier one
    let nets: Vec<Network<f64>> = (1..=3).map(|i| load_model(dir.path().join(format!("iter_{i:03}"))).unwrap()).collect();
    for pair in nets.windows(2) {
        for (a, b) in pair[0].layers().iter().zip(pair[1].layers()) {
            if let (Some(a), Some(b)) = (a.as_prunable(), b.as_prunable()) {
                for j in 0..a.targets() {
                    for i in 0..=a.contributors() {
                        assert!(a.is_active(j, i) || !b.is_active(j, i));
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_direct_loops(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (c, o, k) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..5));
        let (h, w) = (r.random_range(k..k + 6), r.random_range(k..k + 6));
        let g = ConvGeometry::new((r.random_range(1..3), r.random_range(1..3)), (r.random_range(0..3), r.random_range(0..3)));
        let x = Tensor::new(vec![c, h, w], uniform_vec(&mut r, c * h * w, -1.0, 1.0)).unwrap();
        let kernels = Tensor::new(vec![o, c, k, k], uniform_vec(&mut r, o * c * k * k, -1.0, 1.0)).unwrap();
        let bias = uniform_vec(&mut r, o, -1.0, 1.0);
        let got = conv2d(&x, &kernels, &bias, g).unwrap();
        let plane = h * w;
        for j in 0..o {
            let mut want: Option<Vec<f64>> = None;
            for i in 0..c {
                let kern = &kernels.data()[(j * c + i) * k * k..(j * c + i + 1) * k * k];
                let (part, oh, ow) = naive_correlate(&x.data()[i * plane..(i + 1) * plane], (h, w), kern, k, g);
                prop_assert_eq!(&got.shape()[1..], &[oh, ow][..]);
                match want.as_mut() {
                    None => want = Some(part),
                    Some(acc) => acc.iter_mut().zip(part).for_each(|(a, p)| *a += p),
                }
            }
            let want = want.unwrap();
            let map = &got.data()[j * want.len()..(j + 1) * want.len()];
            for (a, b) in map.iter().zip(&want) {
                prop_assert!((a - (b + bias[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saved_models_load_identically(seed in any::<u64>(), p in 0.0f64..0.8) {
        let mut r = rng(seed);
        let mut net = random_small_net(&mut r);
        for l in net.layers_mut() {
            if let Some(pr) = l.as_prunable_mut() {
                random_masks(&mut r, pr, p);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        save_model(&net, dir.path().join("a")).unwrap();
        let back: Network<f64> = load_model(dir.path().join("a")).unwrap();
        prop_assert_eq!(&back, &net);
        save_model(&back, dir.path().join("b")).unwrap();
        for f in ["model.json", "weights.bin"] {
            prop_assert_eq!(
                std::fs::read(dir.path().join("a").join(f)).unwrap(),
                std::fs::read(dir.path().join("b").join(f)).unwrap()
            );
        }
    }

    #[test]
    fn idx_round_trip(n in 1usize..20, h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let mut r = rng(seed);
        let pixels: Vec<u8> = (0..n * h * w).map(|_| r.random()).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..10)).collect();
        let classes = labels.iter().max().unwrap() + 1;
        let images = Tensor::new(vec![n, 1, h, w], pixels.iter().map(|&p| p as f64 / 255.0).collect()).unwrap();
        let ds = Dataset::new(images, labels, classes).unwrap();
        let (ib, lb) = encode_idx(&ds).unwrap();
        // header: magic then big-endian sizes
        prop_assert_eq!(&ib[..4], &2051u32.to_be_bytes()[..]);
        prop_assert_eq!(&lb[..4], &2049u32.to_be_bytes()[..]);
        prop_assert_eq!(&ib[16..], &pixels[..]);
        let back: Dataset<f64> = parse_idx_pair(&ib, &lb).unwrap();
        prop_assert_eq!(back.labels(), ds.labels());
        prop_assert_eq!(back.classes(), classes);
        prop_assert_eq!(back.images().shape(), ds.images().shape());
        for (a, b) in back.images().data().iter().zip(ds.images().data()) {
            prop_assert!((a - b).abs() < 1e-15);
        }
        // bytes survive a second encode exactly
        let (ib2, lb2) = encode_idx(&back).unwrap();
        prop_assert_eq!(ib2, ib);
        prop_assert_eq!(lb2, lb);
    }
}
