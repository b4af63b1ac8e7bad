use egdnet_core::data::{augment, laplacian_edges, synth_generate, AugmentConfig, DepthSample};
use egdnet_core::tensor::{bilinear_resize, conv2d_with, ConvAlgo, ConvOptions};
use egdnet_core::train::{metrics, poly_lr, RelDenominator};
use egdnet_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn depth_triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (1usize..64).prop_flat_map(|n| {
        (
            prop::collection::vec(0.1f64..10.0, n),
            prop::collection::vec(0.1f64..10.0, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(d, g, mut m)| {
                m[0] = true;
                (d, g, m)
            })
    })
}

proptest! {
    #[test]
    fn delta_thresholds_are_monotone((d, g, m) in depth_triple()) {
        let r = metrics(&d, &g, &m, RelDenominator::GroundTruth).unwrap();
        prop_assert!(r.delta1 <= r.delta2 && r.delta2 <= r.delta3);
        prop_assert!(r.rmse >= 0.0 && r.rel >= 0.0);
        prop_assert_eq!(r.n_valid_pixels, m.iter().filter(|&&v| v).count());
    }

    #[test]
    fn rmse_matches_scalar_loop((d, g, m) in depth_triple()) {
        let r = metrics(&d, &g, &m, RelDenominator::Prediction).unwrap();
        let (mut se, mut rel, mut n) = (0.0, 0.0, 0.0);
        for i in 0..d.len() {
            if m[i] {
                se += (d[i] - g[i]).powi(2);
                rel += (d[i] - g[i]).abs() / d[i];
                n += 1.0;
            }
        }
        prop_assert!((r.rmse - (se / n).sqrt()).abs() < 1e-10);
        prop_assert!((r.rel - rel / n).abs() < 1e-10);
    }

    #[test]
    fn laplacian_ignores_affine_depth(
        h in 1usize..12, w in 1usize..12,
        a in -0.5f32..0.5, b in -0.5f32..0.5, c in 1.0f32..5.0,
    ) {
        let depth: Vec<f32> = (0..h * w).map(|i| a * (i % w) as f32 + b * (i / w) as f32 + c + 6.0).collect();
        let edges = laplacian_edges(&depth, None, h, w, 0.25).unwrap();
        prop_assert!(edges.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn poly_lr_strictly_decreases(max_epoch in 1usize..60, power in 0.05f64..3.0, lr in 1e-4f64..1.0) {
        let v: Vec<f64> = (0..=max_epoch).map(|n| poly_lr(n, lr, max_epoch, power).unwrap()).collect();
        prop_assert!(v.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn concat_then_split_is_identity(a in 1usize..4, b in 1usize..4, rest in 1usize..5, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x: Tensor<f64> = Tensor::from_vec((0..a * rest).map(|_| rand::Rng::random(&mut r)).collect(), &[a, rest]).unwrap();
        let y: Tensor<f64> = Tensor::from_vec((0..b * rest).map(|_| rand::Rng::random(&mut r)).collect(), &[b, rest]).unwrap();
        let joined = Tensor::concat(&[x.clone(), y.clone()], 0).unwrap();
        let parts = joined.split(0, &[a, b]).unwrap();
        prop_assert_eq!(parts[0].data(), x.data());
        prop_assert_eq!(parts[1].data(), y.data());
    }

    #[test]
    fn same_size_resize_is_identity(h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x: Tensor<f64> = Tensor::from_vec((0..2 * h * w).map(|_| rand::Rng::random(&mut r)).collect(), &[1, 2, h, w]).unwrap();
        let y = bilinear_resize(&x, h, w).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn fast_conv_matches_loop_reference(
        stride in 1usize..3, dilation in 1usize..4, depthwise in any::<bool>(),
        c in 1usize..4, h in 7usize..12, w in 7usize..12, seed in any::<u64>(),
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_t = |shape: &[usize]| -> Tensor<f64> {
            Tensor::from_vec((0..shape.iter().product()).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect(), shape).unwrap()
        };
        let (co, groups) = if depthwise { (c, c) } else { (2, 1) };
        let o = ConvOptions::default().stride(stride).dilation(dilation).padding(dilation).groups(groups);
        let x = rand_t(&[1, c, h, w]);
        let k = rand_t(&[co, c / groups, 3, 3]);
        let fast = conv2d_with(&x, &k, None, o, ConvAlgo::Im2col).unwrap();
        let naive = conv2d_with(&x, &k, None, o, ConvAlgo::Naive).unwrap();
        for (a, b) in fast.data().iter().zip(naive.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn augment_keeps_depth_values(seed in any::<u64>()) {
        let s = &synth_generate(seed % 16, 1, 32, 32).unwrap()[0];
        let cfg = AugmentConfig { rotation: (0.0, 0.0), ..AugmentConfig::default() };
        let out = augment(s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut a = s.depth.clone();
        let mut b = out.depth.clone();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        prop_assert_eq!(a, b);

        let out = augment(s, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed));
        let lo = s.depth.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = s.depth.iter().copied().fold(0.0, f32::max);
        for (d, v) in out.depth.iter().zip(&out.valid) {
            if *v {
                prop_assert!(*d >= lo - 1e-5 && *d <= hi + 1e-5);
            }
        }
    }
}

#[test]
fn flip_twice_restores_sample() {
    let s = &synth_generate(3, 1, 32, 16).unwrap()[0];
    let cfg = AugmentConfig {
        flip_prob: 1.0,
        ..AugmentConfig::identity()
    };
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let twice: DepthSample = augment(&augment(s, &cfg, &mut r), &cfg, &mut r);
    assert_eq!(&twice, s);
}
