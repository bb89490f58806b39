//! Property tests for structural invariants.

use adunet::attention::{window_partition, window_reverse, AttentionParams};
use adunet::fusion::{cff, gcff, FusionParams};
use adunet::image::{FeatureMap, Image};
use adunet::metrics::ssim;
use ndarray::Array3;
use proptest::prelude::*;

fn arb_map(c: usize, h: usize, w: usize) -> impl Strategy<Value = FeatureMap> {
    proptest::collection::vec(-1.0f32..1.0, c * h * w).prop_map(move |v| {
        FeatureMap::new(Array3::from_shape_vec((c, h, w), v).unwrap(), 0)
    })
}

fn arb_image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    proptest::collection::vec(0.0f32..1.0, 3 * h * w).prop_map(move |v| {
        Image::new(Array3::from_shape_vec((3, h, w), v).unwrap()).unwrap()
    })
}

fn arb_fusion_params(c: usize) -> impl Strategy<Value = FusionParams> {
    (
        proptest::collection::vec(-0.6f32..0.6, c * c),
        proptest::collection::vec(-0.3f32..0.3, c),
        proptest::collection::vec(-0.6f32..0.6, c * c),
        proptest::collection::vec(-0.3f32..0.3, c),
    )
        .prop_map(move |(w1, b1, w2, b2)| {
            let mut p = FusionParams::identity(c);
            p.conv1_w = Array3::from_shape_vec((c, c, 1), w1)
                .unwrap()
                .insert_axis(ndarray::Axis(3));
            p.conv1_b = ndarray::Array1::from_vec(b1);
            p.conv2_w = Array3::from_shape_vec((c, c, 1), w2)
                .unwrap()
                .insert_axis(ndarray::Axis(3));
            p.conv2_b = ndarray::Array1::from_vec(b2);
            p
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Both fusion gates always produce convex combinations of their inputs.
    #[test]
    fn fusion_outputs_stay_in_convex_hull(
        fa in arb_map(4, 5, 5),
        fb in arb_map(4, 5, 5),
        p in arb_fusion_params(4),
    ) {
        for out in [cff(&fa, &fb, &p).unwrap(), gcff(&fa, &fb, &p).unwrap()] {
            for ((&a, &b), &y) in fa.data.iter().zip(fb.data.iter()).zip(out.data.iter()) {
                let (lo, hi) = (a.min(b), a.max(b));
                prop_assert!(y >= lo - 1e-5 && y <= hi + 1e-5);
            }
        }
    }

    /// Window partition followed by reverse recovers the input exactly for
    /// arbitrary (including non-divisible) geometries.
    #[test]
    fn window_partition_round_trips(
        c in 1usize..5,
        h in 1usize..24,
        w in 1usize..24,
        win in 1usize..8,
        seed in 0u64..1000,
    ) {
        let data = Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
            ((ci * 31 + y * 17 + x * 7) as f32 + seed as f32).sin()
        });
        let (windows, info) = window_partition(&data, win);
        prop_assert_eq!(windows.shape()[0], h.div_ceil(win) * w.div_ceil(win));
        let back = window_reverse(&windows, &info, win);
        prop_assert_eq!(back, data);
    }

    /// SSIM is symmetric and bounded by 1 in magnitude.
    #[test]
    fn ssim_symmetric_and_bounded(a in arb_image(12, 12), b in arb_image(12, 12)) {
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!(ab.abs() <= 1.0 + 1e-12);
    }

    /// Attention with any parameters preserves the input shape.
    #[test]
    fn attention_preserves_shape(
        h in 1usize..12,
        w in 1usize..12,
        win in 1usize..6,
        seed in 0u64..100,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let c = 4;
        let data = Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0f32));
        let x = FeatureMap::new(data, 0);
        let mut p = AttentionParams::zeros(c, win, 2);
        for v in p.q_w.iter_mut().chain(p.v_w.iter_mut()) {
            *v = rng.random_range(-0.3..0.3);
        }
        let y = adunet::attention::wmsa(&x, &p, win, 2).unwrap();
        prop_assert_eq!(y.data.shape(), x.data.shape());
        let ys = adunet::attention::swmsa(&x, &p, win, 2).unwrap();
        prop_assert_eq!(ys.data.shape(), x.data.shape());
    }
}
