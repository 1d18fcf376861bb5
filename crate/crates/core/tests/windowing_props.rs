//! Property tests for the spatial machinery: round-trip identities and mask
//! structure over randomized geometries.

use omniview::tensor::tape::Tape;
use omniview::tensor::Tensor;
use omniview::windowing::{cyclic_shift, shift_mask, window_partition, window_reverse, FeatureMap};
use proptest::prelude::*;

fn arb_grid() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<f64>)> {
    // (b, grid multiplier, m, c) with h = w = mult * m
    (1usize..=2, 1usize..=4, 1usize..=4, 1usize..=3).prop_flat_map(|(b, mult, m, c)| {
        let h = mult * m;
        let numel = b * h * h * c;
        (
            Just(b),
            Just(h),
            Just(m),
            Just(c),
            proptest::collection::vec(-10.0f64..10.0, numel..=numel),
        )
    })
}

proptest! {
    /// window_reverse after window_partition reproduces the input bitwise.
    #[test]
    fn partition_reverse_round_trip((b, h, m, c, data) in arb_grid()) {
        let mut tape = Tape::<f64>::new();
        let t = Tensor::new(vec![b, h, h, c], data).unwrap();
        let fm = FeatureMap { var: tape.leaf(t.clone()).unwrap(), b, h, w: h, c };
        let ws = window_partition(&mut tape, &fm, m).unwrap();
        let back = window_reverse(&mut tape, &ws).unwrap();
        prop_assert_eq!(tape.value(back.var).data(), t.data());
    }

    /// Shifting by -d then +d is the identity bitwise.
    #[test]
    fn shift_unshift_round_trip((b, h, m, c, data) in arb_grid(), d_raw in 0usize..8) {
        prop_assume!(h > 1);
        let d = (d_raw % (h - 1)) + 1;
        let _ = m;
        let mut tape = Tape::<f64>::new();
        let t = Tensor::new(vec![b, h, h, c], data).unwrap();
        let fm = FeatureMap { var: tape.leaf(t.clone()).unwrap(), b, h, w: h, c };
        let shifted = cyclic_shift(&mut tape, &fm, -(d as isize)).unwrap();
        let back = cyclic_shift(&mut tape, &shifted, d as isize).unwrap();
        prop_assert_eq!(tape.value(back.var).data(), t.data());
    }

    /// Masks are symmetric, zero on the diagonal, and all-zero for d = 0.
    #[test]
    fn mask_structure(mult in 1usize..=3, m in 1usize..=4, d_raw in 0usize..4) {
        let h = mult * m;
        let d = d_raw % m;
        let mask = shift_mask::<f64>(h, h, m, d).unwrap();
        let n = mask.tokens;
        let data = mask.data.data();
        for w in 0..mask.n_windows {
            for i in 0..n {
                prop_assert_eq!(data[(w * n + i) * n + i], 0.0);
                for j in 0..n {
                    prop_assert_eq!(data[(w * n + i) * n + j], data[(w * n + j) * n + i]);
                }
            }
        }
        if d == 0 {
            prop_assert!(data.iter().all(|&v| v == 0.0));
        }
    }
}
