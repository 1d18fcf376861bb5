//! Property tests for the numeric core: the matmul oracle, softmax
//! normalization and shift invariance, and purity.

use omniview::tensor::tape::Tape;
use omniview::tensor::Tensor;
use proptest::prelude::*;

/// Independent triple-loop reference product.
fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a[i * k + kk] * b[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

proptest! {
    /// Tape matmul agrees with the naive oracle within 1e-12 on matrices up
    /// to 16x16.
    #[test]
    fn matmul_matches_triple_loop(
        m in 1usize..=16,
        k in 1usize..=16,
        n in 1usize..=16,
        seed in proptest::collection::vec(-5.0f64..5.0, 512..=512),
    ) {
        let a: Vec<f64> = seed.iter().copied().cycle().take(m * k).collect();
        let b: Vec<f64> = seed.iter().rev().copied().cycle().take(k * n).collect();
        let mut tape = Tape::new();
        let av = tape.leaf(Tensor::new(vec![m, k], a.clone()).unwrap()).unwrap();
        let bv = tape.leaf(Tensor::new(vec![k, n], b.clone()).unwrap()).unwrap();
        let got = tape.matmul(av, bv).unwrap();
        let want = naive_matmul(&a, &b, m, k, n);
        for (g, w) in tape.value(got).data().iter().zip(want.iter()) {
            prop_assert!((g - w).abs() < 1e-12, "{} vs {}", g, w);
        }
    }

    /// Softmax rows sum to 1 within 1e-12 and are invariant to adding a
    /// constant to the whole row.
    #[test]
    fn softmax_rows_normalize_and_shift_invariant(
        rows in 1usize..=6,
        cols in 1usize..=9,
        vals in proptest::collection::vec(-30.0f64..30.0, 64..=64),
        shift in -50.0f64..50.0,
    ) {
        let data: Vec<f64> = vals.iter().copied().cycle().take(rows * cols).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![rows, cols], data.clone()).unwrap()).unwrap();
        let y = tape.softmax_last(x).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12, "row sum {}", s);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
        let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
        let xs = tape.leaf(Tensor::new(vec![rows, cols], shifted).unwrap()).unwrap();
        let ys = tape.softmax_last(xs).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(ys).data().iter()) {
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    /// Exported ops are pure: identical inputs give bitwise-identical
    /// outputs across separate tapes.
    #[test]
    fn ops_are_pure(vals in proptest::collection::vec(-100.0f64..100.0, 24..=24)) {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![4, 6], vals.clone()).unwrap()).unwrap();
            let s = tape.softmax_last(x).unwrap();
            let r = tape.relu(s).unwrap();
            let g = tape.leaf(Tensor::full(vec![6], 1.0)).unwrap();
            let b = tape.leaf(Tensor::zeros(vec![6])).unwrap();
            let ln = tape.layer_norm(r, g, b, 1e-5).unwrap();
            tape.value(ln).data().to_vec()
        };
        prop_assert_eq!(run(), run());
    }
}
