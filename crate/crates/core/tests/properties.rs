//! Property tests for numeric invariants of the tensor tape, the scoring
//! head and the ranking metrics.

use proptest::prelude::*;
use sella::evalrep::auc;
use sella::minilm::yes_no_probability;
use sella::tensor::{Graph, Tensor};

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-20.0..20.0f64, r * c)))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant((r, c, data) in matrix(5, 7), shift in -100.0..100.0f64) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![r, c], data.clone()).unwrap());
        let y = g.row_softmax(x).unwrap();
        let xs = g.constant(Tensor::new(vec![r, c], data.iter().map(|v| v + shift).collect()).unwrap());
        let ys = g.row_softmax(xs).unwrap();
        for i in 0..r {
            let row = g.value(y).row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            for (a, b) in row.iter().zip(g.value(ys).row(i)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_centered((r, c, data) in matrix(4, 8)) {
        prop_assume!(c > 1);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![r, c], data).unwrap());
        let y = g.layer_norm(x).unwrap();
        for i in 0..r {
            let mean = g.value(y).row(i).iter().sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn yes_no_probability_is_bounded(logits in prop::collection::vec(-1e4..1e4f64, 8..16)) {
        let p = yes_no_probability(&logits).unwrap();
        prop_assert!(p.is_finite() && (0.0..=1.0).contains(&p));
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps(
        pairs in prop::collection::vec((-5.0..5.0f64, 0u8..2), 2..60),
    ) {
        let (scores, labels): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let a = auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (0.5 * s).exp() * 3.0 - 1.0).collect();
        prop_assert_eq!(a, auc(&mapped, &labels).unwrap());
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        prop_assert!((a + auc(&scores, &flipped).unwrap() - 1.0).abs() < 1e-12);
    }
}
