mod common;

use prefixmtl::numerics::{Graph, Tensor};
use prefixmtl::seed;
use proptest::prelude::*;

#[test]
fn every_primitive_matches_central_differences() {
    for (name, report) in common::primitive_checks() {
        assert!(report.checked > 0, "{name}");
        assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
    }
}

#[test]
fn joint_loss_matches_central_differences() {
    let report = common::joint_loss_check();
    assert!(report.checked > 500);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

fn softmax_rows(data: Vec<f64>, rows: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![rows, data.len() / rows], data).unwrap(), false);
    let y = g.softmax(x, 1).unwrap();
    g.value(y).data().to_vec()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(data in prop::collection::vec(-30.0f64..30.0, 12), shift in -50.0f64..50.0) {
        let p = softmax_rows(data.clone(), 3);
        for row in p.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
        let shifted = softmax_rows(data.iter().map(|x| x + shift).collect(), 3);
        for (a, b) in p.iter().zip(&shifted) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized(data in prop::collection::vec(-10.0f64..10.0, 8), scale in 0.5f64..4.0) {
        prop_assume!(data.iter().any(|&x| (x - data[0]).abs() > 1e-3));
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 8], data.iter().map(|v| v * scale).collect()).unwrap(), false);
        let gamma = g.leaf(Tensor::full(&[8], 1.0), false);
        let beta = g.leaf(Tensor::zeros(&[8]), false);
        let y = g.layer_norm(x, gamma, beta, 1, 1e-12).unwrap();
        let out = g.value(y).data();
        let mean = out.iter().sum::<f64>() / 8.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matmul_is_linear(k in 0u64..1000, alpha in -3.0f64..3.0) {
        let mut rng = seed::rng(&[k]);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let mut g = Graph::new();
        let (a, b, w) = (g.leaf(a, false), g.leaf(b, false), g.leaf(w, false));
        let sa = g.scale(a, alpha).unwrap();
        let lhs_in = g.add(sa, b).unwrap();
        let lhs = g.matmul(lhs_in, w).unwrap();
        let aw = g.matmul(a, w).unwrap();
        let bw = g.matmul(b, w).unwrap();
        let saw = g.scale(aw, alpha).unwrap();
        let rhs = g.add(saw, bw).unwrap();
        for (x, y) in g.value(lhs).data().iter().zip(g.value(rhs).data()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }
}

