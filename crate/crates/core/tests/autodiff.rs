use cpcx_core::tensor::gradcheck::{grad_check, EPSILON};
use cpcx_core::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..5, 1usize..5, 1usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matmul_adjoints_match_differences((m, k, n) in dims(), seed in 0u64..1000) {
        let a = Tensor::new(vec![m, k], (0..m * k).map(|i| ((i as u64 * 7 + seed) % 13) as f64 / 6.0 - 1.0).collect()).unwrap();
        let b = Tensor::new(vec![k, n], (0..k * n).map(|i| ((i as u64 * 5 + seed) % 11) as f64 / 5.0 - 1.0).collect()).unwrap();
        let report = grad_check(
            |_, v| Ok(v[0].matmul(v[1])?.tanh().sum()),
            &[("a".into(), a), ("b".into(), b)],
            EPSILON,
            1e-6,
        ).unwrap();
        prop_assert!(report.passed(), "max rel error {}", report.max_rel_error());
    }

    #[test]
    fn sum_of_scaled_leaf_has_constant_adjoint(x in matrix(3, 4), s in -3.0f64..3.0) {
        let g = Graph::new();
        let v = g.leaf(x);
        g.backward(v.scale(s).sum()).unwrap();
        prop_assert!(v.grad().data().iter().all(|&d| (d - s).abs() < 1e-12));
    }

    #[test]
    fn log_softmax_rows_normalise(x in matrix(4, 5)) {
        let g = Graph::new();
        let y = g.constant(x).log_softmax().unwrap();
        let y = y.value();
        for r in 0..4 {
            let total: f64 = y.row(r).iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_shift_invariant(x in matrix(2, 6), c in -50.0f64..50.0) {
        let g = Graph::new();
        let a = g.constant(x.clone()).log_softmax().unwrap().value().clone();
        let b = g.constant(x).add_scalar(c).log_softmax().unwrap().value().clone();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn fan_out_adjoints_add(x in matrix(2, 3)) {
        // d/dx sum(x*x + x) = 2x + 1.
        let g = Graph::new();
        let v = g.leaf(x.clone());
        g.backward(v.mul(v).unwrap().add(v).unwrap().sum()).unwrap();
        let grad = v.grad();
        for (d, x) in grad.data().iter().zip(x.data()) {
            prop_assert!((d - (2.0 * x + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_norm_adjoints_match_differences(x in matrix(3, 4)) {
        let gain = Tensor::new(vec![4], vec![1.0, 0.5, -0.7, 1.3]).unwrap();
        let bias = Tensor::new(vec![4], vec![0.1, -0.2, 0.0, 0.3]).unwrap();
        let w = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let report = grad_check(
            |g, v| {
                let y = v[0].channel_norm(v[1], v[2], 1e-5)?;
                Ok(y.mul(g.constant(w.clone()))?.sum())
            },
            &[("x".into(), x), ("gain".into(), gain), ("bias".into(), bias)],
            EPSILON,
            1e-6,
        ).unwrap();
        prop_assert!(report.passed(), "max rel error {}", report.max_rel_error());
    }
}

#[test]
fn transpose_twice_is_identity() {
    let g = Graph::new();
    let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let y = g.constant(x.clone()).transpose().unwrap().transpose().unwrap();
    assert_eq!(*y.value(), x);
}
