use proptest::prelude::*;
use rtlab_core::ops;
use rtlab_core::{Graph, Tensor};

fn matrix(max_rows: usize, max_cols: usize, bound: f64) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 2..=max_cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-bound..bound, r * c).prop_map(move |v| Tensor::new([r, c], v).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in matrix(6, 12, 100.0), t in 0.1f64..4.0) {
        let p = ops::softmax(&x, t).unwrap();
        for row in p.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn self_cross_entropy_is_entropy(x in matrix(5, 10, 30.0)) {
        let p = ops::softmax(&x, 1.0).unwrap();
        let ce = ops::cross_entropy(&p, &p).unwrap();
        prop_assert!(ce >= 0.0);
        prop_assert!((ce - ops::entropy(&p)).abs() < 1e-10);
        let kl = ops::mean_kl(&p, &p).unwrap();
        prop_assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative((x, y) in (1usize..5, 2usize..9).prop_flat_map(|(r, c)| {
        let m = move || prop::collection::vec(-20.0f64..20.0, r * c).prop_map(move |v| Tensor::new([r, c], v).unwrap());
        (m(), m())
    })) {
        let (p, q) = (ops::softmax(&x, 1.0).unwrap(), ops::softmax(&y, 1.0).unwrap());
        prop_assert!(ops::kl_rows(&p, &q).unwrap().iter().all(|&k| k > -1e-12));
    }

    #[test]
    fn l2_normalize_near_zero_has_finite_gradient(
        scale in prop::sample::select(vec![0.0, 1e-300, 1e-30, 1e-12, 1e-9]),
        dirs in prop::collection::vec(-1.0f64..1.0, 6),
        w in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new([2, 3], dirs.iter().map(|d| d * scale).collect()).unwrap(), true);
        let y = g.l2_normalize(x, ops::NORM_EPS);
        let c = g.constant(Tensor::new([2, 3], w).unwrap());
        let z = g.mul(y, c).unwrap();
        let s = g.sum(z);
        let grads = g.backward(s).unwrap();
        let gx = grads.get_or_zeros(x, 6);
        prop_assert!(gx.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn l2_normalize_rows_have_unit_norm(x in matrix(5, 8, 10.0)) {
        let y = ops::l2_normalize(&x, ops::NORM_EPS);
        for (row, orig) in y.rows().zip(x.rows()) {
            let n = orig.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-6 {
                prop_assert!((ny - 1.0).abs() < 1e-12);
            }
        }
    }
}
