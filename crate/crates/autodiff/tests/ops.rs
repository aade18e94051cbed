use dodt_autodiff::gradcheck::{finite_diff_check, op_suite};
use dodt_autodiff::{Graph, OpKind, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_passes_on_twenty_shapes() {
    let report = op_suite(0, 20, 1e-5, None).unwrap();
    assert_eq!(report.len(), OpKind::ALL.len());
    for r in &report {
        assert_eq!(r.trials, 20);
        assert!(
            r.worst <= 1e-4,
            "{} worst {:.3e} at {:?}",
            r.kind.name(),
            r.worst,
            r.worst_shapes
        );
    }
}

#[test]
fn corrupted_derivative_is_caught_for_every_op() {
    for kind in OpKind::ALL {
        let report = op_suite(1, 5, 1e-5, Some(kind)).unwrap();
        let hit = report.iter().find(|r| r.kind == kind).unwrap();
        assert!(
            hit.worst > 1e-2,
            "fault in {} went unnoticed ({:.3e})",
            kind.name(),
            hit.worst
        );
    }
}

#[test]
fn op_names_round_trip() {
    for kind in OpKind::ALL {
        assert_eq!(OpKind::from_name(kind.name()), Some(kind));
    }
    assert_eq!(OpKind::from_name("nope"), None);
}

fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum();
        }
    }
    out
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..6, 1usize..6, 1usize..6)
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop((n, k, m) in dims(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::uniform(&[n, k], 2.0, &mut rng);
        let b = Tensor::uniform(&[k, m], 2.0, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(&a), g.constant(&b));
        let c = g.matmul(va, vb).unwrap();
        let want = naive_matmul(a.data(), b.data(), n, k, m);
        for (x, y) in g.value(c).iter().zip(&want) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[rows, cols], 30.0, &mut rng);
        let mut g = Graph::new();
        let v = g.constant(&x);
        let s = g.softmax(v);
        for row in g.value(s).chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_sum_of_products_is_the_other_factor(len in 1usize..20, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::uniform(&[len], 3.0, &mut rng).requires_grad(true);
        let b = Tensor::uniform(&[len], 3.0, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(&a), g.constant(&b));
        let p = g.mul(va, vb).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        prop_assert_eq!(grads.get(va).unwrap(), b.data());
    }

    #[test]
    fn composed_chain_passes_finite_differences(len in 1usize..8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[len], 1.5, &mut rng).requires_grad(true);
        let worst = finite_diff_check(
            |g, v| {
                let t = g.tanh(v);
                let s = g.softplus(t);
                let q = g.square(s);
                let e = g.exp(q);
                Ok(g.mean(e))
            },
            &x,
            1e-5,
        )
        .unwrap();
        prop_assert!(worst <= 1e-6, "worst {worst:e}");
    }
}
