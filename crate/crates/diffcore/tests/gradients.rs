use diffcore::{
    finite_diff_check, op_gradient_suite, Graph, NodeId, ParamStore, Result, Tensor,
};
use proptest::prelude::*;

/// Central difference of `f` at each coordinate of `x`.
fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn sigmoid_sum_gradient_matches_finite_differences() {
    let x = [0.5, -1.0];
    let oracle = central_diff(
        |v| v.iter().map(|t| 1.0 / (1.0 + (-t).exp())).sum(),
        &x,
        1e-6,
    );
    assert!((oracle[0] - 0.2350).abs() < 5e-5);
    assert!((oracle[1] - 0.1966).abs() < 5e-5);

    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::new(&[2], x.to_vec()).unwrap());
    let mut g = Graph::new();
    let xn = g.param(&store, id);
    let s = g.sigmoid(xn).unwrap();
    let l = g.sum(s).unwrap();
    g.backward(l, &mut store).unwrap();
    let grad = store.value(id).grad().unwrap();
    for (a, n) in grad.iter().zip(&oracle) {
        assert!((a - n).abs() < 1e-8);
    }
}

#[test]
fn every_op_passes_finite_differences() {
    let checks = op_gradient_suite(20, 1e-4, 11).unwrap();
    for c in &checks {
        assert!(c.passed, "{} failed with max rel err {}", c.op, c.max_rel_err);
    }
    assert_eq!(checks.len(), diffcore::closed_op_set().len());
}

#[test]
fn softmax_of_matvec_passes_gradcheck() {
    let mut store = ParamStore::new();
    let w = store.add(
        "W",
        Tensor::new(&[3, 3], vec![0.2, -0.5, 0.9, 1.1, 0.3, -0.7, -0.4, 0.8, 0.05]).unwrap(),
    );
    let v = Tensor::new(&[3, 1], vec![0.6, -1.3, 0.4]).unwrap();
    // sum(softmax(.)) over a column is identically 1, so score the softmax
    // row-wise against a fixed weighting to get non-trivial gradients.
    let build = |g: &mut Graph, p: &ParamStore| -> Result<NodeId> {
        let wn = g.param(p, w);
        let vn = g.constant(v.clone());
        let wv = g.matmul(wn, vn)?;
        let row = g.reshape(wv, &[1, 3])?;
        let sm = g.row_softmax(row)?;
        let k = g.constant(Tensor::new(&[3], vec![1.0, 2.0, -1.5]).unwrap());
        let s = g.mul(sm, k)?;
        g.sum(s)
    };
    let report = finite_diff_check(&mut store, build, 9, 1e-4, 3).unwrap();
    assert!(report.passed(), "{:?}", report.probes);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[rows, cols], data).unwrap());
        let y = g.row_softmax(x).unwrap();
        for r in g.value(y).data().chunks(cols) {
            prop_assert!(r.iter().all(|v| *v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
    }
}
