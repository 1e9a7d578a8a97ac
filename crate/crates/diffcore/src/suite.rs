//! Finite-difference sweep over every operation in the closed set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::finite_diff_check;
use crate::graph::{Graph, NodeId};
use crate::ops::Op;
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Representative instance of `op`: input tensors plus any reshape target.
fn instance(op: &Op, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Option<Vec<usize>>) {
    let mut dim = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (r, c, k) = (dim(1, 4), dim(1, 4), dim(1, 4));
    match op {
        Op::MatMul { transpose_rhs } => {
            let a = rand_tensor(rng, &[r, k], -1.0, 1.0);
            let b = if *transpose_rhs {
                rand_tensor(rng, &[c, k], -1.0, 1.0)
            } else {
                rand_tensor(rng, &[k, c], -1.0, 1.0)
            };
            (vec![a, b], None)
        }
        Op::Add | Op::Sub | Op::Mul => {
            let a = rand_tensor(rng, &[r, c], -2.0, 2.0);
            let b = match rng.gen_range(0..3) {
                0 => rand_tensor(rng, &[r, c], -2.0, 2.0),
                1 => rand_tensor(rng, &[c], -2.0, 2.0),
                _ => rand_tensor(rng, &[1], -2.0, 2.0),
            };
            (vec![a, b], None)
        }
        Op::Log => (vec![rand_tensor(rng, &[r, c], 0.2, 3.0)], None),
        Op::Relu => {
            // keep inputs away from the kink
            let mut t = rand_tensor(rng, &[r, c], 0.05, 2.0);
            for v in t.data_mut() {
                if rng.gen_bool(0.5) {
                    *v = -*v;
                }
            }
            (vec![t], None)
        }
        Op::Mean(_) | Op::Sum(_) => (vec![rand_tensor(rng, &[r, c, k], -2.0, 2.0)], None),
        Op::ConcatLast => {
            let parts = dim(1, 3);
            (
                (0..parts)
                    .map(|_| {
                        let w = rng.gen_range(1..=3);
                        rand_tensor(rng, &[r, w], -1.0, 1.0)
                    })
                    .collect(),
                None,
            )
        }
        Op::Conv2d => {
            let (h, w) = (dim(2, 5), dim(2, 5));
            let (cin, cout) = (dim(1, 3), dim(1, 3));
            let ks = if rng.gen_bool(0.5) { 3 } else { 1 };
            (
                vec![
                    rand_tensor(rng, &[h, w, cin], -1.0, 1.0),
                    rand_tensor(rng, &[ks, ks, cin, cout], -1.0, 1.0),
                ],
                None,
            )
        }
        Op::MaxPool2d => {
            let (h, w, ch) = (2 * dim(1, 3), 2 * dim(1, 3), dim(1, 3));
            // distinct values spaced well beyond the probe step, so no ties
            let n = h * w * ch;
            let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                vals.swap(i, j);
            }
            (vec![Tensor::new(&[h, w, ch], vals).unwrap()], None)
        }
        Op::LayerNorm { .. } => (vec![rand_tensor(rng, &[r, c + 1], -2.0, 2.0)], None),
        Op::Reshape => {
            let t = rand_tensor(rng, &[r, c], -1.0, 1.0);
            (vec![t], Some(vec![c, r]))
        }
        _ => (vec![rand_tensor(rng, &[r, c], -2.0, 2.0)], None),
    }
}

/// Every operation in the closed set, with a representative parameterization.
pub fn closed_op_set() -> Vec<Op> {
    vec![
        Op::MatMul { transpose_rhs: false },
        Op::MatMul { transpose_rhs: true },
        Op::Add,
        Op::Sub,
        Op::Mul,
        Op::Scale(-1.7),
        Op::RowSoftmax,
        Op::Log,
        Op::Exp,
        Op::Relu,
        Op::Sigmoid,
        Op::Mean(None),
        Op::Mean(Some(1)),
        Op::Sum(None),
        Op::Sum(Some(0)),
        Op::ConcatLast,
        Op::Conv2d,
        Op::MaxPool2d,
        Op::LayerNorm { eps: 1e-5 },
        Op::Reshape,
        Op::Transpose,
    ]
}

/// Runs `instances` random finite-difference checks of `op` at `rel_tol`.
pub fn check_op(op: &Op, instances: usize, rel_tol: f64, seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err: f64 = 0.0;
    let mut passed = true;
    for inst in 0..instances {
        let (inputs, target) = instance(op, &mut rng);
        let mut store = ParamStore::new();
        for (i, t) in inputs.into_iter().enumerate() {
            store.add(format!("in{i}"), t);
        }
        // A fixed random weighting of the output keeps every output coordinate in play.
        let probe_graph = |g: &mut Graph, p: &ParamStore| -> Result<NodeId> {
            let ids: Vec<NodeId> = p.ids().map(|id| g.param(p, id)).collect();
            match &target {
                Some(t) => {
                    let y = g.reshape(ids[0], t)?;
                    Ok(y)
                }
                None => g.apply(op.clone(), &ids),
            }
        };
        let out_shape = {
            let mut g = Graph::no_grad();
            let y = probe_graph(&mut g, &store)?;
            g.shape(y).to_vec()
        };
        let weights = rand_tensor(&mut rng, &out_shape, -1.0, 1.0);
        let build = |g: &mut Graph, p: &ParamStore| -> Result<NodeId> {
            let y = probe_graph(g, p)?;
            let w = g.constant(weights.clone());
            let yw = g.mul(y, w)?;
            g.sum(yw)
        };
        let probes = store.scalar_count().min(12);
        let report = finite_diff_check(&mut store, build, probes, rel_tol, seed ^ (inst as u64 + 1))?;
        max_rel_err = max_rel_err.max(report.max_rel_err());
        passed &= report.passed();
    }
    Ok(OpCheck {
        op: op.name(),
        instances,
        max_rel_err,
        passed,
    })
}

/// The full sweep: every op, `instances` random inputs each.
pub fn op_gradient_suite(instances: usize, rel_tol: f64, seed: u64) -> Result<Vec<OpCheck>> {
    closed_op_set()
        .iter()
        .enumerate()
        .map(|(i, op)| check_op(op, instances, rel_tol, seed.wrapping_add(i as u64 * 7919)))
        .collect()
}
