//! Causal representation, final classifier, and the composite objective.

use std::fmt;

use diffcore::{Graph, NodeId, ParamStore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{bce_mean, ClassScorer, Init, Linear};

/// Point-wise two-layer perceptron over `[I_row | C_row]`.
#[derive(Clone, Debug)]
pub struct CausalMlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl CausalMlp {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, d_r: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), 2 * d, hidden, Init::FanIn, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, d_r, Init::FanIn, rng),
        }
    }
}

pub fn causal_rep(g: &mut Graph, store: &ParamStore, mlp: &CausalMlp, instrument: NodeId, confounder: NodeId) -> Result<NodeId> {
    if g.shape(instrument) != g.shape(confounder) {
        return Err(Error::contract(format!(
            "instrument {:?} and confounder {:?} differ in shape",
            g.shape(instrument),
            g.shape(confounder)
        )));
    }
    let joined = g.concat_last(&[instrument, confounder])?;
    let h = mlp.hidden.forward(g, store, joined)?;
    let h = g.relu(h)?;
    mlp.out.forward(g, store, h)
}

/// Scores in `(0, 1)` per class from `[R_i | C_i]`.
pub fn predict(
    g: &mut Graph,
    store: &ParamStore,
    head: &ClassScorer,
    rep: NodeId,
    confounder: NodeId,
    stop_grad_confounder: bool,
) -> Result<NodeId> {
    let c = if stop_grad_confounder { g.detach(confounder) } else { confounder };
    let joined = g.concat_last(&[rep, c])?;
    let logits = head.logits(g, store, joined)?;
    Ok(g.sigmoid(logits)?)
}

pub fn task_loss(g: &mut Graph, scores: NodeId, labels: &[f64]) -> Result<NodeId> {
    bce_mean(g, scores, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Instrument,
    Confounder,
    InstrumentConfounder,
    InstrumentRep,
    InstrumentLabel,
    Task,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::Instrument,
        LossTerm::Confounder,
        LossTerm::InstrumentConfounder,
        LossTerm::InstrumentRep,
        LossTerm::InstrumentLabel,
        LossTerm::Task,
    ];

    pub fn column(self) -> &'static str {
        match self {
            LossTerm::Instrument => "L_I",
            LossTerm::Confounder => "L_C",
            LossTerm::InstrumentConfounder => "L_IC",
            LossTerm::InstrumentRep => "L_IR",
            LossTerm::InstrumentLabel => "L_IY",
            LossTerm::Task => "L_Y",
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

/// Weights in the order of [`LossTerm::ALL`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l_i: f64,
    pub l_c: f64,
    pub l_ic: f64,
    pub l_ir: f64,
    pub l_iy: f64,
    pub l_y: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::from_array([1.0; 6])
    }
}

impl LossWeights {
    pub fn from_array(w: [f64; 6]) -> Self {
        Self {
            l_i: w[0],
            l_c: w[1],
            l_ic: w[2],
            l_ir: w[3],
            l_iy: w[4],
            l_y: w[5],
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.l_i, self.l_c, self.l_ic, self.l_ir, self.l_iy, self.l_y]
    }
}

/// Weighted sum, accumulated left to right in term order.
pub fn total_loss(terms: [f64; 6], weights: &LossWeights) -> Result<f64> {
    let mut acc = 0.0;
    for ((t, w), term) in terms.iter().zip(weights.as_array()).zip(LossTerm::ALL) {
        if !t.is_finite() {
            return Err(Error::Numeric(format!("{term} is {t}")));
        }
        acc += w * t;
    }
    Ok(acc)
}

/// Graph form of [`total_loss`]; absent terms count as zero. The summation
/// order matches the numeric form so logged totals agree bit for bit.
pub fn total_loss_graph(g: &mut Graph, terms: [Option<NodeId>; 6], weights: &LossWeights) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for ((t, w), term) in terms.iter().zip(weights.as_array()).zip(LossTerm::ALL) {
        let Some(t) = *t else { continue };
        let v = g.scalar(t);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{term} is {v}")));
        }
        let scaled = g.scale(t, w)?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.add(a, scaled)?,
        });
    }
    acc.ok_or_else(|| Error::contract("objective has no terms"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcore::Tensor;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).tensor.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
    }

    fn rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        (0..w.cols())
            .map(|j| b.data()[j] + x.iter().enumerate().map(|(i, v)| v * w.get2(i, j)).sum::<f64>())
            .collect()
    }

    #[test]
    fn identity_mlp_concatenates() {
        let mut store = ParamStore::new();
        let mlp = CausalMlp::new(&mut store, "r", 2, 4, 4, &mut rng());
        for l in [&mlp.hidden, &mlp.out] {
            store.get_mut(l.w).tensor.data_mut().copy_from_slice(&Tensor::identity(4).into_data());
        }
        let mut g = Graph::no_grad();
        let i = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![0.5, 0.0]]).unwrap());
        let c = g.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 7.0]]).unwrap());
        let r = causal_rep(&mut g, &store, &mlp, i, c).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 2.0, 3.0, 4.0, 0.5, 0.0, 0.0, 7.0]);
    }

    #[test]
    fn zero_inputs_give_zero_rep() {
        let mut store = ParamStore::new();
        let mlp = CausalMlp::new(&mut store, "r", 3, 5, 3, &mut rng());
        let mut g = Graph::no_grad();
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let r = causal_rep(&mut g, &store, &mlp, z, z).unwrap();
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        let mlp = CausalMlp::new(&mut store, "r", 3, 5, 3, &mut rng());
        let mut g = Graph::no_grad();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(causal_rep(&mut g, &store, &mlp, a, b), Err(Error::Contract(_))));
    }

    #[test]
    fn rep_and_predict_match_oracle() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let mlp = CausalMlp::new(&mut store, "r", 3, 5, 4, &mut r);
        let head = ClassScorer::new(&mut store, "cls", 2, 7, &mut r);
        randomize(&mut store, &mut r);
        let (it, ct) = (rows(&mut r, 2, 3), rows(&mut r, 2, 3));
        let mut g = Graph::no_grad();
        let (i, c) = (g.constant(it.clone()), g.constant(ct.clone()));
        let rep = causal_rep(&mut g, &store, &mlp, i, c).unwrap();
        let scores = predict(&mut g, &store, &head, rep, c, false).unwrap();
        for k in 0..2 {
            let x = [it.row(k), ct.row(k)].concat();
            let h: Vec<f64> = affine(&x, store.value(mlp.hidden.w), store.value(mlp.hidden.b))
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let rk = affine(&h, store.value(mlp.out.w), store.value(mlp.out.b));
            for (a, b) in g.value(rep).row(k).iter().zip(&rk) {
                assert!((a - b).abs() < 1e-8);
            }
            let z = [rk.as_slice(), ct.row(k)].concat();
            let w = store.value(head.w).row(k);
            let logit = store.value(head.b).data()[k] + z.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            let s = 1.0 / (1.0 + (-logit).exp());
            assert!((g.value(scores).data()[k] - s).abs() < 1e-8);
        }
    }

    #[test]
    fn predict_saturation_and_midpoint() {
        let mut store = ParamStore::new();
        let head = ClassScorer::new(&mut store, "cls", 2, 4, &mut rng());
        store.get_mut(head.w).tensor.data_mut().fill(0.0);
        let mut g = Graph::no_grad();
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let s = predict(&mut g, &store, &head, z, z, false).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        store.get_mut(head.b).tensor.data_mut()[0] = 10.0;
        let mut g = Graph::no_grad();
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let s = predict(&mut g, &store, &head, z, z, false).unwrap();
        assert!(g.value(s).data()[0] >= 0.9999);
    }

    #[test]
    fn stop_grad_blocks_confounder_path() {
        let mut store = ParamStore::new();
        let head = ClassScorer::new(&mut store, "cls", 2, 4, &mut rng());
        let mut g = Graph::new();
        let c_id = store.add("c", Tensor::full(&[2, 2], 0.3));
        let r = g.constant(Tensor::zeros(&[2, 2]));
        let c = g.param(&store, c_id);
        let s = predict(&mut g, &store, &head, r, c, true).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l, &mut store).unwrap();
        assert!(store.value(c_id).grad().is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn task_loss_values() {
        let mut g = Graph::no_grad();
        let p = g.constant(Tensor::new(&[2], vec![0.9, 0.2]).unwrap());
        let l = task_loss(&mut g, p, &[1.0, 0.0]).unwrap();
        assert!((g.scalar(l) - 0.1643).abs() < 1e-4);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss([0.0; 6], &w).unwrap(), 0.0);
        let only_i = LossWeights::from_array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(total_loss([0.7, 0.1, 0.2, 0.3, 0.4, 0.5], &only_i).unwrap(), 0.7);
        let t = total_loss([0.2, 0.1, 0.05, -0.3, 0.02, 0.4], &w).unwrap();
        assert!((t - 0.47).abs() < 1e-12);
        let err = total_loss([0.0, 0.0, f64::NAN, 0.0, 0.0, 0.0], &w).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("L_IC")));
    }

    #[test]
    fn graph_total_matches_numeric_exactly() {
        let mut r = rng();
        for _ in 0..50 {
            let terms: [f64; 6] = std::array::from_fn(|_| r.gen_range(-2.0..2.0));
            let w = LossWeights::from_array(std::array::from_fn(|_| r.gen_range(0.0..2.0)));
            let mut g = Graph::no_grad();
            let nodes = terms.map(|t| Some(g.constant(Tensor::scalar(t))));
            let node = total_loss_graph(&mut g, nodes, &w).unwrap();
            assert_eq!(g.scalar(node), total_loss(terms, &w).unwrap());
        }
    }

    #[test]
    fn total_loss_is_linear_per_term() {
        let mut r = rng();
        let w = LossWeights::default();
        for _ in 0..20 {
            let base: [f64; 6] = std::array::from_fn(|_| r.gen_range(-1.0..1.0));
            let i = r.gen_range(0..6);
            let f = |x: f64| {
                let mut t = base;
                t[i] = x;
                total_loss(t, &w).unwrap()
            };
            let (a, b, c) = (f(0.0), f(1.0), f(2.5));
            assert!((c - a - 2.5 * (b - a)).abs() < 1e-12);
        }
    }
}
