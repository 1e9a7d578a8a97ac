//! Small building blocks shared by the model modules.

use diffcore::{fan_in_uniform, Graph, NodeId, ParamId, ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floor added inside every logarithm of a probability.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    FanIn,
    Zero,
}

/// Affine map `x W + b` applied to each row.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, init: Init, rng: &mut ChaCha8Rng) -> Self {
        let w = match init {
            Init::FanIn => fan_in_uniform(rng, &[fan_in, fan_out], fan_in),
            Init::Zero => Tensor::zeros(&[fan_in, fan_out]),
        };
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        Ok(g.add(xw, b)?)
    }
}

/// Per-class affine score: row `i` of the input is dotted with weight row `i`.
#[derive(Clone, Debug)]
pub struct ClassScorer {
    pub w: ParamId,
    pub b: ParamId,
}

impl ClassScorer {
    pub fn new(store: &mut ParamStore, name: &str, k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.add(format!("{name}.w"), fan_in_uniform(rng, &[k, dim], dim)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[k])),
        }
    }

    /// `[k, dim]` rows to `[k]` logits.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, rows: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let prod = g.mul(rows, w)?;
        let s = g.sum_axis(prod, 1)?;
        Ok(g.add(s, b)?)
    }
}

pub fn check_binary(labels: &[f64]) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(format!("label {bad} is not binary")));
    }
    Ok(())
}

/// Mean per-class binary cross-entropy of probabilities `[k]` against binary labels.
pub fn bce_mean(g: &mut Graph, probs: NodeId, labels: &[f64]) -> Result<NodeId> {
    check_binary(labels)?;
    if g.value(probs).numel() != labels.len() {
        return Err(Error::contract(format!(
            "{} probabilities for {} labels",
            g.value(probs).numel(),
            labels.len()
        )));
    }
    let shape = g.shape(probs).to_vec();
    let y = g.constant(Tensor::new(&shape, labels.to_vec())?);
    let not_y = g.constant(Tensor::new(&shape, labels.iter().map(|v| 1.0 - v).collect())?);
    let p_floor = g.add_scalar(probs, PROB_FLOOR)?;
    let log_p = g.log(p_floor)?;
    let q = g.rsub_scalar(1.0, probs)?;
    let q_floor = g.add_scalar(q, PROB_FLOOR)?;
    let log_q = g.log(q_floor)?;
    let pos = g.mul(log_p, y)?;
    let neg = g.mul(log_q, not_y)?;
    let ll = g.add(pos, neg)?;
    let m = g.mean(ll)?;
    Ok(g.scale(m, -1.0)?)
}

/// `KL(uniform || p)` for a probability vector `p` over `k` entries.
pub fn kl_uniform(g: &mut Graph, probs: NodeId) -> Result<NodeId> {
    let k = g.value(probs).numel();
    if k < 2 {
        return Err(Error::contract("KL to uniform needs at least two classes"));
    }
    let floored = g.add_scalar(probs, PROB_FLOOR)?;
    if g.value(floored).data().iter().any(|&p| p <= 0.0) {
        return Err(Error::Numeric("confounder probabilities vanished".into()));
    }
    let logs = g.log(floored)?;
    let mean_log = g.mean(logs)?;
    // (1/k) sum ln((1/k)/p_i) = -ln k - mean(ln p_i)
    let neg = g.scale(mean_log, -1.0)?;
    Ok(g.add_scalar(neg, -(k as f64).ln())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_bce(p: &[f64], y: &[f64]) -> f64 {
        let mut g = Graph::new();
        let pn = g.constant(Tensor::new(&[p.len()], p.to_vec()).unwrap());
        let l = bce_mean(&mut g, pn, y).unwrap();
        g.scalar(l)
    }

    fn eval_kl(p: &[f64]) -> f64 {
        let mut g = Graph::new();
        let pn = g.constant(Tensor::new(&[p.len()], p.to_vec()).unwrap());
        let l = kl_uniform(&mut g, pn).unwrap();
        g.scalar(l)
    }

    #[test]
    fn bce_values() {
        assert!((eval_bce(&[0.5, 0.5, 0.5], &[1.0, 0.0, 1.0]) - 2f64.ln()).abs() < 1e-9);
        assert!(eval_bce(&[1.0 - 1e-7, 1e-7], &[1.0, 0.0]) <= 1.1e-6);
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((eval_bce(&[0.9, 0.2], &[1.0, 0.0]) - expected).abs() < 1e-10);
        assert!((expected - 0.1643).abs() < 1e-4);
    }

    #[test]
    fn bce_rejects_soft_labels() {
        let mut g = Graph::new();
        let pn = g.constant(Tensor::new(&[2], vec![0.5, 0.5]).unwrap());
        assert!(matches!(bce_mean(&mut g, pn, &[0.5, 1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn kl_values() {
        assert!(eval_kl(&[0.25; 4]).abs() < 1e-10);
        let e = 0.5 * (0.5f64 / 0.7).ln() + 0.5 * (0.5f64 / 0.3).ln();
        assert!((eval_kl(&[0.7, 0.3]) - e).abs() < 1e-10);
        assert!((e - 0.0872).abs() < 1e-4);
        let e2 = 0.5 * (0.5f64 / 0.99).ln() + 0.5 * (0.5f64 / 0.01).ln();
        assert!((eval_kl(&[0.99, 0.01]) - e2).abs() < 1e-9);
        assert!((e2 - 1.6145).abs() < 1e-4);
    }
}
