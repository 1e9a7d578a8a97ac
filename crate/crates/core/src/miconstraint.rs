//! Conditional density estimators and the pairwise mutual-information losses.
//!
//! Each estimator models `target | cond` as a diagonal Gaussian whose mean and
//! log-variance come from a small perceptron. Estimators own their parameters
//! and are fitted in a separate phase; inside the main objective their weights
//! enter the graph as constants, so gradients reach only the representations.

use std::f64::consts::PI;

use diffcore::{adam_step, fan_in_uniform, AdamConfig, Graph, NodeId, ParamId, ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HIDDEN: usize = 64;
pub const LOGVAR_BOUND: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Confounder given instrument; minimised.
    IC,
    /// Causal representation given instrument; maximised.
    IR,
    /// Scores given instrument; minimised.
    IY,
}

impl Role {
    pub fn sign(self) -> f64 {
        match self {
            Role::IR => -1.0,
            Role::IC | Role::IY => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::IC => "ic",
            Role::IR => "ir",
            Role::IY => "iy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondDensityEstimator {
    pub role: Role,
    pub cond_dim: usize,
    pub target_dim: usize,
    pub store: ParamStore,
    /// `w1 b1 w2 b2 w_mu b_mu w_raw b_raw`
    ids: [ParamId; 8],
}

/// Mean and log-variance nodes, each `[n, target_dim]`.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian {
    pub mean: NodeId,
    pub logvar: NodeId,
}

impl CondDensityEstimator {
    pub fn new(role: Role, cond_dim: usize, target_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let mut layer = |store: &mut ParamStore, name: &str, i: usize, o: usize| {
            (
                store.add(format!("{name}.w"), fan_in_uniform(rng, &[i, o], i)),
                store.add(format!("{name}.b"), Tensor::zeros(&[o])),
            )
        };
        let (w1, b1) = layer(&mut store, "h1", cond_dim, HIDDEN);
        let (w2, b2) = layer(&mut store, "h2", HIDDEN, HIDDEN);
        let (wm, bm) = layer(&mut store, "mu", HIDDEN, target_dim);
        let (wr, br) = layer(&mut store, "logvar", HIDDEN, target_dim);
        Self {
            role,
            cond_dim,
            target_dim,
            store,
            ids: [w1, b1, w2, b2, wm, bm, wr, br],
        }
    }

    pub fn param_ids(&self) -> [ParamId; 8] {
        self.ids
    }

    /// Builds the network on `cond` (`[n, cond_dim]`). With `trainable` false the
    /// weights are copied in as constants.
    pub fn forward(&self, g: &mut Graph, cond: NodeId, trainable: bool) -> Result<Gaussian> {
        let shape = g.shape(cond).to_vec();
        if shape.len() != 2 || shape[1] != self.cond_dim {
            return Err(Error::contract(format!(
                "estimator expects [n, {}] conditioning, got {shape:?}",
                self.cond_dim
            )));
        }
        let w: Vec<NodeId> = self
            .ids
            .iter()
            .map(|&id| {
                if trainable {
                    g.param(&self.store, id)
                } else {
                    g.constant(self.store.value(id).clone())
                }
            })
            .collect();
        let h = g.matmul(cond, w[0])?;
        let h = g.add(h, w[1])?;
        let h = g.relu(h)?;
        let h = g.matmul(h, w[2])?;
        let h = g.add(h, w[3])?;
        let h = g.relu(h)?;
        let m = g.matmul(h, w[4])?;
        let mean = g.add(m, w[5])?;
        let r = g.matmul(h, w[6])?;
        let r = g.add(r, w[7])?;
        // soft clamp into (-B, B)
        let r = g.scale(r, 1.0 / 3.0)?;
        let s = g.sigmoid(r)?;
        let s = g.scale(s, 2.0 * LOGVAR_BOUND)?;
        let logvar = g.add_scalar(s, -LOGVAR_BOUND)?;
        Ok(Gaussian { mean, logvar })
    }

    /// Mean and log-variance for one conditioning vector.
    pub fn params_at(&self, cond: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::no_grad();
        let c = g.constant(Tensor::new(&[1, cond.len()], cond.to_vec())?);
        let out = self.forward(&mut g, c, false)?;
        Ok((g.value(out.mean).data().to_vec(), g.value(out.logvar).data().to_vec()))
    }

    /// `ln N(target; mu(cond), diag exp(logvar(cond)))`.
    pub fn log_density(&self, cond: &[f64], target: &[f64]) -> Result<f64> {
        if target.len() != self.target_dim {
            return Err(Error::contract(format!(
                "target has {} entries, estimator models {}",
                target.len(),
                self.target_dim
            )));
        }
        let (mu, lv) = self.params_at(cond)?;
        cond_log_density(&mu, &lv, target)
    }

    /// Mean negative log-likelihood of a batch under the current weights.
    pub fn nll(&self, conds: &Tensor, targets: &Tensor) -> Result<f64> {
        let mut g = Graph::no_grad();
        let node = self.nll_node(&mut g, conds, targets, false)?;
        Ok(g.scalar(node))
    }

    fn nll_node(&self, g: &mut Graph, conds: &Tensor, targets: &Tensor, trainable: bool) -> Result<NodeId> {
        check_pairs(conds, targets)?;
        let c = g.constant(conds.clone());
        let t = g.constant(targets.clone());
        let out = self.forward(g, c, trainable)?;
        // 0.5 * mean_i sum_d [lv + (t - mu)^2 exp(-lv)] + const
        let diff = g.sub(t, out.mean)?;
        let sq = g.mul(diff, diff)?;
        let neg_lv = g.scale(out.logvar, -1.0)?;
        let prec = g.exp(neg_lv)?;
        let quad = g.mul(sq, prec)?;
        let per = g.add(quad, out.logvar)?;
        let rows = g.sum_axis(per, 1)?;
        let m = g.mean(rows)?;
        let half = g.scale(m, 0.5)?;
        Ok(g.add_scalar(half, 0.5 * self.target_dim as f64 * (2.0 * PI).ln())?)
    }
}

fn check_pairs(conds: &Tensor, targets: &Tensor) -> Result<()> {
    if conds.shape().len() != 2 || targets.shape().len() != 2 || conds.rows() != targets.rows() {
        return Err(Error::contract(format!(
            "conditioning {:?} and targets {:?} are not paired",
            conds.shape(),
            targets.shape()
        )));
    }
    Ok(())
}

/// Diagonal Gaussian log-density from explicit mean and log-variance.
pub fn cond_log_density(mean: &[f64], logvar: &[f64], target: &[f64]) -> Result<f64> {
    if mean.len() != target.len() || logvar.len() != target.len() {
        return Err(Error::contract("density dimensions differ"));
    }
    let mut s = -0.5 * target.len() as f64 * (2.0 * PI).ln();
    for ((t, m), lv) in target.iter().zip(mean).zip(logvar) {
        s -= 0.5 * lv + 0.5 * (t - m) * (t - m) * (-lv).exp();
    }
    if !s.is_finite() {
        return Err(Error::Numeric("conditional log-density".into()));
    }
    Ok(s)
}

/// `sign / n^2 * sum_i sum_j [L(i, i) - L(i, j)]` for a table `L(i, j) = log f(target_j | cond_i)`.
pub fn pairwise_from_table(table: &[Vec<f64>], sign: f64) -> Result<f64> {
    let n = table.len();
    if n == 0 {
        return Err(Error::contract("pairwise loss over an empty batch"));
    }
    let mut s = 0.0;
    for (i, row) in table.iter().enumerate() {
        for v in row {
            s += row[i] - v;
        }
    }
    Ok(sign * s / (n * n) as f64)
}

/// Scalar-loop evaluation of the pairwise loss with the estimator as a black box.
pub fn mi_pairwise_value(est: &CondDensityEstimator, conds: &[Vec<f64>], targets: &[Vec<f64>], sign: f64) -> Result<f64> {
    if conds.len() != targets.len() {
        return Err(Error::contract("conditioning and targets differ in count"));
    }
    let mut table = Vec::with_capacity(conds.len());
    for c in conds {
        let (mu, lv) = est.params_at(c)?;
        table.push(targets.iter().map(|t| cond_log_density(&mu, &lv, t)).collect::<Result<Vec<_>>>()?);
    }
    pairwise_from_table(&table, sign)
}

/// Graph form over batch matrices `conds [n, c]` and `targets [n, t]`. Estimator
/// weights are constants; the Gaussian normaliser cancels inside the double sum,
/// which lets the pairwise term be written with column sums only.
pub fn mi_pairwise_loss(g: &mut Graph, est: &CondDensityEstimator, conds: NodeId, targets: NodeId, sign: f64) -> Result<NodeId> {
    let n = g.shape(conds)[0];
    if n == 0 || g.shape(targets)[0] != n {
        return Err(Error::contract("pairwise loss needs paired, non-empty batches"));
    }
    if g.shape(targets)[1] != est.target_dim {
        return Err(Error::contract(format!(
            "targets have width {}, estimator models {}",
            g.shape(targets)[1],
            est.target_dim
        )));
    }
    let out = est.forward(g, conds, false)?;
    let neg_lv = g.scale(out.logvar, -1.0)?;
    let prec = g.exp(neg_lv)?;
    let nf = n as f64;

    // n * sum_i sum_d (t_i - m_i)^2 p_i
    let diff = g.sub(targets, out.mean)?;
    let sq = g.mul(diff, diff)?;
    let own = g.mul(sq, prec)?;
    let own = g.sum(own)?;
    let own = g.scale(own, nf)?;

    // sum_i sum_j sum_d (t_j - m_i)^2 p_i
    let t2 = g.mul(targets, targets)?;
    let t2_col = g.sum_axis(t2, 0)?;
    let p_col = g.sum_axis(prec, 0)?;
    let a = g.mul(t2_col, p_col)?;
    let a = g.sum(a)?;
    let t_col = g.sum_axis(targets, 0)?;
    let mp = g.mul(out.mean, prec)?;
    let mp_col = g.sum_axis(mp, 0)?;
    let b = g.mul(t_col, mp_col)?;
    let b = g.sum(b)?;
    let b = g.scale(b, -2.0)?;
    let m2 = g.mul(out.mean, out.mean)?;
    let m2p = g.mul(m2, prec)?;
    let c = g.sum(m2p)?;
    let c = g.scale(c, nf)?;
    let cross = g.add(a, b)?;
    let cross = g.add(cross, c)?;

    let delta = g.sub(own, cross)?;
    Ok(g.scale(delta, -0.5 * sign / (nf * nf))?)
}

/// Per-column z-scores over the batch axis of `x` (`[n, t]`). Gradients flow
/// through the batch statistics, so the result is invariant to rescaling `x`.
pub fn standardize(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let mean = g.mean_axis(x, 0)?;
    let centered = g.sub(x, mean)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean_axis(sq, 0)?;
    let var = g.add_scalar(var, STANDARDIZE_EPS)?;
    let log_var = g.log(var)?;
    let half = g.scale(log_var, -0.5)?;
    let inv_std = g.exp(half)?;
    Ok(g.mul(centered, inv_std)?)
}

pub const STANDARDIZE_EPS: f64 = 1e-6;

/// Outcome of one guarded fitting step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOutcome {
    pub nll_before: f64,
    pub nll_after: f64,
    /// Halvings of the learning rate that were needed.
    pub retries: u32,
    /// True when the NLL still rose after the last retry.
    pub accepted_increase: bool,
}

pub const FIT_RETRIES: u32 = 3;

/// One Adam step on the batch NLL. If the NLL rises, the step is undone and
/// retried at half the learning rate, up to [`FIT_RETRIES`] times.
pub fn estimator_fit_step(est: &mut CondDensityEstimator, conds: &Tensor, targets: &Tensor, adam: &AdamConfig) -> Result<FitOutcome> {
    let nll_before = est.nll(conds, targets)?;
    let snapshot = est.store.clone();
    let mut lr = adam.lr;
    let mut retries = 0;
    loop {
        let mut g = Graph::new();
        let loss = est.nll_node(&mut g, conds, targets, true)?;
        est.store.zero_grad();
        g.backward(loss, &mut est.store)?;
        adam_step(&mut est.store, &AdamConfig { lr, ..*adam })?;
        let nll_after = est.nll(conds, targets)?;
        if nll_after <= nll_before || retries == FIT_RETRIES {
            return Ok(FitOutcome {
                nll_before,
                nll_after,
                retries,
                accepted_increase: nll_after > nll_before,
            });
        }
        est.store = snapshot.clone();
        lr *= 0.5;
        retries += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn density_examples() {
        let half_ln_2pi = 0.5 * (2.0 * PI).ln();
        assert!((cond_log_density(&[0.0], &[0.0], &[0.0]).unwrap() + half_ln_2pi).abs() < 1e-12);
        assert!((cond_log_density(&[0.3, -1.0], &[0.0, 0.0], &[0.3, -1.0]).unwrap() + 2.0 * half_ln_2pi).abs() < 1e-12);
        let v = cond_log_density(&[1.0], &[4f64.ln()], &[0.0]).unwrap();
        assert!((v - (-half_ln_2pi - 2f64.ln() - 0.125)).abs() < 1e-12);
        assert!((v + 1.7371).abs() < 1e-4);
    }

    #[test]
    fn logvar_stays_in_bounds() {
        let mut r = rng(1);
        let mut est = CondDensityEstimator::new(Role::IC, 2, 3, &mut r);
        for id in est.store.ids().collect::<Vec<_>>() {
            for v in est.store.get_mut(id).tensor.data_mut() {
                *v = r.gen_range(-50.0..50.0);
            }
        }
        let (mu, lv) = est.params_at(&[10.0, -10.0]).unwrap();
        assert_eq!(mu.len(), 3);
        assert!(lv.iter().all(|v| v.abs() <= LOGVAR_BOUND));
    }

    #[test]
    fn table_oracle() {
        let t = vec![vec![-1.0, -3.0], vec![-2.5, -0.5]];
        let direct = ((-1.0 - -1.0) + (-1.0 - -3.0) + (-0.5 - -2.5) + (-0.5 - -0.5)) / 4.0;
        assert_eq!(pairwise_from_table(&t, 1.0).unwrap(), direct);
        assert_eq!(pairwise_from_table(&t, -1.0).unwrap(), -direct);
        assert_eq!(pairwise_from_table(&[vec![-4.2]], 1.0).unwrap(), 0.0);
        assert!(matches!(pairwise_from_table(&[], 1.0), Err(Error::Contract(_))));
    }

    fn random_batch(r: &mut ChaCha8Rng, n: usize, c: usize, t: usize) -> (Tensor, Tensor) {
        let conds = Tensor::new(&[n, c], (0..n * c).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let targets = Tensor::new(&[n, t], (0..n * t).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        (conds, targets)
    }

    fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
    }

    #[test]
    fn graph_form_matches_double_loop() {
        let mut r = rng(2);
        let est = CondDensityEstimator::new(Role::IR, 3, 2, &mut r);
        let (conds, targets) = random_batch(&mut r, 7, 3, 2);
        let mut g = Graph::no_grad();
        let (c, t) = (g.constant(conds.clone()), g.constant(targets.clone()));
        let node = mi_pairwise_loss(&mut g, &est, c, t, -1.0).unwrap();
        let direct = mi_pairwise_value(&est, &rows_of(&conds), &rows_of(&targets), -1.0).unwrap();
        assert!((g.scalar(node) - direct).abs() < 1e-9, "{} vs {direct}", g.scalar(node));
    }

    #[test]
    fn conditioning_free_estimator_gives_zero() {
        let mut r = rng(3);
        let mut est = CondDensityEstimator::new(Role::IC, 3, 2, &mut r);
        let w1 = est.param_ids()[0];
        est.store.get_mut(w1).tensor.data_mut().fill(0.0);
        let (conds, targets) = random_batch(&mut r, 9, 3, 2);
        let mut g = Graph::no_grad();
        let (c, t) = (g.constant(conds), g.constant(targets));
        let node = mi_pairwise_loss(&mut g, &est, c, t, 1.0).unwrap();
        assert!(g.scalar(node).abs() < 1e-9);
    }

    #[test]
    fn single_sample_is_zero() {
        let mut r = rng(4);
        let est = CondDensityEstimator::new(Role::IY, 2, 2, &mut r);
        let (conds, targets) = random_batch(&mut r, 1, 2, 2);
        let mut g = Graph::no_grad();
        let (c, t) = (g.constant(conds), g.constant(targets));
        let node = mi_pairwise_loss(&mut g, &est, c, t, 1.0).unwrap();
        assert!(g.scalar(node).abs() < 1e-12);
    }

    #[test]
    fn estimator_weights_receive_no_gradient_from_loss() {
        let mut r = rng(5);
        let mut est = CondDensityEstimator::new(Role::IC, 2, 2, &mut r);
        let mut host = ParamStore::new();
        let (conds, targets) = random_batch(&mut r, 4, 2, 2);
        let cid = host.add("cond", conds);
        let mut g = Graph::new();
        let c = g.param(&host, cid);
        let t = g.constant(targets);
        let l = mi_pairwise_loss(&mut g, &est, c, t, 1.0).unwrap();
        g.backward(l, &mut host).unwrap();
        assert!(host.value(cid).grad().unwrap().iter().any(|&v| v != 0.0));
        est.store.clear_grad();
        assert!(est.store.iter().all(|p| p.tensor.grad().is_none()));
    }

    #[test]
    fn standardized_columns() {
        let mut g = Graph::no_grad();
        let x = g.constant(mat_rows(&[vec![1.0, 10.0], vec![3.0, 30.0], vec![5.0, 20.0]]));
        let z = standardize(&mut g, x).unwrap();
        let v = g.value(z).clone();
        for c in 0..2 {
            let col: Vec<f64> = (0..3).map(|r| v.get2(r, c)).collect();
            let m = col.iter().sum::<f64>() / 3.0;
            let var = col.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 3.0;
            assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-5);
        }
        let scaled = g.scale(x, 1000.0).unwrap();
        let z2 = standardize(&mut g, scaled).unwrap();
        assert!(g.value(z2).max_abs_diff(&v) < 1e-5);
    }

    fn mat_rows(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn fit_step_decreases_nll() {
        let mut r = rng(6);
        let mut est = CondDensityEstimator::new(Role::IC, 3, 2, &mut r);
        let (conds, targets) = random_batch(&mut r, 16, 3, 2);
        let out = estimator_fit_step(&mut est, &conds, &targets, &AdamConfig { weight_decay: 0.0, ..AdamConfig::default() }).unwrap();
        assert!(out.nll_after <= out.nll_before);
        assert!((est.nll(&conds, &targets).unwrap() - out.nll_after).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let mut r = rng(7);
        let mut est = CondDensityEstimator::new(Role::IC, 3, 2, &mut r);
        let before: Vec<Vec<f64>> = est.store.iter().map(|p| p.tensor.data().to_vec()).collect();
        let (conds, targets) = random_batch(&mut r, 8, 3, 2);
        let cfg = AdamConfig { lr: 0.0, weight_decay: 0.0, ..AdamConfig::default() };
        let out = estimator_fit_step(&mut est, &conds, &targets, &cfg).unwrap();
        let after: Vec<Vec<f64>> = est.store.iter().map(|p| p.tensor.data().to_vec()).collect();
        assert_eq!(before, after);
        assert_eq!(out.retries, 0);
    }

    #[test]
    fn constant_target_is_learned() {
        let mut r = rng(8);
        let mut est = CondDensityEstimator::new(Role::IC, 2, 1, &mut r);
        let (conds, _) = random_batch(&mut r, 32, 2, 1);
        let targets = Tensor::full(&[32, 1], 0.7);
        let cfg = AdamConfig { lr: 1e-2, weight_decay: 0.0, ..AdamConfig::default() };
        for _ in 0..200 {
            estimator_fit_step(&mut est, &conds, &targets, &cfg).unwrap();
        }
        for i in 0..4 {
            let (mu, _) = est.params_at(conds.row(i)).unwrap();
            assert!((mu[0] - 0.7).abs() < 0.05, "mu {}", mu[0]);
        }
    }
}
