//! Training loop: alternating estimator fits and main-model Adam steps.

use std::fs;
use std::path::Path;

use diffcore::{adam_step, AdamConfig, Graph, NodeId, ParamStore};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::causalhead::{total_loss_graph, LossWeights};
use crate::config::TrainConfig;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::metrics::{EvalRow, MetricsLog};
use crate::miconstraint::{estimator_fit_step, mi_pairwise_loss, standardize, CondDensityEstimator, FitOutcome, Role};
use crate::model::Model;
use crate::rng::Streams;

pub const ROLES: [Role; 3] = [Role::IC, Role::IR, Role::IY];

/// Batch-level nodes shared by the objective and the estimator fits.
#[derive(Clone, Copy, Debug)]
pub struct BatchNodes {
    pub iv_loss: Option<NodeId>,
    pub confounder_loss: Option<NodeId>,
    pub task_loss: NodeId,
    /// Per-sample row means, `[n, d]`.
    pub instrument: NodeId,
    pub confounder: NodeId,
    /// `[n, d_R]`.
    pub rep: NodeId,
    /// `[n, k]`.
    pub scores: NodeId,
    /// Batch-standardized copies of the four matrices above, in the same order.
    pub standardized: [NodeId; 4],
}

impl BatchNodes {
    /// Standardized conditioning and target nodes for an estimator role.
    pub fn pair(&self, role: Role) -> (NodeId, NodeId) {
        let [i, c, r, y] = self.standardized;
        match role {
            Role::IC => (i, c),
            Role::IR => (i, r),
            Role::IY => (i, y),
        }
    }
}

fn batch_mean(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(g.scale(acc, 1.0 / nodes.len() as f64)?)
}

pub fn forward_batch(g: &mut Graph, model: &Model, store: &ParamStore, samples: &[&Sample]) -> Result<BatchNodes> {
    if samples.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let (mut li, mut lc, mut ly) = (Vec::new(), Vec::new(), Vec::new());
    let (mut inst, mut conf, mut rep, mut scores) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        let out = model.forward_with(g, store, s, true, false)?;
        li.extend(out.iv_loss);
        lc.extend(out.confounder_loss);
        ly.push(crate::causalhead::task_loss(g, out.scores, &s.labels)?);
        inst.push(g.mean_axis(out.instrument, 0)?);
        conf.push(g.mean_axis(out.confounder, 0)?);
        rep.push(g.mean_axis(out.rep, 0)?);
        scores.push(out.scores);
    }
    let mats = [
        g.stack_rows(&inst)?,
        g.stack_rows(&conf)?,
        g.stack_rows(&rep)?,
        g.stack_rows(&scores)?,
    ];
    let mut standardized = mats;
    for z in standardized.iter_mut() {
        *z = standardize(g, *z)?;
    }
    Ok(BatchNodes {
        iv_loss: if li.is_empty() { None } else { Some(batch_mean(g, &li)?) },
        confounder_loss: if lc.is_empty() { None } else { Some(batch_mean(g, &lc)?) },
        task_loss: batch_mean(g, &ly)?,
        instrument: mats[0],
        confounder: mats[1],
        rep: mats[2],
        scores: mats[3],
        standardized,
    })
}

/// Adds the constraint terms and the weighted total. Returns the total node and
/// the six term values (absent terms are 0).
pub fn objective(
    g: &mut Graph,
    batch: &BatchNodes,
    estimators: Option<&[CondDensityEstimator]>,
    weights: &LossWeights,
) -> Result<(NodeId, [f64; 6])> {
    let mut terms: [Option<NodeId>; 6] = [batch.iv_loss, batch.confounder_loss, None, None, None, Some(batch.task_loss)];
    if let Some(ests) = estimators {
        for (slot, est) in terms[2..5].iter_mut().zip(ests) {
            let (c, t) = batch.pair(est.role);
            *slot = Some(mi_pairwise_loss(g, est, c, t, est.role.sign())?);
        }
    }
    let mut values = [0.0; 6];
    for (v, t) in values.iter_mut().zip(&terms) {
        if let Some(t) = t {
            *v = g.scalar(*t);
        }
    }
    Ok((total_loss_graph(g, terms, weights)?, values))
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub estimators: Vec<CondDensityEstimator>,
    pub step: u64,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, k: usize) -> Result<Self> {
        cfg.validate()?;
        let streams = Streams::new(cfg.seed);
        let model = Model::new(&cfg.model, cfg.toggles, k, &mut streams.stream("init", 0))?;
        let estimators = if cfg.toggles.valid_iv_constraints {
            let d = cfg.model.d;
            let targets = [d, cfg.model.d_r, k];
            ROLES
                .iter()
                .zip(targets)
                .enumerate()
                .map(|(i, (&role, t))| CondDensityEstimator::new(role, d, t, &mut streams.stream("estimator", i as u64)))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            model,
            estimators,
            step: 0,
        })
    }

    fn estimators(&self) -> Option<&[CondDensityEstimator]> {
        (!self.estimators.is_empty()).then_some(self.estimators.as_slice())
    }
}

pub fn estimator_adam(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.estimator.lr,
        weight_decay: 0.0,
        ..cfg.optimizer.adam()
    }
}

/// Fits every estimator on detached batch values.
pub fn fit_estimators(
    estimators: &mut [CondDensityEstimator],
    g: &Graph,
    batch: &BatchNodes,
    steps: usize,
    adam: &AdamConfig,
) -> Result<Vec<FitOutcome>> {
    let mut outcomes = Vec::new();
    for est in estimators.iter_mut() {
        let (c, t) = batch.pair(est.role);
        let (conds, targets) = (g.value(c).clone(), g.value(t).clone());
        for _ in 0..steps {
            outcomes.push(estimator_fit_step(est, &conds, &targets, adam)?);
        }
    }
    Ok(outcomes)
}

/// One full step on `samples`. Returns the six term values.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, samples: &[&Sample]) -> Result<[f64; 6]> {
    let mut g = Graph::new();
    let batch = forward_batch(&mut g, &state.model, &state.model.store, samples)?;
    if let Some(ests) = (!state.estimators.is_empty()).then_some(&mut state.estimators) {
        fit_estimators(ests, &g, &batch, cfg.estimator.steps, &estimator_adam(cfg))?;
    }
    let (total, terms) = objective(&mut g, &batch, state.estimators(), &cfg.loss)?;
    state.model.store.zero_grad();
    g.backward(total, &mut state.model.store)?;
    adam_step(&mut state.model.store, &cfg.optimizer.adam())?;
    state.step += 1;
    Ok(terms)
}

/// Sample indices of the batch used at `step` (0-based). Each pass over the
/// data follows its own seeded permutation.
pub fn batch_indices(streams: &Streams, n: usize, batch: usize, step: u64) -> Vec<usize> {
    let start = step * batch as u64;
    let mut out = Vec::with_capacity(batch);
    let mut epoch = u64::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for pos in start..start + batch as u64 {
        let e = pos / n as u64;
        if e != epoch {
            epoch = e;
            perm = (0..n).collect();
            perm.shuffle(&mut streams.stream("epoch", e));
        }
        out.push(perm[(pos % n as u64) as usize]);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub root: u64,
    /// Samples consumed from the epoch permutation streams.
    pub consumed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_digest: String,
    pub config: TrainConfig,
    pub classes: Vec<String>,
    pub step: u64,
    pub rng: RngState,
    pub model: ParamStore,
    pub estimators: Vec<CondDensityEstimator>,
}

impl Checkpoint {
    pub fn capture(cfg: &TrainConfig, classes: &[String], state: &TrainState) -> Result<Self> {
        let mut model = state.model.store.clone();
        model.clear_grad();
        let mut estimators = state.estimators.clone();
        for e in &mut estimators {
            e.store.clear_grad();
        }
        Ok(Self {
            config_digest: cfg.digest()?,
            config: cfg.clone(),
            classes: classes.to_vec(),
            step: state.step,
            rng: RngState {
                root: cfg.seed,
                consumed: state.step * cfg.train.batch_size as u64,
            },
            model,
            estimators,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(self).map_err(|e| Error::contract(format!("checkpoint encoding: {e}")))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_slice(bytes).map_err(|e| Error::Decode {
            path: path.into(),
            offset: e.column(),
            msg: e.to_string(),
        })?;
        if ck.config.digest()? != ck.config_digest {
            return Err(Error::Config(format!("{}: config digest mismatch", path.display())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Rebuilds the training state. `expect` is the config the caller intends
    /// to continue with; its digest must match.
    pub fn restore(&self, expect: Option<&TrainConfig>) -> Result<TrainState> {
        if let Some(cfg) = expect {
            if cfg.digest()? != self.config_digest {
                return Err(Error::Config("checkpoint was written under a different config".into()));
            }
        }
        let mut state = TrainState::init(&self.config, self.classes.len())?;
        state.model.load_store(self.model.clone())?;
        if state.estimators.len() != self.estimators.len() {
            return Err(Error::contract("checkpoint estimator count does not match the config"));
        }
        state.estimators = self.estimators.clone();
        state.step = self.step;
        Ok(state)
    }

    pub fn model(&self) -> Result<Model> {
        Ok(self.restore(None)?.model)
    }
}

/// Trains from scratch, or from `resume`, until `cfg.train.max_steps`.
pub fn train(cfg: &TrainConfig, data: &Dataset, eval: Option<&Dataset>, resume: Option<&Checkpoint>) -> Result<(TrainState, MetricsLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    let mut state = match resume {
        Some(ck) => {
            if ck.classes != data.classes {
                return Err(Error::contract("checkpoint classes differ from the data"));
            }
            ck.restore(Some(cfg))?
        }
        None => TrainState::init(cfg, data.k())?,
    };
    let streams = Streams::new(cfg.seed);
    let mut log = MetricsLog::new(cfg.loss, data.classes.clone());
    while state.step < cfg.train.max_steps {
        let idx = batch_indices(&streams, data.len(), cfg.train.batch_size, state.step);
        let samples: Vec<&Sample> = idx.iter().map(|&i| &data.samples[i]).collect();
        let terms = train_step(&mut state, cfg, &samples).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {}: {m}", state.step + 1)),
            other => other,
        })?;
        log.push_step(state.step, terms)?;
        let every = cfg.train.eval_every;
        if let Some(ev) = eval {
            if (every > 0 && state.step % every == 0) || state.step == cfg.train.max_steps {
                let r = evaluate(&state.model, ev)?;
                log.evals.push(EvalRow {
                    step: state.step,
                    split: "eval".into(),
                    per_class: r.per_class,
                    mean: r.mean,
                });
            }
        }
    }
    Ok((state, log))
}
