//! Ablation grid, attention export and the invariant check suite.

use std::fmt::Write as _;
use std::path::Path;

use diffcore::{finite_diff_check_opts, CheckOptions, GradCheckReport, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::causalhead::{total_loss, LossWeights};
use crate::config::{Toggles, TrainConfig};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::{auc, auc_pairwise, evaluate, EvalReport};
use crate::image::RasterImage;
use crate::ingest::write_raster;
use crate::ivlearn::decode_layer;
use crate::miconstraint::{estimator_fit_step, mi_pairwise_value, CondDensityEstimator, Role};
use crate::model::Model;
use crate::scmgen::ScmConfig;
use crate::train::{forward_batch, objective, train, Checkpoint, TrainState};

/// Toggle settings of models 1 to 8, in table order.
pub const GRID: [Toggles; 8] = {
    const fn t(iv: bool, sf: bool, vc: bool) -> Toggles {
        Toggles {
            iv_learning: iv,
            semantic_fusion: sf,
            valid_iv_constraints: vc,
        }
    }
    [
        t(false, false, false),
        t(false, true, false),
        t(true, false, false),
        t(true, true, false),
        t(false, false, true),
        t(false, true, true),
        t(true, false, true),
        t(true, true, true),
    ]
};

pub const DEFAULT_SEEDS: usize = 5;

/// Which OOD number a grid cell reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    /// Mean AUC over classes with a defined AUC.
    MeanAuc,
    /// AUC of one class.
    ClassAuc(usize),
}

impl Metric {
    pub fn pick(&self, r: &EvalReport) -> Result<f64> {
        match *self {
            Metric::MeanAuc => Ok(r.mean),
            Metric::ClassAuc(c) => r
                .per_class
                .get(c)
                .copied()
                .flatten()
                .ok_or_else(|| Error::UndefinedMetric(format!("class {c} has no AUC on this split"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: TrainState,
    pub ood: EvalReport,
    pub value: f64,
}

#[derive(Debug)]
pub struct AblationRun {
    /// 1-based model number.
    pub model: usize,
    pub seed: u64,
    pub outcome: Result<RunOutcome>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub model: usize,
    pub toggles: Toggles,
    /// `None` when any run of the cell failed.
    pub summary: Option<(f64, f64)>,
}

#[derive(Debug)]
pub struct Ablation {
    pub runs: Vec<AblationRun>,
}

pub fn seeds_from(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base + i).collect()
}

pub fn run_one(cfg: &TrainConfig, train_set: &Dataset, ood: &Dataset, metric: Metric) -> Result<RunOutcome> {
    let (state, _) = train(cfg, train_set, None, None)?;
    let report = evaluate(&state.model, ood)?;
    let value = metric.pick(&report)?;
    Ok(RunOutcome {
        state,
        ood: report,
        value,
    })
}

/// Trains every grid cell for every seed. A failing run is kept as an error
/// and does not stop the grid. `progress` sees each run as it finishes.
pub fn ablate(
    base: &TrainConfig,
    train_set: &Dataset,
    ood: &Dataset,
    seeds: &[u64],
    metric: Metric,
    mut progress: impl FnMut(&AblationRun),
) -> Ablation {
    let mut runs = Vec::new();
    for (m, toggles) in GRID.iter().enumerate() {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.toggles = *toggles;
            cfg.seed = seed;
            let run = AblationRun {
                model: m + 1,
                seed,
                outcome: run_one(&cfg, train_set, ood, metric),
            };
            progress(&run);
            runs.push(run);
        }
    }
    Ablation { runs }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const ABLATION_HEADER: &str = "model,iv_learning,semantic_fusion,constraints,mean_ood_auc,std";

impl Ablation {
    pub fn cell(&self, model: usize) -> impl Iterator<Item = &AblationRun> {
        self.runs.iter().filter(move |r| r.model == model)
    }

    /// Per-seed values of a cell, `None` where the run failed.
    pub fn values(&self, model: usize) -> Vec<Option<f64>> {
        self.cell(model).map(|r| r.outcome.as_ref().ok().map(|o| o.value)).collect()
    }

    pub fn rows(&self) -> Vec<AblationRow> {
        (1..=GRID.len())
            .map(|m| {
                let vals: Option<Vec<f64>> = self.values(m).into_iter().collect();
                AblationRow {
                    model: m,
                    toggles: GRID[m - 1],
                    summary: vals.filter(|v| !v.is_empty()).map(|v| mean_std(&v)),
                }
            })
            .collect()
    }

    pub fn csv(&self) -> String {
        let sign = |b: bool| if b { "+" } else { "-" };
        let mut s = format!("{ABLATION_HEADER}\n");
        for r in self.rows() {
            let t = r.toggles;
            let _ = write!(
                s,
                "{},{},{},{},",
                r.model,
                sign(t.iv_learning),
                sign(t.semantic_fusion),
                sign(t.valid_iv_constraints)
            );
            match r.summary {
                Some((m, sd)) => {
                    let _ = writeln!(s, "{m:.4},{sd:.4}");
                }
                None => s.push_str("failed,failed\n"),
            }
        }
        s
    }
}

/// Renders the attention heatmap of `class` and writes it to `path`.
pub fn export_attention(model: &Model, sample: &Sample, class: usize, path: &Path) -> Result<RasterImage> {
    let img = model.attention_heatmap(sample, class)?;
    write_raster(path, &img)?;
    Ok(img)
}

/// Fraction of heatmap mass inside `mask`.
pub fn mass_in_mask(heat: &RasterImage, mask: &[bool]) -> Result<f64> {
    if heat.pixels.len() != mask.len() {
        return Err(Error::contract("heatmap and mask differ in size"));
    }
    let total: f64 = heat.pixels.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numeric("heatmap has no mass".into()));
    }
    let inside: f64 = heat.pixels.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    Ok(inside / total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Localization {
    /// Mean heatmap mass inside the ground-truth mask (all blobs).
    pub mass: f64,
    /// Mean area of the ground-truth mask as a fraction of the image.
    pub area: f64,
    /// Same two numbers restricted to the blob of the scored class.
    pub class_mass: f64,
    pub class_area: f64,
    pub samples: usize,
}

impl Localization {
    pub fn localizes(&self) -> bool {
        self.mass > self.area
    }
}

/// Averages attention mass and mask area over samples positive for `class`
/// that carry ground truth.
pub fn localization(model: &Model, data: &Dataset, class: usize) -> Result<Localization> {
    let mut acc = [0.0; 4];
    let mut n = 0usize;
    for s in &data.samples {
        let Some(truth) = &s.truth else { continue };
        if s.labels.get(class) != Some(&1.0) {
            continue;
        }
        let (h, w) = (s.image.height, s.image.width);
        let own = truth.class_mask(class, h, w);
        let heat = model.attention_heatmap(s, class)?;
        let frac = |m: &[bool]| m.iter().filter(|&&v| v).count() as f64 / (h * w) as f64;
        acc[0] += mass_in_mask(&heat, &truth.mask)?;
        acc[1] += frac(&truth.mask);
        acc[2] += mass_in_mask(&heat, &own)?;
        acc[3] += frac(&own);
        n += 1;
    }
    if n == 0 {
        return Err(Error::contract(format!("no sample with ground truth is positive for class {class}")));
    }
    let m = |i: usize| acc[i] / n as f64;
    Ok(Localization {
        mass: m(0),
        area: m(1),
        class_mass: m(2),
        class_area: m(3),
        samples: n,
    })
}

/// Desk-scale benchmark: the default generator and a small model. Constraint
/// weights are about `exp(-6) / target_dim`, which keeps each saturated
/// pairwise term near unit scale.
pub fn benchmark_config() -> (ScmConfig, TrainConfig) {
    let mut cfg = TrainConfig::default();
    let m = &mut cfg.model;
    m.d = 16;
    m.d_r = 16;
    m.causal_hidden = 32;
    m.backbone.widths = [4, 8];
    m.fusion.d_t = 16;
    m.fusion.ffn_hidden = 32;
    m.fusion.max_len = 16;
    cfg.loss.l_ic = 1.5e-4;
    cfg.loss.l_ir = 1.5e-4;
    cfg.loss.l_iy = 6e-4;
    cfg.train.max_steps = 2000;
    cfg.data.resize_to = 32;
    cfg.data.crop_to = 32;
    (ScmConfig::default(), cfg)
}

/// Correlations of the Gaussian ordering experiment and their analytic MI.
pub const GAUSSIAN_RHOS: [f64; 3] = [0.0, 0.5, 0.9];

pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

/// Fits a fresh estimator to `n` pairs of unit Gaussians with each correlation
/// in [`GAUSSIAN_RHOS`] and returns the pairwise estimate for each.
pub fn gaussian_mi_estimates(seed: u64, n: usize, steps: usize) -> Result<[f64; 3]> {
    let adam = diffcore::AdamConfig {
        lr: 1e-2,
        weight_decay: 0.0,
        ..diffcore::AdamConfig::default()
    };
    let mut out = [0.0; 3];
    for (slot, &rho) in out.iter_mut().zip(&GAUSSIAN_RHOS) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut xs, mut ys) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let x: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            xs.push(x);
            ys.push(rho * x + (1.0 - rho * rho).sqrt() * e);
        }
        let conds = Tensor::new(&[n, 1], xs.clone())?;
        let targets = Tensor::new(&[n, 1], ys.clone())?;
        let mut est = CondDensityEstimator::new(Role::IC, 1, 1, &mut rng);
        for _ in 0..steps {
            estimator_fit_step(&mut est, &conds, &targets, &adam)?;
        }
        let c: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let t: Vec<Vec<f64>> = ys.iter().map(|&y| vec![y]).collect();
        *slot = mi_pairwise_value(&est, &c, &t, 1.0)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String>) -> CheckResult {
    match f() {
        Ok(detail) => CheckResult {
            name,
            passed: true,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn fail(msg: String) -> Error {
    Error::Contract(msg)
}

/// Small model and data for the self checks.
pub fn check_fixture() -> (TrainConfig, Dataset) {
    let mut cfg = TrainConfig::default();
    let m = &mut cfg.model;
    m.d = 4;
    m.d_r = 4;
    m.causal_hidden = 6;
    m.vocab_size = 12;
    m.decoder_layers = 2;
    m.backbone.widths = [2, 3];
    m.backbone.downsample = 2;
    m.fusion.layers = 1;
    m.fusion.d_t = 3;
    m.fusion.ffn_hidden = 5;
    m.fusion.max_len = 6;
    cfg.train.batch_size = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples = (0..4)
        .map(|i| Sample {
            image: RasterImage::new(8, 8, 1, (0..64).map(|_| rng.gen::<f64>()).collect()).expect("valid raster"),
            labels: vec![(i % 2) as f64, ((i / 2) % 2) as f64],
            tokens: vec![2 + i as u32, 7],
            truth: None,
        })
        .collect();
    (
        cfg,
        Dataset {
            classes: vec!["a".into(), "b".into()],
            samples,
        },
    )
}

/// Absolute tolerance of the full-objective check. Near-zero gradients of the
/// constraint terms sit at the rounding floor of the central difference.
pub const OBJECTIVE_ABS_TOL: f64 = 1e-8;

/// Finite-difference check of the full objective with the estimators held
/// fixed.
pub fn full_objective_gradcheck(cfg: &TrainConfig, data: &Dataset, tol: f64) -> Result<GradCheckReport> {
    let state = TrainState::init(cfg, data.k())?;
    let samples: Vec<&Sample> = data.samples.iter().collect();
    let ests = state.estimators.clone();
    let weights = cfg.loss;
    let model = &state.model;
    let build = |g: &mut Graph, store: &diffcore::ParamStore| -> diffcore::Result<diffcore::NodeId> {
        let batch = forward_batch(g, model, store, &samples).map_err(|e| diffcore::DiffError::Contract(e.to_string()))?;
        let ests = (!ests.is_empty()).then_some(ests.as_slice());
        let (total, _) = objective(g, &batch, ests, &weights).map_err(|e| diffcore::DiffError::Contract(e.to_string()))?;
        Ok(total)
    };
    let mut store = model.store.clone();
    let opts = CheckOptions {
        probes: 24,
        rel_tol: tol,
        abs_tol: OBJECTIVE_ABS_TOL,
        seed: 3,
        ..CheckOptions::default()
    };
    Ok(finite_diff_check_opts(&mut store, build, &opts)?)
}

fn gradcheck_summary(r: &GradCheckReport) -> Result<String> {
    if !r.passed() {
        let worst = r.probes.iter().filter(|p| !p.passed).map(|p| format!("{}[{}]", p.param, p.index));
        return Err(fail(format!(
            "relative error {:.2e} at {}",
            r.max_rel_err(),
            worst.collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(format!("max relative error {:.2e}", r.max_rel_err()))
}

/// Gradient and invariant suite behind the `check` command.
pub fn run_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let (cfg, data) = check_fixture();

    out.push(check("gradient: full objective", || {
        gradcheck_summary(&full_objective_gradcheck(&cfg, &data, 1e-4)?)
    }));

    out.push(check("gradient: baseline objective", || {
        let mut c = cfg.clone();
        c.toggles = Toggles::all(false);
        gradcheck_summary(&full_objective_gradcheck(&c, &data, 1e-4)?)
    }));

    out.push(check("decoder: branches are complements", || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::no_grad();
        let mut rand_t = |r: usize, c: usize| Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let q = g.constant(rand_t(3, 4)?);
        let f = g.constant(rand_t(5, 4)?);
        let out = decode_layer(&mut g, q, f)?;
        let fsum: Vec<f64> = (0..4).map(|j| (0..5).map(|r| g.value(f).get2(r, j)).sum()).collect();
        let mut worst = 0.0f64;
        for r in 0..3 {
            let row: f64 = g.value(out.attention).row(r).iter().sum();
            worst = worst.max((row - 1.0).abs());
            for (j, fs) in fsum.iter().enumerate() {
                let s = g.value(out.instrument).get2(r, j) + g.value(out.confounder).get2(r, j);
                worst = worst.max((s - fs).abs());
            }
        }
        if worst > 1e-9 {
            return Err(fail(format!("identity off by {worst:.2e}")));
        }
        Ok(format!("max deviation {worst:.2e}"))
    }));

    out.push(check("constraints: antisymmetric null", || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut est = CondDensityEstimator::new(Role::IC, 3, 2, &mut rng);
        // zero first-layer weights make the output ignore the conditioning input
        let w1 = est.param_ids()[0];
        est.store.get_mut(w1).tensor.data_mut().fill(0.0);
        let conds: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let targets: Vec<Vec<f64>> = (0..6).map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let v = mi_pairwise_value(&est, &conds, &targets, 1.0)?;
        if v.abs() > 1e-9 {
            return Err(fail(format!("value {v:.2e}")));
        }
        Ok(format!("value {v:.2e}"))
    }));

    out.push(check("metric: AUC equals pairwise concordance", || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cases = 0;
        for n in 2..=8usize {
            for pattern in 0..(1u32 << n) {
                let labels: Vec<f64> = (0..n).map(|i| ((pattern >> i) & 1) as f64).collect();
                let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect();
                if let (Ok(a), Ok(b)) = (auc(&scores, &labels), auc_pairwise(&scores, &labels)) {
                    if a != b {
                        return Err(fail(format!("{a} != {b} for {scores:?} {labels:?}")));
                    }
                    cases += 1;
                }
            }
        }
        Ok(format!("{cases} label patterns"))
    }));

    out.push(check("loss: total is the weighted sum", || {
        let v = total_loss([0.2, 0.1, 0.05, -0.3, 0.02, 0.4], &LossWeights::default())?;
        if (v - 0.47).abs() > 1e-12 {
            return Err(fail(format!("got {v}")));
        }
        Ok("0.47".into())
    }));

    out.push(check("checkpoint: save, load, save is byte-identical", || {
        let state = TrainState::init(&cfg, data.k())?;
        let ck = Checkpoint::capture(&cfg, &data.classes, &state)?;
        let a = ck.to_bytes()?;
        let b = Checkpoint::from_bytes(&a, Path::new("<memory>"))?.to_bytes()?;
        if a != b {
            return Err(fail("bytes differ".into()));
        }
        Ok(format!("{} bytes", a.len()))
    }));

    out.push(check("toggles: all-off graph has no decoder, fusion or estimator", || {
        let mut c = cfg.clone();
        c.toggles = Toggles::all(false);
        let state = TrainState::init(&c, data.k())?;
        let bad: Vec<&str> = state
            .model
            .store
            .iter()
            .map(|p| p.name.as_str())
            .filter(|n| n.starts_with("dec.") || n.starts_with("fuse."))
            .collect();
        if !bad.is_empty() || !state.estimators.is_empty() {
            return Err(fail(format!("unexpected parameters {bad:?}")));
        }
        Ok(format!("{} parameter tensors", state.model.store.len()))
    }));

    out
}
