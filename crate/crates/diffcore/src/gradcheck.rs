//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DiffError, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rel_tol: f64,
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.probes.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }
}

/// Relative error with a small absolute floor so exact zeros compare sanely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Probe settings. A probe passes when its relative error is within
/// `rel_tol` or its absolute error within `abs_tol`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub probes: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Central-difference step, scaled by `max(|x|, 1)`.
    pub step: f64,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            probes: 20,
            rel_tol: 1e-4,
            abs_tol: 0.0,
            step: 1e-5,
            seed: 0,
        }
    }
}

/// Checks the gradient of a graph-built scalar function of `params`.
pub fn finite_diff_check<F>(
    params: &mut ParamStore,
    build: F,
    probe_count: usize,
    rel_tol: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let opts = CheckOptions {
        probes: probe_count,
        rel_tol,
        seed,
        ..CheckOptions::default()
    };
    finite_diff_check_opts(params, build, &opts)
}

pub fn finite_diff_check_opts<F>(params: &mut ParamStore, build: F, opts: &CheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let value = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::no_grad();
        let l = build(&mut g, p)?;
        Ok(g.scalar(l))
    };
    let gradient = |p: &mut ParamStore| -> Result<()> {
        let mut g = Graph::new();
        let l = build(&mut g, p)?;
        g.backward(l, p)
    };
    check_probes(params, value, gradient, opts)
}

/// Same as [`finite_diff_check`] but with the value and the analytic gradient
/// supplied separately.
pub fn finite_diff_check_with<V, G>(
    params: &mut ParamStore,
    value: V,
    gradient: G,
    probe_count: usize,
    rel_tol: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    V: Fn(&ParamStore) -> Result<f64>,
    G: FnMut(&mut ParamStore) -> Result<()>,
{
    let opts = CheckOptions {
        probes: probe_count,
        rel_tol,
        seed,
        ..CheckOptions::default()
    };
    check_probes(params, value, gradient, &opts)
}

fn check_probes<V, G>(params: &mut ParamStore, value: V, mut gradient: G, opts: &CheckOptions) -> Result<GradCheckReport>
where
    V: Fn(&ParamStore) -> Result<f64>,
    G: FnMut(&mut ParamStore) -> Result<()>,
{
    if params.iter().any(|p| !p.tensor.is_finite()) {
        return Err(DiffError::CheckInvalid("non-finite parameter".into()));
    }
    let f0 = value(params)?;
    let f1 = value(params)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(DiffError::CheckInvalid(format!(
            "function is not deterministic: {f0} vs {f1}"
        )));
    }
    params.zero_grad();
    gradient(params)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.tensor.numel()]))
        .collect();
    params.clear_grad();

    let total = params.scalar_count();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probes = Vec::with_capacity(opts.probes);
    for _ in 0..opts.probes {
        let mut flat = rng.gen_range(0..total);
        let mut pid = 0;
        while flat >= params.get(ParamId(pid)).tensor.numel() {
            flat -= params.get(ParamId(pid)).tensor.numel();
            pid += 1;
        }
        let id = ParamId(pid);
        let orig = params.value(id).data()[flat];
        let h = opts.step * orig.abs().max(1.0);
        params.get_mut(id).tensor.data_mut()[flat] = orig + h;
        let plus = value(params);
        params.get_mut(id).tensor.data_mut()[flat] = orig - h;
        let minus = value(params);
        params.get_mut(id).tensor.data_mut()[flat] = orig;
        let numeric = (plus? - minus?) / (2.0 * h);
        let a = analytic[pid][flat];
        let rel_err = relative_error(a, numeric);
        probes.push(Probe {
            param: params.get(id).name.clone(),
            index: flat,
            analytic: a,
            numeric,
            rel_err,
            passed: rel_err <= opts.rel_tol || (a - numeric).abs() <= opts.abs_tol,
        });
    }
    Ok(GradCheckReport { rel_tol: opts.rel_tol, probes })
}
