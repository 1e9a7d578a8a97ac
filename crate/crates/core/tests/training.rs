use diffcore::{Graph, ParamStore};
use ivnet::causalhead::LossTerm;
use ivnet::config::{Toggles, TrainConfig};
use ivnet::data::{Dataset, Sample};
use ivnet::harness::{ablate, check_fixture, full_objective_gradcheck, run_one, Metric};
use ivnet::metrics::MetricsLog;
use ivnet::scmgen::{generate_dataset, ScmConfig};
use ivnet::train::{estimator_adam, fit_estimators, forward_batch, objective, train, Checkpoint, TrainState};

fn small_scm(rho: f64, noise: f64) -> ScmConfig {
    ScmConfig {
        image_size: 16,
        n_train: 64,
        n_test: 32,
        rho_train: rho,
        rho_test: rho,
        blob_radius: 2,
        blob_intensity: 0.8,
        blob_jitter: 1,
        marker_size: 3,
        noise_sigma: noise,
        vocab_size: 16,
        tokens_per_sample: 2,
        ..ScmConfig::default()
    }
}

fn small_cfg(steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    let m = &mut cfg.model;
    m.d = 6;
    m.d_r = 6;
    m.causal_hidden = 8;
    m.vocab_size = 16;
    m.backbone.widths = [3, 4];
    m.backbone.downsample = 4;
    m.fusion.d_t = 4;
    m.fusion.ffn_hidden = 8;
    m.fusion.max_len = 8;
    cfg.train.batch_size = 8;
    cfg.train.max_steps = steps;
    cfg.train.eval_every = 0;
    cfg
}

fn split(rho: f64, noise: f64) -> (Dataset, Dataset) {
    let d = generate_dataset(&small_scm(rho, noise)).unwrap();
    (d.train_set(), d.test_set())
}

#[test]
fn smoke_run_lowers_task_loss() {
    let (data, _) = split(0.5, 0.0);
    let (_, log) = train(&small_cfg(50), &data, None, None).unwrap();
    let early = log.term_mean(LossTerm::Task, 1..=10);
    let late = log.term_mean(LossTerm::Task, 41..=50);
    assert!(late < early, "L_Y {early} -> {late}");
}

#[test]
fn same_seed_gives_byte_identical_logs() {
    let (data, test) = split(0.9, 0.2);
    let mut cfg = small_cfg(12);
    cfg.train.eval_every = 5;
    let (_, a) = train(&cfg, &data, Some(&test), None).unwrap();
    let (_, b) = train(&cfg, &data, Some(&test), None).unwrap();
    assert_eq!(a.steps_csv(), b.steps_csv());
    assert_eq!(a.evals_csv(), b.evals_csv());
    assert_eq!(a.evals.len(), 3);
}

#[test]
fn resumed_run_matches_straight_run() {
    let (data, _) = split(0.9, 0.2);
    let (straight, _) = train(&small_cfg(50), &data, None, None).unwrap();
    let (half, _) = train(&small_cfg(25), &data, None, None).unwrap();
    let ck = Checkpoint::capture(&small_cfg(25), &data.classes, &half).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), ck.to_bytes().unwrap());
    let (resumed, log) = train(&small_cfg(50), &data, None, Some(&loaded)).unwrap();
    assert_eq!(log.steps.first().map(|r| r.step), Some(26));
    let mut worst = 0.0f64;
    for (a, b) in straight.model.store.iter().zip(resumed.model.store.iter()) {
        worst = worst.max(a.tensor.max_abs_diff(&b.tensor));
    }
    for (a, b) in straight.estimators.iter().zip(&resumed.estimators) {
        for (x, y) in a.store.iter().zip(b.store.iter()) {
            worst = worst.max(x.tensor.max_abs_diff(&y.tensor));
        }
    }
    assert!(worst <= 1e-9, "max parameter difference {worst}");
}

#[test]
fn checkpoint_rejects_a_different_config() {
    let (data, _) = split(0.9, 0.2);
    let (state, _) = train(&small_cfg(2), &data, None, None).unwrap();
    let ck = Checkpoint::capture(&small_cfg(2), &data.classes, &state).unwrap();
    let mut other = small_cfg(4);
    other.optimizer.lr = 5e-4;
    assert!(train(&other, &data, None, Some(&ck)).is_err());
    let mut bytes = String::from_utf8(ck.to_bytes().unwrap()).unwrap();
    bytes = bytes.replacen("\"batch_size\":8", "\"batch_size\":9", 1);
    assert!(Checkpoint::from_bytes(bytes.as_bytes(), std::path::Path::new("x")).is_err());
}

fn grads(store: &ParamStore) -> Vec<f64> {
    store.iter().flat_map(|p| p.tensor.grad().unwrap_or(&[]).to_vec()).collect()
}

#[test]
fn estimator_fitting_shares_no_gradient_path() {
    let (data, _) = split(0.9, 0.2);
    let cfg = small_cfg(1);
    let state = TrainState::init(&cfg, data.k()).unwrap();
    let samples: Vec<&Sample> = data.samples[..8].iter().collect();
    let adam = estimator_adam(&cfg);

    let mut fitted = state.estimators.clone();
    {
        let mut g = Graph::new();
        let b = forward_batch(&mut g, &state.model, &state.model.store, &samples).unwrap();
        fit_estimators(&mut fitted, &g, &b, 3, &adam).unwrap();
    }

    let without = {
        let mut store = state.model.store.clone();
        let mut g = Graph::new();
        let b = forward_batch(&mut g, &state.model, &store, &samples).unwrap();
        let (t, _) = objective(&mut g, &b, Some(&fitted), &cfg.loss).unwrap();
        g.backward(t, &mut store).unwrap();
        grads(&store)
    };
    let with = {
        let mut store = state.model.store.clone();
        let mut g = Graph::new();
        let b = forward_batch(&mut g, &state.model, &store, &samples).unwrap();
        let mut ests = state.estimators.clone();
        fit_estimators(&mut ests, &g, &b, 3, &adam).unwrap();
        assert_eq!(ests, fitted);
        let (t, _) = objective(&mut g, &b, Some(&ests), &cfg.loss).unwrap();
        g.backward(t, &mut store).unwrap();
        grads(&store)
    };
    assert_eq!(with.len(), without.len());
    let worst = with.iter().zip(&without).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-9, "{worst}");
}

#[test]
fn full_objective_gradient_matches_finite_differences() {
    let (cfg, data) = check_fixture();
    for toggles in ivnet::harness::GRID {
        let mut c = cfg.clone();
        c.toggles = toggles;
        let r = full_objective_gradcheck(&c, &data, 1e-4).unwrap();
        let bad: Vec<_> = r.probes.iter().filter(|p| !p.passed).collect();
        assert!(bad.is_empty(), "{toggles:?}: {bad:#?}");
    }
}

#[test]
fn all_off_model_is_two_backbones_and_a_classifier() {
    let cfg = small_cfg(1);
    let m = &cfg.model;
    let k = 4;
    let mut off = cfg.clone();
    off.toggles = Toggles::all(false);
    let state = TrainState::init(&off, k).unwrap();
    assert!(state.estimators.is_empty());
    let mut prefixes: Vec<&str> = state.model.store.iter().map(|p| p.name.split('.').next().unwrap()).collect();
    prefixes.dedup();
    assert_eq!(prefixes, ["bb_i", "bb_c", "pool_i", "pool_c", "tok", "cat", "rep", "cls"]);

    let chans = [1, m.backbone.widths[0], m.backbone.widths[1], m.d];
    let backbone: usize = (0..3).map(|b| 9 * chans[b] * chans[b + 1] + chans[b + 1]).sum();
    let pool = m.d * k * m.d + k * m.d;
    let tok = m.vocab_size * m.fusion.d_t;
    let cat = (m.d + m.fusion.d_t) * m.d + m.d;
    let rep = 2 * m.d * m.causal_hidden + m.causal_hidden + m.causal_hidden * m.d_r + m.d_r;
    let cls = k * (m.d_r + m.d) + k;
    assert_eq!(state.model.store.scalar_count(), 2 * backbone + 2 * pool + tok + cat + rep + cls);
}

#[test]
fn grid_cell_one_is_the_plain_baseline() {
    let (data, test) = split(0.9, 0.2);
    let base = small_cfg(3);
    let grid = ablate(&base, &data, &test, &[7], Metric::MeanAuc, |_| {});
    assert_eq!(grid.runs.len(), 8);
    assert!(grid.runs.iter().all(|r| r.outcome.is_ok()));
    let cell = grid.cell(1).next().unwrap().outcome.as_ref().unwrap();

    let mut plain = base.clone();
    plain.toggles = Toggles::all(false);
    plain.seed = 7;
    let direct = run_one(&plain, &data, &test, Metric::MeanAuc).unwrap();
    assert_eq!(cell.state.model.store, direct.state.model.store);
    assert_eq!(cell.value.to_bits(), direct.value.to_bits());

    let csv = grid.csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model,iv_learning,semantic_fusion,constraints,mean_ood_auc,std");
    assert!(lines[1].starts_with("1,-,-,-,"));
    assert!(lines[8].starts_with("8,+,+,+,"));
}

#[test]
fn failed_runs_mark_their_cell() {
    let (data, _) = split(0.9, 0.2);
    // a split with no negatives for any class cannot be scored
    let mut bad = data.clone();
    for s in &mut bad.samples {
        s.labels = vec![1.0; s.labels.len()];
    }
    let grid = ablate(&small_cfg(1), &data, &bad, &[0], Metric::MeanAuc, |_| {});
    assert!(grid.runs.iter().all(|r| r.outcome.is_err()));
    assert!(grid.csv().lines().skip(1).all(|l| l.ends_with("failed,failed")));
}

#[test]
fn metrics_files_satisfy_the_total_identity() {
    let (data, _) = split(0.9, 0.2);
    let cfg = small_cfg(5);
    let (_, log) = train(&cfg, &data, None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    log.write(dir.path()).unwrap();
    let rows = MetricsLog::read_steps(&dir.path().join("metrics.csv"), cfg.loss).unwrap();
    assert_eq!(rows, log.steps);
}
