use ivnet::harness::{gaussian_mi, gaussian_mi_estimates, GAUSSIAN_RHOS};

#[test]
fn analytic_values() {
    let mi: Vec<f64> = GAUSSIAN_RHOS.iter().map(|&r| gaussian_mi(r)).collect();
    assert_eq!(mi[0], 0.0);
    assert!((mi[1] - 0.1438).abs() < 1e-4);
    assert!((mi[2] - 0.8304).abs() < 1e-4);
}

#[test]
fn fitted_estimates_rank_correlations() {
    let mut ordered = 0;
    for seed in 0..5 {
        let v = gaussian_mi_estimates(seed, 256, 300).unwrap();
        println!("seed {seed}: {v:?}");
        if v[0] < v[1] && v[1] < v[2] {
            ordered += 1;
        }
    }
    assert!(ordered >= 4, "{ordered} of 5 seeds ordered");
}
