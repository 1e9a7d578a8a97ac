use std::collections::BTreeSet;

use ivnet::data::Dataset;
use ivnet::ingest::{parse_manifest, UncertainPolicy};
use ivnet::scmgen::{generate_dataset, marker_agreement, ScmConfig, SyntheticSample, CONFOUNDED_CLASS};

fn cfg(n_train: usize, n_test: usize) -> ScmConfig {
    ScmConfig {
        n_train,
        n_test,
        ..ScmConfig::default()
    }
}

#[test]
fn rho_one_forces_agreement() {
    let d = generate_dataset(&ScmConfig {
        rho_train: 1.0,
        ..cfg(300, 10)
    })
    .unwrap();
    for s in &d.train {
        assert_eq!(s.marker_flag, s.labels[CONFOUNDED_CLASS] == 1.0);
    }
}

#[test]
fn half_rho_agreement_is_within_three_sigma() {
    let d = generate_dataset(&ScmConfig {
        rho_train: 0.5,
        ..cfg(2000, 10)
    })
    .unwrap();
    let a = marker_agreement(&d.train);
    assert!((0.47..=0.53).contains(&a), "agreement {a}");
}

#[test]
fn benchmark_splits_follow_their_rho() {
    let d = generate_dataset(&cfg(2000, 500)).unwrap();
    let tr = marker_agreement(&d.train);
    let te = marker_agreement(&d.test);
    // 3 sigma bands around 0.9 and 0.1
    assert!((tr - 0.9).abs() < 3.0 * (0.09f64 / 2000.0).sqrt(), "train {tr}");
    assert!((te - 0.1).abs() < 3.0 * (0.09f64 / 500.0).sqrt(), "test {te}");
}

#[test]
fn masks_match_blobs_and_markers_stay_clear() {
    let c = cfg(400, 10);
    let d = generate_dataset(&c).unwrap();
    let (my, mx) = c.marker_origin();
    for s in &d.train {
        let expect: usize = {
            let mut px = BTreeSet::new();
            for (cl, center) in s.blob_centers.iter().enumerate() {
                assert_eq!(center.is_some(), s.labels[cl] == 1.0);
                if let Some((cy, cx)) = center {
                    px.extend(ivnet::data::disc_pixels(*cy, *cx, c.blob_radius, c.image_size, c.image_size));
                }
            }
            px.len()
        };
        assert_eq!(s.ground_truth_mask.iter().filter(|&&m| m).count(), expect);
        for y in my..my + c.marker_size {
            for x in mx..mx + c.marker_size {
                assert!(!s.ground_truth_mask[y * c.image_size + x]);
            }
        }
    }
}

fn plug_in_mi(table: [[f64; 2]; 2]) -> f64 {
    let n: f64 = table.iter().flatten().sum();
    if n == 0.0 {
        return 0.0;
    }
    let row = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let col = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let mut mi = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let p = table[a][b] / n;
            if p > 0.0 {
                mi += p * (p / (row[a] / n * col[b] / n)).ln();
            }
        }
    }
    mi
}

/// MI between the marker and the presence of `token`, conditioned on the
/// confounded-class label.
fn conditional_token_mi(samples: &[SyntheticSample], token: u32) -> f64 {
    let n = samples.len() as f64;
    let mut total = 0.0;
    for y in [0.0, 1.0] {
        let mut t = [[0.0; 2]; 2];
        let group: Vec<&SyntheticSample> = samples.iter().filter(|s| s.labels[CONFOUNDED_CLASS] == y).collect();
        for s in &group {
            t[usize::from(s.marker_flag)][usize::from(s.tokens.contains(&token))] += 1.0;
        }
        total += group.len() as f64 / n * plug_in_mi(t);
    }
    total
}

#[test]
fn tokens_carry_no_marker_information_given_the_label() {
    let c = cfg(2000, 10);
    let d = generate_dataset(&c).unwrap();
    let worst = (2..c.vocab_size as u32)
        .map(|t| conditional_token_mi(&d.train, t))
        .fold(0.0f64, f64::max);
    assert!(worst <= 0.01, "max conditional MI {worst}");
}

#[test]
fn changing_test_rho_leaves_train_split_identical() {
    let a = generate_dataset(&cfg(200, 100)).unwrap();
    let b = generate_dataset(&ScmConfig {
        rho_test: 0.7,
        ..cfg(200, 100)
    })
    .unwrap();
    assert_eq!(a.train, b.train);
    assert_ne!(a.test, b.test);
}

#[test]
fn written_dataset_round_trips_2000_records() {
    let d = generate_dataset(&cfg(2000, 20)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let w = d.write(dir.path()).unwrap();
    let m = parse_manifest(&w.train_manifest).unwrap();
    assert_eq!(m.records.len(), 2000);
    for (r, s) in m.records.iter().zip(&d.train) {
        assert_eq!(r.raw_labels(), s.labels);
        assert_eq!(r.tokens, s.tokens);
    }
    let size = d.config.image_size;
    let loaded = Dataset::load(&w.train_manifest, UncertainPolicy::UOnes, size, size).unwrap();
    let expect = d.train_set();
    assert_eq!(loaded.classes, expect.classes);
    for (a, b) in loaded.samples.iter().zip(&expect.samples) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.tokens, b.tokens);
    }
    let summary = std::fs::read_to_string(&w.summary).unwrap();
    assert!(summary.contains("train_marker_agreement="));
}
