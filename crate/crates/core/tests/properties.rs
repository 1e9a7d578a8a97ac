use diffcore::{Graph, ParamStore, Tensor};
use ivnet::backbone::{Backbone, BackboneConfig};
use ivnet::causalhead::{total_loss, LossWeights};
use ivnet::eval::{auc, auc_pairwise};
use ivnet::image::RasterImage;
use ivnet::ivlearn::decode_layer;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { 0.0 }), n),
        )
    })
}

proptest! {
    #[test]
    fn auc_agrees_with_pairs_and_mirrors((s, y) in scored_labels()) {
        match (auc(&s, &y), auc_pairwise(&s, &y)) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a, b);
                prop_assert!((0.0..=1.0).contains(&a));
                let flipped: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
                let m = auc(&s, &flipped).unwrap();
                prop_assert!((a + m - 1.0).abs() < 1e-12);
            }
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn auc_ignores_monotone_rescaling((s, y) in scored_labels()) {
        let t: Vec<f64> = s.iter().map(|v| (v * 0.5).exp() + 3.0).collect();
        if let (Ok(a), Ok(b)) = (auc(&s, &y), auc(&t, &y)) {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn decoder_branches_partition_column_sums(
        k in 1usize..5, hw in 1usize..12, d in 1usize..6, seed in any::<u64>()
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::no_grad();
        let mut t = |r: usize, c: usize| Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let q = g.constant(t(k, d));
        let f = g.constant(t(hw, d));
        let out = decode_layer(&mut g, q, f).unwrap();
        for r in 0..k {
            let row: f64 = g.value(out.attention).row(r).iter().sum();
            prop_assert!((row - 1.0).abs() <= 1e-8);
            for j in 0..d {
                let col: f64 = (0..hw).map(|i| g.value(f).get2(i, j)).sum();
                let both = g.value(out.instrument).get2(r, j) + g.value(out.confounder).get2(r, j);
                prop_assert!((both - col).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn total_is_linear_in_the_weights(
        terms in prop::array::uniform6(-10.0f64..10.0),
        w in prop::array::uniform6(0.0f64..2.0),
        c in 0.0f64..4.0,
    ) {
        let base = total_loss(terms, &LossWeights::from_array(w)).unwrap();
        let scaled = total_loss(terms, &LossWeights::from_array(w.map(|x| x * c))).unwrap();
        prop_assert!((scaled - c * base).abs() <= 1e-9 * (1.0 + base.abs() * c));
    }
}

fn blob_image(size: usize, cy: usize, cx: usize) -> RasterImage {
    let mut px = vec![0.0; size * size];
    for (y, x) in ivnet::data::disc_pixels(cy, cx, 2, size, size) {
        px[y * size + x] = 1.0;
    }
    RasterImage::new(size, size, 1, px).unwrap()
}

fn cell_norms(bb: &Backbone, store: &ParamStore, img: &RasterImage) -> (Vec<f64>, usize) {
    let mut g = Graph::no_grad();
    let f = bb.extract(&mut g, store, img).unwrap();
    let v = g.value(f.flat);
    let norms = (0..f.h * f.w).map(|i| v.row(i).iter().map(|a| a * a).sum::<f64>().sqrt()).collect();
    (norms, f.w)
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
}

#[test]
fn shifting_a_blob_by_one_stride_shifts_the_dominant_cell() {
    let cfg = BackboneConfig {
        in_channels: 1,
        widths: [4, 6],
        downsample: 4,
    };
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, "bb", &cfg, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let size = 64;
    let (cy, cx) = (29, 26);
    let (base, w) = cell_norms(&bb, &store, &blob_image(size, cy, cx));
    let i0 = argmax(&base);
    for (dy, dx) in [(4, 0), (0, 4), (4, 4)] {
        let (moved, _) = cell_norms(&bb, &store, &blob_image(size, cy + dy, cx + dx));
        let i1 = argmax(&moved);
        assert_eq!((i1 / w, i1 % w), (i0 / w + dy / 4, i0 % w + dx / 4));
        assert!((moved[i1] - base[i0]).abs() < 1e-12);
    }
}
