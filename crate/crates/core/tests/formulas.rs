mod common;

use common::*;
use mssl_core::grid::{cosine_sim, gap, inner_product_map, norm};
use mssl_core::objectives::{avc_loss, avc_terms, osc_loss};
use mssl_core::sarl::{
    negative_vector, self_maps, sim_map, soft_mask, sound_assoc_features, SarlConfig,
};
use mssl_core::{FeatureGrid, VectorBatch};
use proptest::prelude::*;

#[test]
fn avc_matches_literal_formula() {
    let cfg = SarlConfig::default();
    let mut r = rng(11);
    for _ in 0..300 {
        let (v, a) = random_avc_instance(&mut r);
        let got = avc_loss(&v, &a, &cfg).unwrap().value;
        let want = literal_avc(&v, &a, cfg.alpha, cfg.omega);
        assert!(rel_err(got, want) < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn avc_matches_literal_formula_at_other_mask_settings() {
    let mut r = rng(12);
    for i in 0..200 {
        let cfg = SarlConfig {
            alpha: [0.05, 0.2, 0.65][i % 3],
            omega: [0.03, 0.1, 0.5][(i / 3) % 3],
            ..SarlConfig::default()
        };
        let (v, a) = random_avc_instance(&mut r);
        let got = avc_loss(&v, &a, &cfg).unwrap().value;
        let want = literal_avc(&v, &a, cfg.alpha, cfg.omega);
        assert!(rel_err(got, want) < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn osc_matches_literal_formula() {
    let mut r = rng(13);
    for _ in 0..1000 {
        let s = random_osc_structure(&mut r);
        let got = osc_loss(&s).unwrap().value;
        let want = literal_osc(&s);
        assert!(
            rel_err(got, want) < 1e-10 || (got - want).abs() < 1e-15,
            "{got} vs {want}"
        );
    }
}

#[test]
fn gap_of_three_by_three_grid() {
    let data: Vec<f64> = (0..36).map(f64::from).collect();
    let g = FeatureGrid::new(1, 3, 3, 4, data.clone()).unwrap();
    let pooled = gap(&g);
    for ch in 0..4 {
        let want = (0..9).map(|k| data[k * 4 + ch]).sum::<f64>() / 9.0;
        assert!((pooled.row(0)[ch] - want).abs() < 1e-12);
    }
}

#[test]
fn inner_product_map_matches_loops() {
    let mut r = rng(14);
    let (b, h, w, c) = (2, 3, 4, 5);
    let v = FeatureGrid::new(b, h, w, c, gaussian_vec(&mut r, b * h * w * c)).unwrap();
    let p = VectorBatch::new(b, c, gaussian_vec(&mut r, b * c)).unwrap();
    let m = inner_product_map(&v, &p).unwrap();
    for s in 0..b {
        for i in 0..h {
            for j in 0..w {
                let mut want = 0.0;
                for ch in 0..c {
                    want += v.cell(s, i, j)[ch] * p.row(s)[ch];
                }
                assert!((m.get(s, i, j) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn cross_maps_use_the_image_self_denominator() {
    let mut r = rng(15);
    for _ in 0..50 {
        let (v, a) = random_avc_instance(&mut r);
        let cells = cells_of(&v);
        let rows = rows_of(&a);
        for n in 0..v.batch() {
            for m in 0..v.batch() {
                let got = sim_map(&v, &a, n, m).unwrap();
                let want = literal_sim(&cells, &rows, n, m);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
                }
            }
        }
    }
}

#[test]
fn background_probe_is_mean_of_low_mask_cells() {
    let mut r = rng(16);
    let cfg = SarlConfig {
        alpha: 0.08,
        ..SarlConfig::default()
    };
    for _ in 0..50 {
        let (v, a) = random_avc_instance(&mut r);
        let maps = self_maps(&v, &a).unwrap();
        let neg = negative_vector(&v, &maps, &cfg).unwrap();
        for b in 0..v.batch() {
            let mask = soft_mask(maps.plane(b), &cfg);
            let bg: Vec<usize> = (0..v.cells()).filter(|&k| mask[k] < 0.5).collect();
            assert_eq!(neg.background[b], bg);
            assert_eq!(neg.empty[b], bg.is_empty());
            for ch in 0..v.channels() {
                let want = if bg.is_empty() {
                    0.0
                } else {
                    bg.iter().map(|&k| v.cell_linear(b, k)[ch]).sum::<f64>() / bg.len() as f64
                };
                assert!((neg.vectors.row(b)[ch] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn avc_terms_reproduce_the_loss() {
    let cfg = SarlConfig::default();
    let mut r = rng(17);
    for _ in 0..100 {
        let (v, a) = random_avc_instance(&mut r);
        let t = avc_terms(&v, &a, &cfg).unwrap();
        let want = t
            .pos
            .iter()
            .zip(&t.neg)
            .map(|(p, n)| (1.0 + (n - p).exp()).ln())
            .sum::<f64>()
            / v.batch() as f64;
        let got = avc_loss(&v, &a, &cfg).unwrap().value;
        assert!(rel_err(got, want) < 1e-10);
    }
}

#[test]
fn avc_grows_with_negative_and_shrinks_with_positive() {
    // Holding one logit fixed, the loss is monotone in the other.
    let f = |pos: f64, neg: f64| (1.0 + (neg - pos).exp()).ln();
    let mut last = f(0.0, -5.0);
    for i in -49..=50 {
        let cur = f(0.0, i as f64 / 10.0);
        assert!(cur > last);
        last = cur;
    }
    assert!((f(0.3, 0.3) - std::f64::consts::LN_2).abs() < 1e-15);
}

fn small_grid() -> impl Strategy<Value = (FeatureGrid, VectorBatch)> {
    (1usize..4, 1usize..4, 1usize..4, 2usize..5).prop_flat_map(|(b, h, w, c)| {
        (
            proptest::collection::vec(0.05f64..1.0, b * h * w * c),
            proptest::collection::vec(0.05f64..1.0, b * c),
        )
            .prop_map(move |(vd, ad)| {
                (
                    FeatureGrid::new(b, h, w, c, vd).unwrap(),
                    VectorBatch::new(b, c, ad).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn cosine_symmetric_and_scale_invariant(
        a in proptest::collection::vec(-1.0f64..1.0, 4),
        b in proptest::collection::vec(-1.0f64..1.0, 4),
        s in 0.01f64..100.0,
    ) {
        prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
        let ab = cosine_sim(&a, &b).unwrap();
        prop_assert!((ab - cosine_sim(&b, &a).unwrap()).abs() < 1e-12);
        let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
        prop_assert!((ab - cosine_sim(&scaled, &b).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn self_maps_sum_to_one((v, a) in small_grid()) {
        let maps = self_maps(&v, &a).unwrap();
        for b in 0..v.batch() {
            prop_assert!((maps.plane(b).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn assoc_features_scale_each_cell((v, a) in small_grid()) {
        let maps = self_maps(&v, &a).unwrap();
        let f_hat = sound_assoc_features(&v, &maps).unwrap();
        for b in 0..v.batch() {
            for k in 0..v.cells() {
                let s = maps.plane(b)[k];
                let want = s.abs() * norm(v.cell_linear(b, k));
                prop_assert!((norm(f_hat.cell_linear(b, k)) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn avc_is_positive_and_finite((v, a) in small_grid()) {
        let l = avc_loss(&v, &a, &SarlConfig::default()).unwrap().value;
        prop_assert!(l.is_finite() && l > 0.0);
    }

    #[test]
    fn osc_ignores_vector_scale(seed in 0u64..1000, s in 0.01f64..100.0) {
        let mut st = random_osc_structure(&mut rng(seed));
        let before = osc_loss(&st).unwrap().value;
        for v in st.samples.iter_mut().flat_map(|x| x.vectors.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= s);
        }
        prop_assert!((osc_loss(&st).unwrap().value - before).abs() < 1e-12);
    }

    #[test]
    fn osc_lies_in_minus_one_three(seed in 0u64..1000) {
        let l = osc_loss(&random_osc_structure(&mut rng(seed))).unwrap().value;
        prop_assert!((-1.0 - 1e-12..=3.0 + 1e-12).contains(&l));
    }
}
