mod common;

use common::*;
use maskvit_core::eval::*;
use maskvit_core::heatmap::*;
use maskvit_core::hvit::{HierarchicalVit, Masking};
use rand::Rng;

/// Pairwise form of the weighted kappa: observed disagreement averages
/// w(t_n, p_n); expected disagreement averages w(t_n, p_m) over all pairs.
fn brute_kappa(t: &[u8], p: &[u8], k: usize) -> f64 {
    let w = |a: u8, b: u8| ((a as f64 - b as f64).powi(2)) / ((k - 1) as f64).powi(2);
    let n = t.len() as f64;
    let observed: f64 = t.iter().zip(p).map(|(&a, &b)| w(a, b)).sum::<f64>() / n;
    let mut expected = 0.0;
    for &a in t {
        for &b in p {
            expected += w(a, b);
        }
    }
    expected /= n * n;
    if expected == 0.0 {
        1.0
    } else {
        1.0 - observed / expected
    }
}

#[test]
fn kappa_matches_pairwise_oracle() {
    let mut r = rng(1);
    for _ in 0..300 {
        let n = r.gen_range(1..200);
        let t: Vec<u8> = (0..n).map(|_| r.gen_range(0..6)).collect();
        let p: Vec<u8> = (0..n).map(|_| r.gen_range(0..6)).collect();
        let got = quadratic_weighted_kappa(&t, &p, 6).unwrap();
        assert!((got - brute_kappa(&t, &p, 6)).abs() < 1e-12);
    }
    let rev = quadratic_weighted_kappa(&[0, 1, 2, 3, 4, 5], &[5, 4, 3, 2, 1, 0], 6).unwrap();
    assert!((rev - brute_kappa(&[0, 1, 2, 3, 4, 5], &[5, 4, 3, 2, 1, 0], 6)).abs() < 1e-12);
}

#[test]
fn constant_predictor_scores_zero() {
    let cfg = tiny_config(3);
    let mut model = HierarchicalVit::new(cfg.clone()).unwrap();
    model.head.zero(&mut model.store);
    model.store.get_mut(model.head.bias).tensor.data_mut()[0] = 2.2;
    let mut r = rng(4);
    let data: Vec<_> = (0..12).map(|i| random_sample(&mut r, &cfg, 2, 0.3, (i % 6) as u8)).collect();
    let ev = evaluate(&model, &data, Masking::On).unwrap();
    assert!(ev.predictions.iter().all(|p| p.score == 2));
    let t: Vec<u8> = data.iter().map(|s| s.label).collect();
    let oracle = brute_kappa(&t, &[2; 12], 6);
    assert!((ev.kappa.value - oracle).abs() < 1e-12);
    assert!(ev.kappa.value <= 0.0);
    assert_eq!(ev.confusion.total(), 12);
    assert_eq!(ev.confusion.kappa(), ev.kappa);
}

#[test]
fn model_heatmaps_obey_zero_law() {
    let cfg = maskvit_core::hvit::ModelConfig {
        region_size: 8,
        ..tiny_config(5)
    };
    let model = HierarchicalVit::new(cfg.clone()).unwrap();
    let mut r = rng(6);
    let s = random_sample(&mut r, &cfg, 3, 0.5, 1);
    let last = cfg.region_depth - 1;
    for masking in [Masking::On, Masking::Off] {
        let attn = model.region_attention(&s, masking, last).unwrap();
        for m in 0..3 {
            let w = region_slice(&attn, m).unwrap();
            let hm = region_heatmap(&w, &s.tissue[m], 8, 2, masking, last).unwrap();
            for j in 0..16 {
                let v = hm.get((j % 4) * 2, (j / 4) * 2);
                let zero = v == 0.0;
                match masking {
                    Masking::On => assert_eq!(zero, s.tissue[m].is_background(j)),
                    Masking::Off => assert!(!zero),
                }
            }
        }
    }
}
