use std::f64::consts::LN_2;

use mslt::analysis::{capture, drift, js_divergence, special_mass};
use mslt::data::{random_batch, Batch};
use mslt::model::{build_model, ModelConfig};
use proptest::prelude::*;

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// `H(M) - (H(P) + H(Q)) / 2`, an independent route to the same quantity.
fn js_by_entropy(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    entropy(&m) - 0.5 * (entropy(p) + entropy(q))
}

fn distribution(weights: Vec<f64>) -> Vec<f64> {
    let s: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / s).collect()
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..30).prop_flat_map(|n| {
        let w = prop::collection::vec(prop_oneof![Just(0.0), 1e-9f64..1.0], n);
        (w.clone(), w).prop_filter("non-empty support", |(a, b)| {
            a.iter().sum::<f64>() > 0.0 && b.iter().sum::<f64>() > 0.0
        })
    })
}

proptest! {
    #[test]
    fn js_is_symmetric_bounded_and_matches_entropy_form((a, b) in pair()) {
        let (p, q) = (distribution(a), distribution(b));
        let pq = js_divergence(&p, &q).unwrap();
        let qp = js_divergence(&q, &p).unwrap();
        prop_assert!((pq - qp).abs() < 1e-15);
        prop_assert!((0.0..=LN_2).contains(&pq));
        prop_assert!((pq - js_by_entropy(&p, &q).clamp(0.0, LN_2)).abs() < 1e-12);
        prop_assert!(js_divergence(&p, &p).unwrap().abs() < 1e-15);
    }
}

#[test]
fn disjoint_supports_reach_ln2() {
    assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - LN_2).abs() < 1e-15);
    assert!(js_divergence(&[0.5, 0.4], &[0.5, 0.5]).is_err());
    assert!(js_divergence(&[1.0], &[0.5, 0.5]).is_err());
}

fn probes() -> Batch {
    Batch::from_pairs(&[(vec![7, 8, 9], vec![10, 11]), (vec![12], vec![13, 14, 15, 16])], 10).unwrap()
}

#[test]
fn drift_of_a_model_with_itself_is_zero() {
    let mut c = ModelConfig::tiny(4, 8, 2, 32, 16);
    c.num_stages = 2;
    let m = build_model(&c, 1).unwrap();
    let a = capture(&m, &probes(), "p").unwrap();
    let d = drift(&a, &a, 0..4).unwrap();
    assert!(d.values.iter().flatten().all(|&v| v == 0.0));
    let other = capture(&build_model(&c, 2).unwrap(), &probes(), "p").unwrap();
    assert!(drift(&a, &other, 0..4).unwrap().mean() > 0.0);
    assert!(drift(&a, &other, 2..5).is_err());
}

#[test]
fn drift_over_shared_range_of_different_depths() {
    let mut c = ModelConfig::tiny(4, 8, 2, 32, 16);
    c.num_stages = 2;
    let shallow = mslt::model::Model::new(c.clone(), 2, 1).unwrap();
    let deep = build_model(&c, 1).unwrap();
    let (a, b) = (capture(&shallow, &probes(), "p").unwrap(), capture(&deep, &probes(), "p").unwrap());
    // initialization is keyed by parameter path, so shared layers agree
    let d = drift(&a, &b, 0..2).unwrap();
    assert!(d.values.iter().flatten().all(|&v| v == 0.0));
    assert!(drift(&a, &b, 0..3).is_err());
}

#[test]
fn special_mass_is_a_fraction_per_head() {
    let mut c = ModelConfig::tiny(2, 8, 2, 32, 16);
    c.num_stages = 1;
    let m = build_model(&c, 1).unwrap();
    let map = capture(&m, &random_batch(32, 3, 12, 1), "r").unwrap();
    let sm = special_mass(&map);
    assert_eq!(sm.len(), 4);
    assert!(sm.iter().all(|s| s.cls >= 0.0 && s.sep >= 0.0 && s.cls + s.sep <= 1.0 + 1e-12));
}
