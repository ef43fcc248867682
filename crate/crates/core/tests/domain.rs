use std::sync::Arc;

use besselab::domain::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lam(v: f64) -> LambdaParam {
    LambdaParam::new(v).unwrap()
}

fn iv(a: f64, b: f64) -> Interval {
    Interval::new(a, b).unwrap()
}

#[test]
fn measures() {
    assert!((measure_interval(lam(1.0), &iv(0.0, 1.0)) - 1.0 / 3.0).abs() < 1e-15);
    assert!((measure_interval(lam(1.0), &iv(1.0, 2.0)) - 7.0 / 3.0).abs() < 1e-15);
    assert!((measure_interval(lam(0.5), &iv(0.0, 2.0)) - 2.0).abs() < 1e-15);
    assert!(LambdaParam::new(0.0).is_err() && LambdaParam::new(-1.0).is_err());
    assert!(Interval::new(1.0, 1.0).is_err() && Interval::new(-0.5, 1.0).is_err());
    // A ball reaching past the origin is clipped.
    let b = Interval::ball(0.5, 1.0).unwrap();
    assert_eq!((b.left, b.right), (0.0, 1.5));
}

#[test]
fn doubling() {
    // (0,1) is I(1/2, 1/2); its double I(1/2, 1) clips to (0, 3/2).
    assert!((doubling_ratio(lam(1.0), &iv(0.0, 1.0)) - 3.375).abs() < 1e-12);
    // I(1, 0.5) doubles to (0, 2).
    let want = measure_interval(lam(1.0), &iv(0.0, 2.0)) / measure_interval(lam(1.0), &iv(0.5, 1.5));
    assert!((doubling_ratio(lam(1.0), &iv(0.5, 1.5)) - want).abs() < 1e-12);
    for l in [0.3, 1.0, 2.5] {
        let r = doubling_ratio(lam(l), &Interval::ball(3.0, 1e-6).unwrap());
        assert!((r - 2.0).abs() < 1e-5);
        // Balls with x ≥ t stay below 2^{2λ+1}; clipped ones stay finite.
        for k in 0..40 {
            let t = 0.05 * (k + 1) as f64;
            let x = 1.0;
            let r = doubling_ratio(lam(l), &Interval::ball(x, t).unwrap());
            if t <= x {
                assert!(r <= 2f64.powf(2.0 * l + 1.0) * (1.0 + 1e-12));
            }
            assert!(r.is_finite() && r <= 2f64.powf(2.0 * l + 1.0) * 2.0);
        }
    }
}

#[test]
fn children() {
    let (a, b) = dyadic_children(&iv(0.0, 1.0));
    assert_eq!((a.left, a.right, b.left, b.right), (0.0, 0.5, 0.5, 1.0));
    let (a, b) = dyadic_children(&iv(1.0, 3.0));
    assert_eq!((a.left, a.right, b.left, b.right), (1.0, 2.0, 2.0, 3.0));
    let (a, b) = dyadic_children(&iv(0.0, 1.0));
    assert!((measure_interval(lam(1.0), &a) - 1.0 / 24.0).abs() < 1e-15);
    assert!((measure_interval(lam(1.0), &b) - 7.0 / 24.0).abs() < 1e-15);
}

#[test]
fn grids() {
    for spacing in [Spacing::Uniform, Spacing::Geometric] {
        let spec = GridSpec {
            lambda: 1.5,
            x_min: 0.1,
            x_max: 10.0,
            cells: 37,
            spacing,
        };
        let g = WeightedGrid::from_spec(&spec).unwrap();
        assert_eq!(g.len(), 37);
        let total = measure_interval(lam(1.5), &iv(0.1, 10.0));
        assert!((g.total_measure() / total - 1.0).abs() < 1e-12);
        assert!(g.measures().iter().all(|&m| m > 0.0));
        for (k, w) in g.boundaries().windows(2).enumerate() {
            assert!((g.nodes()[k] - 0.5 * (w[0] + w[1])).abs() < 1e-15);
        }
    }
    let json = r#"{"lambda": 1.0, "x_min": 0.0, "x_max": 2.0, "cells": 4, "spacing": "uniform"}"#;
    let spec: GridSpec = serde_json::from_str(json).unwrap();
    let g = WeightedGrid::from_spec(&spec).unwrap();
    assert!((g.measures()[0] - 0.125 / 3.0).abs() < 1e-15);
    assert!(WeightedGrid::geometric(lam(1.0), 0.0, 1.0, 4).is_err());
    assert!(WeightedGrid::from_boundaries(lam(1.0), vec![0.0, 1.0, 1.0]).is_err());
    let r = WeightedGrid::refined_toward(lam(1.0), 0.0, 2.0, 4, 1.0, 3).unwrap();
    assert!(r.boundaries().iter().any(|&x| (x - 1.0 + 0.5f64.powi(4)).abs() < 1e-14));
    assert!((r.total_measure() - 8.0 / 3.0).abs() < 1e-12);
}

#[test]
fn inner_products_and_norms() {
    let g = Arc::new(WeightedGrid::uniform(lam(1.0), 0.0, 2.0, 16).unwrap());
    let chi = GridFunction::sample_line(&g, |x| if x < 1.0 { 1.0 } else { 0.0 });
    assert!((weighted_inner_product(&chi, &chi).unwrap() - 1.0 / 3.0).abs() < 1e-14);
    assert!((lp_norm(&chi, 1.0) - 1.0 / 3.0).abs() < 1e-14);
    assert_eq!(lp_norm(&chi, f64::INFINITY), 1.0);
    let other = GridFunction::sample_line(&g, |x| if x < 1.0 { 0.0 } else { x });
    assert_eq!(weighted_inner_product(&chi, &other).unwrap(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dom = Domain::Product(g.clone(), g.clone());
    let mut f = GridFunction::zeros(&dom);
    let mut h = GridFunction::zeros(&dom);
    for k in 0..f.values.len() {
        f.values[k] = rng.gen_range(-1.0..1.0);
        h.values[k] = rng.gen_range(-1.0..1.0);
    }
    let w = g.measures();
    let mut want = 0.0;
    for i in 0..16 {
        for j in 0..16 {
            want += f.values[i * 16 + j] * h.values[i * 16 + j] * w[i] * w[j];
        }
    }
    assert!((weighted_inner_product(&f, &h).unwrap() - want).abs() < 1e-13);
    assert!((lp_norm(&f, 2.0).powi(2) - weighted_inner_product(&f, &f).unwrap()).abs() < 1e-13);

    let other_grid = Arc::new(WeightedGrid::uniform(lam(1.0), 0.0, 2.0, 15).unwrap());
    let mism = GridFunction::sample_line(&other_grid, |x| x);
    assert!(weighted_inner_product(&chi, &mism).is_err());
}

proptest! {
    #[test]
    fn measure_is_additive(l in 0.1f64..4.0, a in 0.0f64..5.0, len in 1e-3f64..5.0, s in 0.01f64..0.99) {
        let i = iv(a, a + len);
        let m = a + s * len;
        let whole = measure_interval(lam(l), &i);
        let parts = measure_interval(lam(l), &iv(a, m)) + measure_interval(lam(l), &iv(m, a + len));
        prop_assert!((whole - parts).abs() <= 1e-12 * whole);
    }
}
