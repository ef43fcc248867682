use std::sync::Arc;

use besselab::domain::*;
use besselab::kernel::{riesz_kernel, riesz_of_indicator, KernelConfig};
use besselab::operators::*;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lam(v: f64) -> LambdaParam {
    LambdaParam::new(v).unwrap()
}

fn random(dom: &Domain, rng: &mut ChaCha8Rng) -> GridFunction {
    let mut f = GridFunction::zeros(dom);
    for v in f.values.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    f
}

fn close(a: &GridFunction, b: &GridFunction, tol: f64) -> bool {
    let s = a.max_abs().max(b.max_abs()).max(1e-300);
    a.values.iter().zip(&b.values).all(|(x, y)| (x - y).abs() <= tol * s)
}

struct Setup {
    dom: Domain,
    r1: DiscreteOperator,
    r2: DiscreteOperator,
}

fn product_setup(n: usize) -> Setup {
    let g = Arc::new(WeightedGrid::geometric(lam(1.0), 0.1, 10.0, n).unwrap());
    let h = Arc::new(WeightedGrid::geometric(lam(1.0), 0.2, 5.0, n + 1).unwrap());
    let dom = Domain::Product(g.clone(), h.clone());
    let kc = KernelConfig::new(lam(1.0));
    let a = build_riesz(&g, &kc, DiagonalPolicy::Zero).unwrap();
    let b = build_riesz(&h, &kc, DiagonalPolicy::Zero).unwrap();
    Setup {
        r1: tensor_lift(&a, Axis::First, &dom).unwrap(),
        r2: tensor_lift(&b, Axis::Second, &dom).unwrap(),
        dom,
    }
}

#[test]
fn riesz_tables() {
    let g = Arc::new(WeightedGrid::geometric(lam(1.0), 0.1, 10.0, 12).unwrap());
    let kc = KernelConfig::new(lam(1.0));
    let r = build_riesz(&g, &kc, DiagonalPolicy::Zero).unwrap();
    let t = r.table().unwrap();
    let x = g.nodes();
    for j in 0..12 {
        assert_eq!(t[j * 12 + j], 0.0);
        for k in 0..12 {
            if j != k {
                assert_eq!(t[j * 12 + k], riesz_kernel(&kc, x[j], x[k]).unwrap());
            }
        }
    }
    assert_eq!(r.diagonal_policy, Some(DiagonalPolicy::Zero));
    // Constant input: direct summation.
    let one = GridFunction::constant(&Domain::Line(g.clone()), 1.0);
    let out = r.apply(&one).unwrap();
    for j in 0..12 {
        let want: f64 = (0..12).map(|k| t[j * 12 + k] * g.measures()[k]).sum();
        assert!(out.values[j].is_finite() && (out.values[j] - want).abs() <= 1e-14 * want.abs().max(1.0));
    }
    let pc = build_riesz(&g, &kc, DiagonalPolicy::PairCancellation).unwrap();
    let tp = pc.table().unwrap();
    assert!((tp[5 * 12 + 5] + 0.5 * (tp[5 * 12 + 4] + tp[5 * 12 + 6])).abs() < 1e-15);
    assert!(build_riesz(&g, &KernelConfig::new(lam(2.0)), DiagonalPolicy::Zero).is_err());
    let csv = r.to_csv();
    assert!(csv.starts_with("row,col,entry\n") && csv.lines().count() == 1 + 144);
}

#[test]
fn riesz_of_bump_converges_under_refinement() {
    // Successive refinements of a smooth bump move closer together.
    let kc = KernelConfig::new(lam(1.0));
    let mut errs = vec![];
    for n in [32, 64, 128] {
        let g = Arc::new(WeightedGrid::uniform(lam(1.0), 0.0, 4.0, n).unwrap());
        let r = build_riesz(&g, &kc, DiagonalPolicy::Zero).unwrap();
        let f = GridFunction::sample_line(&g, |x| (-(x - 2.0) * (x - 2.0) * 4.0).exp());
        let rf = r.apply(&f).unwrap();
        errs.push(rf);
    }
    let to_coarse = |fine: &GridFunction, coarse: &GridFunction| -> f64 {
        let g = coarse.domain.line_grid().unwrap();
        let fg = fine.domain.line_grid().unwrap();
        let mut s = 0.0;
        for (k, &x) in g.nodes().iter().enumerate() {
            let j = fg.locate(x).unwrap();
            let v = 0.5 * (fine.values[j] + fine.values[(j + 1).min(fg.len() - 1)]);
            s += (v - coarse.values[k]).powi(2) * g.measures()[k];
        }
        s.sqrt() / lp_norm(coarse, 2.0)
    };
    let d1 = to_coarse(&errs[1], &errs[0]);
    let d2 = to_coarse(&errs[2], &errs[1]);
    assert!(d2 < d1, "{d1} {d2}");
    let i = Interval::new(1.0, 2.0).unwrap();
    assert!(riesz_of_indicator(&kc, 0.98, &i).unwrap() > 0.0);
}

#[test]
fn adjunction() {
    let s = product_setup(6);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = random(&s.dom, &mut rng);
    let ops = [
        s.r1.clone(),
        s.r1.compose(&s.r2).unwrap(),
        commutator(&b, &s.r1).unwrap(),
        iterated_commutator(&b, &s.r1, &s.r2).unwrap(),
    ];
    for op in &ops {
        for _ in 0..5 {
            let f = random(&s.dom, &mut rng);
            let g = random(&s.dom, &mut rng);
            let lhs = weighted_inner_product(&op.apply(&f).unwrap(), &g).unwrap();
            let rhs = weighted_inner_product(&f, &adjoint(op).apply(&g).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
        let twice = op.adjoint().adjoint();
        assert_eq!(twice.materialize(), op.materialize());
    }
    let m = multiplication_operator(&b);
    assert_eq!(m.adjoint().materialize(), m.materialize());
}

#[test]
fn lifts() {
    let s = product_setup(5);
    let (g1, g2) = s.dom.axes().unwrap();
    let id1 = DiscreteOperator::identity(&Domain::Line(g1.clone()));
    let lifted = tensor_lift(&id1, Axis::First, &s.dom).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = random(&s.dom, &mut rng);
    assert_eq!(lifted.apply(&f).unwrap().values, f.values);

    let kc = KernelConfig::new(lam(1.0));
    let a = build_riesz(g1, &kc, DiagonalPolicy::Zero).unwrap();
    let f1 = random(&Domain::Line(g1.clone()), &mut rng);
    let f2 = random(&Domain::Line(g2.clone()), &mut rng);
    let sep = GridFunction::tensor(&f1, &f2).unwrap();
    let want = GridFunction::tensor(&a.apply(&f1).unwrap(), &f2).unwrap();
    assert!(close(&s.r1.apply(&sep).unwrap(), &want, 1e-12));
    let ab = s.r1.compose(&s.r2).unwrap().apply(&f).unwrap();
    let ba = s.r2.compose(&s.r1).unwrap().apply(&f).unwrap();
    assert!(close(&ab, &ba, 1e-12));
    assert!(tensor_lift(&a, Axis::Second, &s.dom).is_err());
}

#[test]
fn commutator_identities() {
    let s = product_setup(5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let b = random(&s.dom, &mut rng);
    let f = random(&s.dom, &mut rng);
    let c = GridFunction::constant(&s.dom, 3.0);
    assert!(commutator(&c, &s.r1).unwrap().apply(&f).unwrap().max_abs() < 1e-12 * f.max_abs() * 100.0);
    let id = DiscreteOperator::identity(&s.dom);
    assert_eq!(commutator(&b, &id).unwrap().apply(&f).unwrap().max_abs(), 0.0);

    let r12 = s.r1.compose(&s.r2).unwrap();
    let lhs = commutator(&b, &r12).unwrap().apply(&f).unwrap();
    let rhs = s
        .r1
        .compose(&commutator(&b, &s.r2).unwrap())
        .unwrap()
        .add(&commutator(&b, &s.r1).unwrap().compose(&s.r2).unwrap())
        .unwrap()
        .apply(&f)
        .unwrap();
    assert!(close(&lhs, &rhs, 1e-12));

    // b(x₁) alone commutes with R₂.
    let b1 = GridFunction::sample(&s.dom, |x, _| x.ln());
    assert!(iterated_commutator(&b1, &s.r1, &s.r2).unwrap().apply(&f).unwrap().max_abs() < 1e-12 * 1e3);
    // Four-term expansion.
    let m = |g: &GridFunction| g.mul(&b).unwrap();
    let t12 = r12.apply(&f).unwrap();
    let direct = m(&t12)
        .sub(&s.r1.apply(&m(&s.r2.apply(&f).unwrap())).unwrap())
        .unwrap()
        .sub(&s.r2.apply(&m(&s.r1.apply(&f).unwrap())).unwrap())
        .unwrap()
        .add(&r12.apply(&m(&f)).unwrap())
        .unwrap();
    let it = iterated_commutator(&b, &s.r1, &s.r2).unwrap().apply(&f).unwrap();
    assert!(close(&it, &direct, 1e-12));
}

/// Largest singular value of `W^{1/2} A W^{1/2}`.
fn svd_norm(op: &DiscreteOperator) -> f64 {
    let n = op.domain().len();
    let w = op.domain().weights();
    let t = op.materialize();
    let m = DMatrix::from_fn(n, n, |j, k| w[j].sqrt() * t[j * n + k] * w[k].sqrt());
    m.singular_values().max()
}

#[test]
fn norms() {
    let g = Arc::new(WeightedGrid::geometric(lam(1.0), 0.1, 10.0, 30).unwrap());
    let dom = Domain::Line(g.clone());
    assert!((operator_norm(&DiscreteOperator::identity(&dom), 1e-12).unwrap() - 1.0).abs() < 1e-12);
    let b = GridFunction::sample_line(&g, |x| (x * 2.0).sin() * 3.0);
    let nb = operator_norm(&multiplication_operator(&b), 1e-12).unwrap();
    assert!((nb - b.max_abs()).abs() < 1e-4 * b.max_abs());
    let zero = GridFunction::zeros(&dom);
    assert_eq!(operator_norm(&multiplication_operator(&zero), 1e-9).unwrap(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let table: Vec<f64> = (0..900).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let a = DiscreteOperator::from_table(&dom, table).unwrap();
    let got = operator_norm(&a, 1e-12).unwrap();
    assert!((got / svd_norm(&a) - 1.0).abs() < 1e-5);

    let kc = KernelConfig::new(lam(1.0));
    let r = build_riesz(&g, &kc, DiagonalPolicy::Zero).unwrap();
    let got = operator_norm(&r, 1e-12).unwrap();
    assert!((got / svd_norm(&r) - 1.0).abs() < 1e-5);
    let ar = a.compose(&r).unwrap();
    assert!(operator_norm(&ar, 1e-12).unwrap() <= svd_norm(&a) * svd_norm(&r) * (1.0 + 1e-10));
    assert!(operator_norm_with(&a, &PowerIteration { tol: 1e-15, max_iter: 2, seed: 1 }).is_err());
}

#[test]
fn riesz_norm_stable_under_refinement() {
    let kc = KernelConfig::new(lam(1.0));
    let norms: Vec<f64> = [16, 32, 64]
        .iter()
        .map(|&n| {
            let g = Arc::new(WeightedGrid::geometric(lam(1.0), 0.1, 10.0, n).unwrap());
            operator_norm(&build_riesz(&g, &kc, DiagonalPolicy::Zero).unwrap(), 1e-9).unwrap()
        })
        .collect();
    let (lo, hi) = norms.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(hi / lo < 1.5, "{norms:?}");
}
