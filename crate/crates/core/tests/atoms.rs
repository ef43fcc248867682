use std::sync::Arc;

use besselab::atoms::*;
use besselab::domain::{lp_norm, Domain, GridFunction, Interval, LambdaParam, Rectangle, WeightedGrid};
use besselab::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lam(v: f64) -> LambdaParam {
    LambdaParam::new(v).unwrap()
}

fn rect(a: f64, b: f64, c: f64, d: f64) -> Rectangle {
    Rectangle::new(Interval::new(a, b).unwrap(), Interval::new(c, d).unwrap())
}

fn square_grid(l: f64, x0: f64, x1: f64, n: usize) -> (Arc<WeightedGrid>, Domain) {
    let g = Arc::new(WeightedGrid::uniform(lam(l), x0, x1, n).unwrap());
    (g.clone(), Domain::Product(g.clone(), g))
}

/// Mean-zero random (1,q)-atom on a cell block, normalized to the size bound.
fn random_atom(dom: &Domain, block: CellRect, q: f64, rng: &mut ChaCha8Rng) -> Atom {
    let (g1, g2) = dom.axes().unwrap();
    let n2 = g2.len();
    let mut f = GridFunction::zeros(dom);
    for c in block.cells(n2) {
        f.values[c] = rng.gen_range(-1.0..1.0);
    }
    let hot = block.rows.0 * n2 + block.cols.0;
    f.values[hot] += rng.gen_range(0.0..8.0);
    let m = f.integral() / block.measure(g1, g2);
    for c in block.cells(n2) {
        f.values[c] -= m;
    }
    let s = block.span(g1, g2);
    let mu = s.measure(dom.lambda());
    let scale = lp_norm(&f, q) * mu.powf(1.0 - 1.0 / q);
    Atom::new(s, f.scale(1.0 / scale), q).unwrap()
}

#[test]
fn validation_examples() {
    let (_, dom) = square_grid(1.0, 0.0, 4.0, 8);
    let r = rect(1.0, 3.0, 1.0, 2.0);
    let split = 2.0;
    let (mu_l, mu_r) = (
        rect(1.0, split, 1.0, 2.0).measure(lam(1.0)),
        rect(split, 3.0, 1.0, 2.0).measure(lam(1.0)),
    );
    let raw = GridFunction::sample(&dom, |x, y| {
        if !r.contains(x, y) {
            0.0
        } else if x < split {
            1.0
        } else {
            -mu_l / mu_r
        }
    });
    // Normalizer making ‖a‖_∞ = μ(R)⁻¹.
    let a = Atom::new(r, raw.scale(1.0 / (raw.max_abs() * r.measure(lam(1.0)))), f64::INFINITY).unwrap();
    let v = validate_atom(&a, 1e-12);
    assert!(v.passes(), "{v:?}");
    assert!((v.size.measured - v.size.bound / (1.0 + 1e-12)).abs() < 1e-12 * v.size.bound);

    let chi = GridFunction::sample(&dom, |x, y| if r.contains(x, y) { 1.0 / r.measure(lam(1.0)) } else { 0.0 });
    let v = validate_atom(&Atom::new(r, chi, f64::INFINITY).unwrap(), 1e-12);
    assert!(v.support.pass && v.size.pass && !v.cancellation.pass);

    let doubled = Atom::new(r, a.values.scale(2.0), f64::INFINITY).unwrap();
    let v = validate_atom(&doubled, 1e-12);
    assert!(!v.size.pass);
    assert!((v.size.measured / (v.size.bound / (1.0 + 1e-12)) - 2.0).abs() < 1e-12);

    let shrunk = Atom::new(rect(1.0, 2.0, 1.0, 2.0), a.values.clone(), f64::INFINITY).unwrap();
    assert!(!validate_atom(&shrunk, 1e-12).support.pass);
    assert!(Atom::new(r, a.values.clone(), 1.0).is_err());
}

/// Independent check of the cover properties, cell by cell.
fn audit_cover(u: &[bool], g: &WeightedGrid, cover: &WhitneyCover, c_tilde: f64) {
    let n = g.len();
    let mut count = vec![0usize; n * n];
    for q in &cover.squares {
        let side = q.rows.1 - q.rows.0;
        assert_eq!(side, q.cols.1 - q.cols.0);
        assert!(side.is_power_of_two() && q.rows.0 % side == 0 && q.cols.0 % side == 0);
        for i in q.rows.0..q.rows.1 {
            for j in q.cols.0..q.cols.1 {
                assert!(u[i * n + j], "square leaves U");
                count[i * n + j] += 1;
            }
        }
    }
    for k in 0..n * n {
        assert_eq!(count[k] == 1, u[k], "cover is not a partition of U at {k}");
    }
    // Overlap of the dilates, recomputed from real coordinates.
    let mut dil = vec![0usize; n * n];
    for q in &cover.squares {
        let r = q.span(g, g).dilate(c_tilde);
        for i in 0..n {
            for j in 0..n {
                if r.contains(g.nodes()[i], g.nodes()[j]) {
                    dil[i * n + j] += 1;
                }
            }
        }
    }
    assert_eq!(dil.iter().copied().max().unwrap(), cover.overlap);
    let escapes = cover.squares.iter().all(|q| {
        let r = q.span(g, g).dilate(3.0 * c_tilde);
        (0..n * n).any(|k| !u[k] && r.contains(g.nodes()[k / n], g.nodes()[k % n]))
    });
    assert_eq!(escapes, cover.escapes);
    assert!(cover.escapes);
}

#[test]
fn whitney_examples() {
    let (g, _) = square_grid(1.0, 0.0, 4.0, 16);
    let n = 16;
    let mut u = vec![false; n * n];
    for i in 4..8 {
        for j in 8..12 {
            u[i * n + j] = true;
        }
    }
    let c = whitney_cover(&u, &g, &g, 1.0).unwrap();
    assert_eq!(c.squares, vec![CellRect::new((4, 8), (8, 12))]);
    audit_cover(&u, &g, &c, 1.0);

    for i in 12..14 {
        for j in 0..2 {
            u[i * n + j] = true;
        }
    }
    let c = whitney_cover(&u, &g, &g, 1.0).unwrap();
    assert_eq!(c.squares.len(), 2);
    assert_eq!(c.overlap, 1);

    assert_eq!(whitney_cover(&vec![true; n * n], &g, &g, 3.0), Err(Error::NoComplement));
    let g12 = Arc::new(WeightedGrid::uniform(lam(1.0), 0.0, 4.0, 12).unwrap());
    assert!(matches!(whitney_cover(&vec![false; 144], &g12, &g12, 3.0), Err(Error::Precondition(_))));
}

#[test]
fn whitney_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for l in [0.5, 1.0, 2.0] {
        let (g, _) = square_grid(l, 0.0, 8.0, 32);
        for density in [0.1, 0.5, 0.9] {
            let mut u: Vec<bool> = (0..32 * 32).map(|_| rng.gen_bool(density)).collect();
            // Add a solid block so that large squares occur.
            for i in 8..24 {
                for j in 4..20 {
                    u[i * 32 + j] = true;
                }
            }
            u[0] = false;
            let c = whitney_cover(&u, &g, &g, 3.0).unwrap();
            audit_cover(&u, &g, &c, 3.0);
            assert!(c.overlap as f64 <= CzConfig::default().overlap_bound, "l {l} density {density}: {}", c.overlap);
        }
    }
}

#[test]
fn doubling_constants() {
    // λ → 0 on a uniform grid away from the boundary: the 9-dilate of one cell holds nine cells.
    let g = WeightedGrid::uniform(lam(1e-12), 0.0, 1.0, 64).unwrap();
    assert!((grid_dilation_constant(&g, 9.0) - 9.0).abs() < 1e-6);
    // A cell at the origin under x²dx: [0,h] dilates to [0,5h], ratio 5³.
    let g = WeightedGrid::uniform(lam(1.0), 0.0, 1.0, 64).unwrap();
    assert!((grid_dilation_constant(&g, 9.0) - 125.0).abs() < 1e-9);
    assert!((c_lambda(&g, &g) - 125.0 * 125.0).abs() < 1e-6);
}

#[test]
fn levelset_containment() {
    let (g, dom) = square_grid(1.0, 0.0, 4.0, 16);
    let r0 = rect(1.5, 2.5, 1.0, 2.0);
    let chi = GridFunction::sample(&dom, |x, y| if r0.contains(x, y) { 1.0 } else { 0.0 });
    assert!(levelset_containment_check(&chi, &r0, 10.0).unwrap());
    // Below the mean, M_s f exceeds α on cells adjacent to 3R₀.
    assert!(!levelset_containment_check(&chi, &r0, 0.05).unwrap());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut battery = Vec::new();
    for _ in 0..12 {
        let a = rng.gen_range(2..10);
        let b = rng.gen_range(2..10);
        let block = CellRect::new((a, a + rng.gen_range(1..5)), (b, b + rng.gen_range(1..5)));
        let r = block.span(&g, &g);
        let mut f = GridFunction::zeros(&dom);
        for c in block.cells(16) {
            f.values[c] = rng.gen_range(-3.0..3.0);
        }
        battery.push((f, r));
    }
    let c1 = calibrate_c1(&battery).unwrap();
    assert!(c1 > 0.0 && c1.is_finite());
    for (f, r) in &battery {
        let cells = CellRect::from_rectangle(&g, &g, r);
        let mean = cells.cells(16).map(|c| f.values[c].abs() * dom.weights()[c]).sum::<f64>() / cells.measure(&g, &g);
        assert!(levelset_containment_check(f, r, c1 * mean * (1.0 + 1e-12)).unwrap());
    }
}

#[test]
fn cz_decomposition() {
    let (_, dom) = square_grid(1.0, 0.0, 8.0, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = CzConfig {
        c1: 1.5,
        ..CzConfig::default()
    };
    // An ∞-atom is emitted as one term.
    let a = random_atom(&dom, CellRect::new((4, 8), (6, 9)), f64::INFINITY, &mut rng);
    let inf = Atom::new(a.support, a.values.clone(), 4.0).unwrap();
    let d = cz_atomic_decomposition(&inf, &cfg).unwrap();
    assert_eq!(d.terms.len(), 1);
    assert!(d.residual_norm <= 1e-8 * lp_norm(&inf.values, 1.0));
    assert!(d.reconstruction_error(&inf.values).unwrap() <= 1e-12 * lp_norm(&inf.values, 1.0));

    let mut sums = Vec::new();
    for _ in 0..8 {
        let r0 = rng.gen_range(2..9);
        let c0 = rng.gen_range(2..9);
        let block = CellRect::new((r0, r0 + rng.gen_range(2..6)), (c0, c0 + rng.gen_range(2..6)));
        let a = random_atom(&dom, block, 2.0, &mut rng);
        assert!(validate_atom(&a, 1e-9).passes());
        let d = cz_atomic_decomposition(&a, &cfg).unwrap();
        let l1 = lp_norm(&a.values, 1.0);
        assert!(d.reconstruction_error(&a.values).unwrap() <= d.residual_norm + 1e-10 * l1);
        for (alpha, atom) in &d.terms {
            assert!(*alpha > 0.0);
            assert!(validate_atom(atom, 1e-9).passes());
        }
        assert!(d.levels.iter().all(|l| l.slack_pointwise >= 0.0 && l.slack_pmean >= 0.0));
        sums.push(d.sum_abs_alpha());
    }
    let lo = sums.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sums.iter().copied().fold(0.0, f64::max);
    assert!(hi / lo < 10.0, "{sums:?}");

    let a = random_atom(&dom, CellRect::new((4, 8), (4, 8)), 2.0, &mut rng);
    let small = CzConfig {
        alpha: Some(1.5),
        ..cfg
    };
    assert!(matches!(cz_atomic_decomposition(&a, &small), Err(Error::Precondition(_))));
    let bad_p = CzConfig { p: 2.5, ..cfg };
    assert!(matches!(cz_atomic_decomposition(&a, &bad_p), Err(Error::Precondition(_))));

    let rec = export_terms(&d_terms(&a, &cfg), "atom-");
    let json = serde_json::to_value(&rec).unwrap();
    assert_eq!(json[0]["q"], "inf");
    assert_eq!(json[0]["values_ref"], "atom-0");
}

fn d_terms(a: &Atom, cfg: &CzConfig) -> Vec<(f64, Atom)> {
    cz_atomic_decomposition(a, cfg).unwrap().terms
}

/// Sums `Σ αᵢaᵢ` on the common refinement of all atom grids and compares with `f`.
fn two_rectangle_reconstruction(f: &GridFunction, terms: &[(f64, Atom)]) -> f64 {
    let l = f.domain.lambda();
    let mut b1: Vec<f64> = f.domain.axes().unwrap().0.boundaries().to_vec();
    let mut b2: Vec<f64> = f.domain.axes().unwrap().1.boundaries().to_vec();
    for (_, a) in terms {
        let (g1, g2) = a.values.domain.axes().unwrap();
        b1.extend_from_slice(g1.boundaries());
        b2.extend_from_slice(g2.boundaries());
    }
    let clean = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        v
    };
    let dom = Domain::Product(
        Arc::new(WeightedGrid::from_boundaries(l, clean(b1)).unwrap()),
        Arc::new(WeightedGrid::from_boundaries(l, clean(b2)).unwrap()),
    );
    let mut acc = resample(f, &dom).unwrap();
    for (alpha, a) in terms {
        let v = a.resample(&dom).unwrap();
        for (x, y) in acc.values.iter_mut().zip(&v.values) {
            *x -= alpha * y;
        }
    }
    lp_norm(&acc, 1.0)
}

fn two_patch(l: f64, r: &Rectangle, rt: &Rectangle, cells: usize) -> Domain {
    let axis = |a: &Interval, b: &Interval| {
        let mut v = Vec::new();
        for i in 0..=cells {
            v.push(a.left + a.len() * i as f64 / cells as f64);
        }
        for i in 0..=cells {
            v.push(b.left + b.len() * i as f64 / cells as f64);
        }
        v.sort_by(f64::total_cmp);
        v.dedup_by(|x, y| (*x - *y).abs() < 1e-12);
        Arc::new(WeightedGrid::from_boundaries(lam(l), v).unwrap())
    };
    Domain::Product(axis(&r.i1, &rt.i1), axis(&r.i2, &rt.i2))
}

#[test]
fn two_rectangle_examples() {
    for l in [0.5, 1.0] {
        let r = rect(1.0, 1.5, 2.0, 2.5);
        let rt = rect(3.0, 3.5, 4.0, 4.5);
        let dom = two_patch(l, &r, &rt, 3);
        let (mr, mrt) = (r.measure(lam(l)), rt.measure(lam(l)));
        let f = GridFunction::sample(&dom, |x, y| {
            if r.contains(x, y) {
                1.0 / mr
            } else if rt.contains(x, y) {
                -1.0 / mrt
            } else {
                0.0
            }
        });
        let t = two_rectangle_h1_bound(&f, &r, &rt).unwrap();
        // Separation 2/0.25 = 8r per axis.
        assert_eq!(t.i0, 6);
        assert!((t.log_sum - 6.0).abs() < 1e-12);
        assert!(two_rectangle_reconstruction(&f, &t.terms) <= 1e-10 * lp_norm(&f, 1.0));
        for (alpha, a) in &t.terms {
            assert!(*alpha > 0.0);
            assert!(validate_atom(a, 1e-9).passes(), "{:?}", validate_atom(a, 1e-9));
        }
        assert!(t.sum_abs_alpha() <= t.bound);
        assert_eq!(t.terms.len(), 2 * (t.i0 + 1));
    }

    // Separation exactly 4r, r = 1/2.
    let r = rect(1.0, 2.0, 1.0, 2.0);
    let rt = rect(3.0, 4.0, 3.0, 4.0);
    let dom = two_patch(1.0, &r, &rt, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut f = GridFunction::sample(&dom, |x, y| {
        if r.contains(x, y) || rt.contains(x, y) {
            1.0
        } else {
            0.0
        }
    });
    for v in f.values.iter_mut().filter(|v| **v != 0.0) {
        *v = rng.gen_range(-1.0..1.0);
    }
    let shift = f.integral() / (r.measure(lam(1.0)) + rt.measure(lam(1.0)));
    f = GridFunction::sample(&dom, |x, y| if r.contains(x, y) || rt.contains(x, y) { shift } else { 0.0 })
        .zip(&f, |s, v| v - s)
        .unwrap();
    let t = two_rectangle_h1_bound(&f, &r, &rt).unwrap();
    assert_eq!(t.i0, 4);
    assert!(t.terms.len() >= 4);
    assert!(two_rectangle_reconstruction(&f, &t.terms) <= 1e-10 * lp_norm(&f, 1.0));

    // Preconditions are named.
    let near = rect(2.5, 3.5, 1.0, 2.0);
    assert!(matches!(two_rectangle_h1_bound(&f, &r, &near), Err(Error::Precondition(_))));
    let off = f.map(|v| v + 1.0);
    assert!(matches!(two_rectangle_h1_bound(&off, &r, &rt), Err(Error::Precondition(_))));
}

#[test]
fn two_rectangle_log_growth() {
    let r = rect(1.0, 1.5, 1.0, 1.5);
    let mut sums = Vec::new();
    for k in 2..=6 {
        let sep = 0.25 * f64::from(1u32 << k);
        let rt = rect(1.0 + sep, 1.5 + sep, 1.0 + sep, 1.5 + sep);
        let dom = two_patch(1.0, &r, &rt, 2);
        let (mr, mrt) = (r.measure(lam(1.0)), rt.measure(lam(1.0)));
        let f = GridFunction::sample(&dom, |x, y| {
            if r.contains(x, y) {
                1.0 / mr
            } else if rt.contains(x, y) {
                -1.0 / mrt
            } else {
                0.0
            }
        });
        let t = two_rectangle_h1_bound(&f, &r, &rt).unwrap();
        assert_eq!(t.i0, 2 * k as usize);
        sums.push(t.sum_abs_alpha());
    }
    let first = sums[1] - sums[0];
    for w in sums.windows(2) {
        assert!(w[1] - w[0] <= 1.5 * first + 1e-12, "{sums:?}");
    }
}

#[test]
fn h1_upper_examples() {
    let (_, dom) = square_grid(1.0, 0.0, 8.0, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_atom(&dom, CellRect::new((3, 7), (5, 8)), f64::INFINITY, &mut rng);
    let cz = CzConfig::default();
    let one = h1_norm_upper(&a.values, &H1Strategy::DirectFit, &cz).unwrap();
    assert!(one.value <= 1.0 + 1e-12);
    let three = h1_norm_upper(&a.values.scale(3.0), &H1Strategy::DirectFit, &cz).unwrap();
    assert!(three.value <= 3.0 * (1.0 + 1e-12));
    assert!((three.value - 3.0 * one.value).abs() < 1e-12);

    let b = random_atom(&dom, CellRect::new((9, 12), (2, 6)), f64::INFINITY, &mut rng);
    let sum = a.values.add(&b.values).unwrap();
    let s = h1_norm_upper(&sum, &H1Strategy::DirectFit, &cz).unwrap();
    // Direct fit of a sum is not subadditive; the two-term decomposition is.
    assert!(s.value.is_finite());

    let chi = GridFunction::sample(&dom, |x, y| if x < 2.0 && y < 2.0 { 1.0 } else { 0.0 });
    assert!(matches!(
        h1_norm_upper(&chi, &H1Strategy::DirectFit, &cz),
        Err(Error::NotInH1 { .. })
    ));
    let zero = h1_norm_upper(&GridFunction::zeros(&dom), &H1Strategy::Best, &cz).unwrap();
    assert_eq!(zero.value, 0.0);
    let c = h1_norm_upper(&a.values, &H1Strategy::Cz { q: 2.0 }, &CzConfig { c1: 1.5, ..cz }).unwrap();
    assert!(c.value > 0.0 && c.remainder_l1 <= 1e-8);
}
