//! Hardy-space atoms: validation, Whitney covers, the level-set decomposition of (1,q)-atoms,
//! and the two-rectangle h¹ bound.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{lp_norm, Domain, GridFunction, Interval, LambdaParam, Rectangle, WeightedGrid};
use crate::error::{Error, Result};
use crate::haar::MaskPrefix;
use crate::oscillation::strong_maximal_raw;

/// Half-open block of cells `rows.0..rows.1 × cols.0..cols.1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRect {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl CellRect {
    pub fn new(rows: (usize, usize), cols: (usize, usize)) -> Self {
        Self { rows, cols }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.rows.0 <= i && i < self.rows.1 && self.cols.0 <= j && j < self.cols.1
    }

    pub fn is_empty(&self) -> bool {
        self.rows.0 >= self.rows.1 || self.cols.0 >= self.cols.1
    }

    pub fn span(&self, g1: &WeightedGrid, g2: &WeightedGrid) -> Rectangle {
        Rectangle::new(g1.span(self.rows.0, self.rows.1), g2.span(self.cols.0, self.cols.1))
    }

    /// Cells whose nodes lie in the concentric `c`-dilate of the block.
    pub fn dilate(&self, g1: &WeightedGrid, g2: &WeightedGrid, c: f64) -> CellRect {
        let r = self.span(g1, g2).dilate(c);
        CellRect::new(g1.cells_in(&r.i1), g2.cells_in(&r.i2))
    }

    pub fn measure(&self, g1: &WeightedGrid, g2: &WeightedGrid) -> f64 {
        let a: f64 = g1.measures()[self.rows.0..self.rows.1].iter().sum();
        let b: f64 = g2.measures()[self.cols.0..self.cols.1].iter().sum();
        a * b
    }

    pub fn cells(&self, n2: usize) -> impl Iterator<Item = usize> + '_ {
        (self.rows.0..self.rows.1).flat_map(move |i| (self.cols.0..self.cols.1).map(move |j| i * n2 + j))
    }

    pub fn from_rectangle(g1: &WeightedGrid, g2: &WeightedGrid, r: &Rectangle) -> Self {
        CellRect::new(g1.cells_in(&r.i1), g2.cells_in(&r.i2))
    }
}

/// A function supported in `support` with `‖a‖_q ≤ μ(support)^{1/q−1}` and vanishing integral.
#[derive(Debug, Clone)]
pub struct Atom {
    pub support: Rectangle,
    pub values: GridFunction,
    /// Exponent in `(1, ∞]`.
    pub q: f64,
}

impl Atom {
    pub fn new(support: Rectangle, values: GridFunction, q: f64) -> Result<Self> {
        if !(q > 1.0) {
            return Err(Error::param(format!("atom exponent must exceed 1, got {q}")));
        }
        values.domain.axes()?;
        Ok(Self { support, values, q })
    }

    pub fn lambda(&self) -> LambdaParam {
        self.values.domain.lambda()
    }

    pub fn support_measure(&self) -> f64 {
        self.support.measure(self.lambda())
    }

    pub fn norm(&self, q: f64) -> f64 {
        lp_norm(&self.values, q)
    }

    /// Values on a grid refining the atom's own grid; nodes outside it get 0.
    pub fn resample(&self, domain: &Domain) -> Result<GridFunction> {
        resample(&self.values, domain)
    }
}

/// Point values of `f` at the nodes of `domain` (zero outside `f`'s grid).
pub fn resample(f: &GridFunction, domain: &Domain) -> Result<GridFunction> {
    let (a1, a2) = f.domain.axes()?;
    let (t1, t2) = domain.axes()?;
    let n2 = a2.len();
    let map = |src: &WeightedGrid, dst: &WeightedGrid| -> Vec<Option<usize>> {
        dst.nodes()
            .iter()
            .map(|&x| {
                if x < src.x_min() || x > src.x_max() {
                    None
                } else {
                    src.locate(x)
                }
            })
            .collect()
    };
    let m1 = map(a1, t1);
    let m2 = map(a2, t2);
    let mut values = Vec::with_capacity(t1.len() * t2.len());
    for i in &m1 {
        for j in &m2 {
            values.push(match (i, j) {
                (Some(i), Some(j)) => f.values[i * n2 + j],
                _ => 0.0,
            });
        }
    }
    GridFunction::new(domain.clone(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub pass: bool,
    pub measured: f64,
    pub bound: f64,
}

impl Check {
    fn le(measured: f64, bound: f64) -> Self {
        Self {
            pass: measured <= bound,
            measured,
            bound,
        }
    }

    /// `bound − measured`; negative when failing.
    pub fn slack(&self) -> f64 {
        self.bound - self.measured
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomValidation {
    /// Largest |value| at a node outside the support.
    pub support: Check,
    pub size: Check,
    /// `|∫a|` against `tol·‖a‖₁`.
    pub cancellation: Check,
}

impl AtomValidation {
    pub fn passes(&self) -> bool {
        self.support.pass && self.size.pass && self.cancellation.pass
    }
}

pub const DEFAULT_ATOM_TOL: f64 = 1e-9;

pub fn validate_atom(a: &Atom, tol: f64) -> AtomValidation {
    let (g1, g2) = a.values.domain.axes().expect("atom on a product grid");
    let n2 = g2.len();
    let mut outside: f64 = 0.0;
    for (i, &x1) in g1.nodes().iter().enumerate() {
        for (j, &x2) in g2.nodes().iter().enumerate() {
            if !a.support.contains(x1, x2) {
                outside = outside.max(a.values.values[i * n2 + j].abs());
            }
        }
    }
    let mu = a.support_measure();
    let size_bound = mu.powf(1.0 / a.q - 1.0) * (1.0 + tol);
    let l1 = lp_norm(&a.values, 1.0);
    AtomValidation {
        support: Check::le(outside, 0.0),
        size: Check::le(a.norm(a.q), size_bound),
        cancellation: Check::le(a.values.integral().abs(), tol * l1),
    }
}

/// `max μ(c·I)/μ(I)` over cell intervals, with dilates read off in cells.
pub fn grid_dilation_constant(g: &WeightedGrid, c: f64) -> f64 {
    let n = g.len();
    let w = g.measures();
    let mut prefix = vec![0.0; n + 1];
    for k in 0..n {
        prefix[k + 1] = prefix[k] + w[k];
    }
    let mut best: f64 = 1.0;
    for lo in 0..n {
        for hi in lo + 1..=n {
            let (a, b) = g.cells_in(&g.span(lo, hi).dilate(c));
            best = best.max((prefix[b] - prefix[a]) / (prefix[hi] - prefix[lo]));
        }
    }
    best
}

/// `C_λ`: the `μ(9R) ≤ C_λ μ(R)` constant of a product grid.
pub fn c_lambda(g1: &WeightedGrid, g2: &WeightedGrid) -> f64 {
    grid_dilation_constant(g1, 9.0) * grid_dilation_constant(g2, 9.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhitneyCover {
    pub squares: Vec<CellRect>,
    /// Largest number of `C̃`-dilates containing one cell.
    pub overlap: usize,
    /// Squares added for cells no dyadic square with a dilate inside `U` could reach.
    pub singletons: usize,
    /// Whether every `3C̃`-dilate meets the complement of `U`.
    pub escapes: bool,
}

fn require_dyadic(n1: usize, n2: usize) -> Result<u32> {
    if n1 != n2 || !n1.is_power_of_two() {
        return Err(Error::Precondition(format!(
            "Whitney covers need a square 2^k × 2^k grid, got {n1} × {n2}"
        )));
    }
    Ok(n1.trailing_zeros())
}

/// Dyadic Whitney cover of a cell set `u` (row-major mask).
pub fn whitney_cover(
    u: &[bool],
    g1: &WeightedGrid,
    g2: &WeightedGrid,
    c_tilde: f64,
) -> Result<WhitneyCover> {
    let (n1, n2) = (g1.len(), g2.len());
    if u.len() != n1 * n2 {
        return Err(Error::GridMismatch("mask size does not match the grid".into()));
    }
    if !(c_tilde >= 1.0) {
        return Err(Error::param("dilation constant must be at least 1"));
    }
    let k = require_dyadic(n1, n2)?;
    if u.iter().all(|&b| b) {
        return Err(Error::NoComplement);
    }
    let inside = MaskPrefix::new(u, n1, n2);
    let full = |r: &CellRect| !r.is_empty() && inside.full(r.rows.0, r.rows.1, r.cols.0, r.cols.1);
    let mut covered = vec![false; n1 * n2];
    let mut squares = Vec::new();
    for s in (0..=k).rev() {
        let size = 1usize << s;
        for bi in 0..n1 / size {
            for bj in 0..n2 / size {
                let q = CellRect::new((bi * size, (bi + 1) * size), (bj * size, (bj + 1) * size));
                if covered[q.rows.0 * n2 + q.cols.0] || !full(&q) {
                    continue;
                }
                if full(&q.dilate(g1, g2, c_tilde)) {
                    for c in q.cells(n2) {
                        covered[c] = true;
                    }
                    squares.push(q);
                }
            }
        }
    }
    let mut singletons = 0;
    for i in 0..n1 {
        for j in 0..n2 {
            if u[i * n2 + j] && !covered[i * n2 + j] {
                covered[i * n2 + j] = true;
                squares.push(CellRect::new((i, i + 1), (j, j + 1)));
                singletons += 1;
            }
        }
    }
    let mut count = vec![0usize; n1 * n2];
    for q in &squares {
        for c in q.dilate(g1, g2, c_tilde).cells(n2) {
            count[c] += 1;
        }
    }
    let escapes = squares.iter().all(|q| !full(&q.dilate(g1, g2, 3.0 * c_tilde)));
    Ok(WhitneyCover {
        overlap: count.into_iter().max().unwrap_or(0),
        squares,
        singletons,
        escapes,
    })
}

/// Whether `{M_s f > α} ⊆ 3R₀` on the grid.
pub fn levelset_containment_check(f: &GridFunction, r0: &Rectangle, alpha: f64) -> Result<bool> {
    let (g1, g2) = f.domain.axes()?;
    let abs: Vec<f64> = f.values.iter().map(|v| v.abs()).collect();
    let m = strong_maximal_raw(&abs, g1, g2);
    let three = CellRect::from_rectangle(g1, g2, r0).dilate(g1, g2, 3.0);
    let n2 = g2.len();
    Ok(m.iter()
        .enumerate()
        .all(|(k, &v)| v <= alpha || three.contains(k / n2, k % n2)))
}

/// Smallest `C` with `M_s f ≤ C·m_{R₀}(|f|)` off `3R₀`, for `f` supported in `R₀`.
pub fn containment_constant(f: &GridFunction, r0: &Rectangle) -> Result<f64> {
    let (g1, g2) = f.domain.axes()?;
    let cells = CellRect::from_rectangle(g1, g2, r0);
    let n2 = g2.len();
    let mass: f64 = cells
        .cells(n2)
        .map(|c| f.values[c].abs() * g1.measures()[c / n2] * g2.measures()[c % n2])
        .sum();
    let mean = mass / cells.measure(g1, g2);
    if !(mean > 0.0) {
        return Ok(0.0);
    }
    let abs: Vec<f64> = f.values.iter().map(|v| v.abs()).collect();
    let m = strong_maximal_raw(&abs, g1, g2);
    let three = cells.dilate(g1, g2, 3.0);
    let worst = m
        .iter()
        .enumerate()
        .filter(|(k, _)| !three.contains(k / n2, k % n2))
        .map(|(_, &v)| v)
        .fold(0.0, f64::max);
    Ok(worst / mean)
}

/// Calibrated level-set containment constant over a battery of `(f, R₀)` pairs.
pub fn calibrate_c1(battery: &[(GridFunction, Rectangle)]) -> Result<f64> {
    let mut c: f64 = 0.0;
    for (f, r) in battery {
        c = c.max(containment_constant(f, r)?);
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CzConfig {
    /// Maximal-function exponent, in `(1, q)`.
    pub p: f64,
    /// Growth factor `α`; `None` picks `alpha_margin` times the largest threshold.
    pub alpha: Option<f64>,
    pub alpha_margin: f64,
    pub max_level: usize,
    /// Overlap bound `M` for Whitney dilates.
    pub overlap_bound: f64,
    /// Level-set containment constant `C₁`.
    pub c1: f64,
    /// Stop when the remainder's L¹ norm falls below this fraction of the input's.
    pub residual_tol: f64,
    pub atom_tol: f64,
}

impl Default for CzConfig {
    fn default() -> Self {
        Self {
            p: 1.5,
            alpha: None,
            alpha_margin: 1.01,
            max_level: 6,
            overlap_bound: 16.0,
            c1: 9.0,
            residual_tol: 1e-8,
            atom_tol: DEFAULT_ATOM_TOL,
        }
    }
}

/// The largeness thresholds on `α`; the decomposition needs `α` above all of them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaThresholds {
    /// `α^{1−q}M < 1`.
    pub overlap: f64,
    /// `α^p > C₁`.
    pub containment: f64,
    /// `α^p > 2^p C₁ C_λ`.
    pub induction: f64,
    /// `α > 4 C_λ^{1/p}`.
    pub level_set: f64,
    pub two: f64,
}

impl AlphaThresholds {
    pub fn new(q: f64, p: f64, m: f64, c1: f64, c_lambda: f64) -> Self {
        let overlap = if q.is_infinite() { 1.0 } else { m.powf(1.0 / (q - 1.0)) };
        Self {
            overlap,
            containment: c1.powf(1.0 / p),
            induction: 2.0 * (c1 * c_lambda).powf(1.0 / p),
            level_set: 4.0 * c_lambda.powf(1.0 / p),
            two: 2.0,
        }
    }

    pub fn max(&self) -> f64 {
        [self.overlap, self.containment, self.induction, self.level_set, self.two]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// No bad parts remain.
    Exhausted,
    ResidualTolerance,
    MaxLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub atoms: usize,
    pub bad_parts: usize,
    pub max_overlap: usize,
    pub residual_l1: f64,
    /// Worst slack of the pointwise and p-mean bounds at this level (non-negative when they hold).
    pub slack_pointwise: f64,
    pub slack_pmean: f64,
}

#[derive(Debug, Clone)]
pub struct AtomicDecomposition {
    pub terms: Vec<(f64, Atom)>,
    pub residual: GridFunction,
    /// L¹ norm of `residual`.
    pub residual_norm: f64,
    pub levels: Vec<LevelReport>,
    pub stop: StopReason,
    pub alpha: f64,
    pub c_lambda: f64,
}

impl AtomicDecomposition {
    pub fn sum_abs_alpha(&self) -> f64 {
        self.terms.iter().map(|(a, _)| a.abs()).sum()
    }

    /// `‖input − Σ αᵢaᵢ − residual‖₁`.
    pub fn reconstruction_error(&self, input: &GridFunction) -> Result<f64> {
        let mut acc = self.residual.clone();
        for (alpha, atom) in &self.terms {
            let a = atom.resample(&input.domain)?;
            for (x, y) in acc.values.iter_mut().zip(&a.values) {
                *x += alpha * y;
            }
        }
        Ok(lp_norm(&input.sub(&acc)?, 1.0))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtomRecord {
    pub alpha: f64,
    pub support: Rectangle,
    /// `"inf"` or the exponent.
    pub q: String,
    pub values_ref: String,
}

/// JSON-ready listing of atomic terms.
pub fn export_terms(terms: &[(f64, Atom)], prefix: &str) -> Vec<AtomRecord> {
    terms
        .iter()
        .enumerate()
        .map(|(k, (alpha, a))| AtomRecord {
            alpha: *alpha,
            support: a.support,
            q: if a.q.is_infinite() { "inf".into() } else { format!("{}", a.q) },
            values_ref: format!("{prefix}{k}"),
        })
        .collect()
}

fn violation(property: &str, level: usize, detail: impl Into<String>) -> Error {
    Error::InvariantViolation {
        property: property.to_string(),
        level,
        detail: detail.into(),
    }
}

struct BadPart {
    values: Vec<f64>,
    rect: CellRect,
}

/// Level-set decomposition of a `(1,q)`-atom into `(1,∞)`-atoms.
pub fn cz_atomic_decomposition(a: &Atom, cfg: &CzConfig) -> Result<AtomicDecomposition> {
    let v = validate_atom(a, cfg.atom_tol);
    if !v.passes() {
        return Err(Error::Precondition(format!("input is not a valid atom: {v:?}")));
    }
    if !(cfg.p > 1.0 && cfg.p < a.q) {
        return Err(Error::Precondition(format!("p = {} must lie in (1, q = {})", cfg.p, a.q)));
    }
    let dom = a.values.domain.clone();
    let (g1, g2) = dom.axes()?;
    let (n1, n2) = (g1.len(), g2.len());
    require_dyadic(n1, n2)?;
    let p = cfg.p;
    let w = dom.weights();
    let cl = c_lambda(g1, g2);
    let thresholds = AlphaThresholds::new(a.q, p, cfg.overlap_bound, cfg.c1, cl);
    let alpha = match cfg.alpha {
        // Only the convergence constraints are hard; the others are audited by the property checks.
        Some(al) if al > thresholds.overlap.max(thresholds.two) => al,
        Some(al) => {
            return Err(Error::Precondition(format!(
                "alpha = {al} must exceed both 2 and M^(1/(q-1)) = {}",
                thresholds.overlap
            )))
        }
        None => cfg.alpha_margin * thresholds.max(),
    };
    let big_m = cfg.overlap_bound;

    let mu0 = a.support_measure();
    let b: Vec<f64> = a.values.values.iter().map(|v| v * mu0).collect();
    let b_abs: Vec<f64> = b.iter().map(|v| v.abs()).collect();
    let b_l1: f64 = b_abs.iter().zip(&w).map(|(v, w)| v * w).sum();
    let r0 = CellRect::from_rectangle(g1, g2, &a.support);
    // M_{s,p} b, for the level-set check.
    let msp_b: Vec<f64> = {
        let bp: Vec<f64> = b_abs.iter().map(|v| v.powf(p)).collect();
        strong_maximal_raw(&bp, g1, g2).into_iter().map(|v| v.powf(1.0 / p)).collect()
    };

    let mut terms = Vec::new();
    let mut levels = Vec::new();
    let mut current = vec![BadPart { values: b.clone(), rect: r0 }];
    let mut n = 0usize;
    let stop;
    loop {
        // Items at generation n are refined against the threshold α^{n+1}.
        let threshold = alpha.powi(n as i32 + 1);
        let mut next = Vec::new();
        let mut emitted = 0;
        for item in &current {
            let hp: Vec<f64> = item.values.iter().map(|v| v.abs().powf(p)).collect();
            let msp: Vec<f64> = strong_maximal_raw(&hp, g1, g2)
                .into_iter()
                .map(|v| v.powf(1.0 / p))
                .collect();
            let u: Vec<bool> = msp.iter().map(|&v| v > threshold).collect();
            let three = item.rect.dilate(g1, g2, 3.0);
            for (k, &inside) in u.iter().enumerate() {
                if inside && !three.contains(k / n2, k % n2) {
                    return Err(violation(
                        "I",
                        n + 1,
                        format!("level set leaves 3R at cell {k}; alpha too small for the containment constant"),
                    ));
                }
            }
            let mut g = item.values.clone();
            if u.iter().any(|&x| x) {
                let cover = whitney_cover(&u, g1, g2, 3.0).map_err(|e| match e {
                    Error::NoComplement => Error::Precondition("level set fills the grid; alpha too small".into()),
                    e => e,
                })?;
                if (cover.overlap as f64) > big_m {
                    return Err(violation(
                        "III",
                        n + 1,
                        format!("Whitney overlap {} exceeds M = {big_m}", cover.overlap),
                    ));
                }
                let mut count = vec![0u32; n1 * n2];
                for q in &cover.squares {
                    for c in q.cells(n2) {
                        count[c] += 1;
                    }
                }
                for (k, gk) in g.iter_mut().enumerate() {
                    if u[k] {
                        *gk = 0.0;
                    }
                }
                for q in &cover.squares {
                    let mq = q.measure(g1, g2);
                    let mean: f64 = q
                        .cells(n2)
                        .map(|c| item.values[c] / count[c] as f64 * w[c])
                        .sum::<f64>()
                        / mq;
                    let mut child = vec![0.0; n1 * n2];
                    for c in q.cells(n2) {
                        g[c] += mean;
                        child[c] = item.values[c] / count[c] as f64 - mean;
                    }
                    if child.iter().any(|&x| x != 0.0) {
                        next.push(BadPart { values: child, rect: *q });
                    }
                }
            }
            let s_rect = three.span(g1, g2);
            let s_measure = three.measure(g1, g2);
            let scale = big_m * cl * threshold * s_measure;
            let atom_values: Vec<f64> = g.iter().map(|v| v / scale).collect();
            if atom_values.iter().any(|&x| x != 0.0) {
                let atom = Atom::new(s_rect, GridFunction::new(dom.clone(), atom_values)?, f64::INFINITY)?;
                let check = validate_atom(&atom, cfg.atom_tol);
                if !check.passes() {
                    return Err(violation("atom-validity", n + 1, format!("emitted atom fails validation: {check:?}")));
                }
                terms.push((scale / mu0, atom));
                emitted += 1;
            }
        }

        // Properties of the new bad parts, generation n + 1.
        let gen = n + 1;
        let bound_level = 2.0 * cl.powf(1.0 / p) * alpha.powi(gen as i32);
        let mut slack_pointwise = f64::INFINITY;
        let mut slack_pmean = f64::INFINITY;
        let mut child_dilates = vec![0usize; n1 * n2];
        for h in &next {
            let h_l1: f64 = h.values.iter().zip(&w).map(|(v, w)| v.abs() * w).sum();
            for (k, &v) in h.values.iter().enumerate() {
                if v != 0.0 && !h.rect.contains(k / n2, k % n2) {
                    return Err(violation("support", gen, "bad part leaves its rectangle"));
                }
                if v != 0.0 {
                    let s = b_abs[k] + bound_level - v.abs();
                    slack_pointwise = slack_pointwise.min(s);
                }
            }
            let integral: f64 = h.values.iter().zip(&w).map(|(v, w)| v * w).sum();
            if integral.abs() > cfg.atom_tol * h_l1.max(f64::MIN_POSITIVE) + 1e-14 * b_l1 {
                return Err(violation("cancellation", gen, format!("bad part has integral {integral:e}")));
            }
            let mr = h.rect.measure(g1, g2);
            let pmean = (h.rect.cells(n2).map(|c| h.values[c].abs().powf(p) * w[c]).sum::<f64>() / mr).powf(1.0 / p);
            slack_pmean = slack_pmean.min(bound_level - pmean);
            for c in h.rect.cells(n2) {
                if !(msp_b[c] > 0.5 * alpha.powi(gen as i32)) {
                    return Err(violation("level-set", gen, format!("cell {c} of a bad part lies outside the level set")));
                }
            }
            for c in h.rect.dilate(g1, g2, 3.0).cells(n2) {
                child_dilates[c] += 1;
            }
        }
        let tol_abs = 1e-12 * bound_level;
        if slack_pointwise < -tol_abs {
            return Err(violation("pointwise-bound", gen, format!("pointwise bound exceeded by {:e}", -slack_pointwise)));
        }
        if slack_pmean < -tol_abs {
            return Err(violation("p-mean-bound", gen, format!("p-mean bound exceeded by {:e}", -slack_pmean)));
        }
        let max_overlap = child_dilates.iter().copied().max().unwrap_or(0);
        if !next.is_empty() && max_overlap as f64 > big_m.powi(gen as i32) {
            return Err(violation("overlap", gen, format!("dilates overlap {max_overlap} times")));
        }
        let residual_l1: f64 = next
            .iter()
            .map(|h| h.values.iter().zip(&w).map(|(v, w)| v.abs() * w).sum::<f64>())
            .sum();
        levels.push(LevelReport {
            level: gen,
            atoms: emitted,
            bad_parts: next.len(),
            max_overlap,
            residual_l1: residual_l1 / mu0,
            slack_pointwise: if next.is_empty() { 0.0 } else { slack_pointwise },
            slack_pmean: if next.is_empty() { 0.0 } else { slack_pmean },
        });
        current = next;
        n += 1;
        if current.is_empty() {
            stop = StopReason::Exhausted;
            break;
        }
        if residual_l1 <= cfg.residual_tol * b_l1 {
            stop = StopReason::ResidualTolerance;
            break;
        }
        if n >= cfg.max_level {
            stop = StopReason::MaxLevel;
            break;
        }
    }
    let mut residual = vec![0.0; n1 * n2];
    for h in &current {
        for (r, v) in residual.iter_mut().zip(&h.values) {
            *r += v / mu0;
        }
    }
    let residual = GridFunction::new(dom, residual)?;
    let residual_norm = lp_norm(&residual, 1.0);
    Ok(AtomicDecomposition {
        terms,
        residual,
        residual_norm,
        levels,
        stop,
        alpha,
        c_lambda: cl,
    })
}

/// Output of the two-rectangle construction.
#[derive(Debug, Clone)]
pub struct TwoRectangleBound {
    pub terms: Vec<(f64, Atom)>,
    pub i0: usize,
    /// `log₂(|x₀₁−y₀₁|/r₁) + log₂(|x₀₂−y₀₂|/r₂)`.
    pub log_sum: f64,
    pub c1_tilde: f64,
    pub c2_tilde: f64,
    /// `C̃₁μ(R) + C̃₂μ(R̃)`.
    pub mass_scale: f64,
    /// Largest doubling ratio `μ(2^i R)/μ(2^{i−1}R)` met along the chains.
    pub doubling: f64,
    /// Rigorous upper bound `(D+1)(i₀+1)(C̃₁μ(R) + C̃₂μ(R̃))` on `Σ|α|`.
    pub bound: f64,
}

impl TwoRectangleBound {
    pub fn sum_abs_alpha(&self) -> f64 {
        self.terms.iter().map(|(a, _)| a.abs()).sum()
    }
}

fn ball_rect(c: (f64, f64), r: (f64, f64)) -> Result<Rectangle> {
    Ok(Rectangle::new(Interval::ball(c.0, r.0)?, Interval::ball(c.1, r.1)?))
}

fn sorted_breaks(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * b.abs().max(1e-300));
    v
}

/// Atom `Σ_k c_k χ_{B_k}` on the grid generated by the boxes' edges.
fn box_atom(lambda: LambdaParam, boxes: &[(Rectangle, f64)], support: Rectangle) -> Result<Atom> {
    let b1 = sorted_breaks(boxes.iter().flat_map(|(r, _)| [r.i1.left, r.i1.right]).collect());
    let b2 = sorted_breaks(boxes.iter().flat_map(|(r, _)| [r.i2.left, r.i2.right]).collect());
    let g1 = Arc::new(WeightedGrid::from_boundaries(lambda, b1)?);
    let g2 = Arc::new(WeightedGrid::from_boundaries(lambda, b2)?);
    let dom = Domain::Product(g1, g2);
    let f = GridFunction::sample(&dom, |x1, x2| {
        boxes
            .iter()
            .filter(|(r, _)| r.contains(x1, x2))
            .map(|(_, c)| c)
            .sum()
    });
    Atom::new(support, f, f64::INFINITY)
}

/// Scales `f` into an `∞`-atom on `support`; returns `(α, atom)` or `None` when `f` vanishes.
fn normalize(f: GridFunction, support: Rectangle) -> Result<Option<(f64, Atom)>> {
    let sup = f.max_abs();
    if sup == 0.0 {
        return Ok(None);
    }
    let lambda = f.domain.lambda();
    let alpha = sup * support.measure(lambda);
    let a = Atom::new(support, f.scale(1.0 / alpha), f64::INFINITY)?;
    Ok(Some((alpha, a)))
}

/// One side of the construction: `f_j` on `R` telescoped through `2^i R` and closed off on `R̄`.
fn telescope(
    part: &GridFunction,
    rect: &Rectangle,
    center: (f64, f64),
    r: (f64, f64),
    i0: usize,
    r_bar: &Rectangle,
    terms: &mut Vec<(f64, Atom)>,
) -> Result<f64> {
    let lambda = part.domain.lambda();
    let mass = part.integral();
    let dil = |i: u32| ball_rect(center, (r.0 * f64::from(2u32.pow(i)), r.1 * f64::from(2u32.pow(i))));
    let mu = |x: &Rectangle| x.measure(lambda);
    let mut doubling: f64 = 1.0;
    // First atom: f_j − χ_{2R}·mass/μ(2R), on the grid refined by the edges of 2R.
    let two = dil(1)?;
    doubling = doubling.max(mu(&two) / mu(rect));
    let (g1, g2) = part.domain.axes()?;
    let mut b1: Vec<f64> = g1.boundaries().to_vec();
    b1.extend([two.i1.left, two.i1.right]);
    let mut b2: Vec<f64> = g2.boundaries().to_vec();
    b2.extend([two.i2.left, two.i2.right]);
    let fine = Domain::Product(
        Arc::new(WeightedGrid::from_boundaries(lambda, sorted_breaks(b1))?),
        Arc::new(WeightedGrid::from_boundaries(lambda, sorted_breaks(b2))?),
    );
    let on_fine = resample(part, &fine)?;
    let level = mass / mu(&two);
    let f1 = GridFunction::sample(&fine, |x1, x2| if two.contains(x1, x2) { level } else { 0.0 });
    let first = on_fine.sub(&f1)?;
    if let Some(t) = normalize(first, two)? {
        terms.push(t);
    }
    // Rings: mass·(χ_{2^{i−1}R}/μ(2^{i−1}R) − χ_{2^i R}/μ(2^i R)).
    for i in 2..=i0 as u32 {
        let inner = dil(i - 1)?;
        let outer = dil(i)?;
        doubling = doubling.max(mu(&outer) / mu(&inner));
        let a = box_atom(
            lambda,
            &[(inner, mass / mu(&inner)), (outer, -mass / mu(&outer))],
            outer,
        )?;
        if mass != 0.0 {
            let alpha = a.values.max_abs() * mu(&outer);
            let scaled = Atom::new(outer, a.values.scale(1.0 / alpha), f64::INFINITY)?;
            terms.push((alpha, scaled));
        }
    }
    // Tail: mass·(χ_{2^{i₀}R}/μ(2^{i₀}R) − χ_{R̄}/μ(R̄)), supported in 2^{i₀+1}R ⊇ R̄.
    let last = dil(i0 as u32)?;
    let support = dil(i0 as u32 + 1)?;
    if mass != 0.0 {
        let a = box_atom(
            lambda,
            &[(last, mass / mu(&last)), (*r_bar, -mass / mu(r_bar))],
            support,
        )?;
        let alpha = a.values.max_abs() * mu(&support);
        let scaled = Atom::new(support, a.values.scale(1.0 / alpha), f64::INFINITY)?;
        terms.push((alpha, scaled));
    }
    Ok(doubling)
}

/// Explicit atomic decomposition of `f` supported on two congruent separated rectangles.
pub fn two_rectangle_h1_bound(f: &GridFunction, r: &Rectangle, r_tilde: &Rectangle) -> Result<TwoRectangleBound> {
    let (g1, g2) = f.domain.axes()?;
    let lambda = f.domain.lambda();
    let x0 = (r.i1.center(), r.i2.center());
    let y0 = (r_tilde.i1.center(), r_tilde.i2.center());
    let rad = (r.i1.radius(), r.i2.radius());
    let congruent = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.max(b);
    if !congruent(rad.0, r_tilde.i1.radius()) || !congruent(rad.1, r_tilde.i2.radius()) {
        return Err(Error::Precondition("rectangles are not congruent".into()));
    }
    let tol_r = |a: f64, b: f64| a <= b * (1.0 + 1e-12);
    if !tol_r(rad.0, x0.0.min(y0.0)) || !tol_r(rad.1, x0.1.min(y0.1)) {
        return Err(Error::Precondition("radius exceeds a center coordinate".into()));
    }
    let sep = ((x0.0 - y0.0).abs(), (x0.1 - y0.1).abs());
    if sep.0 < 4.0 * rad.0 * (1.0 - 1e-12) || sep.1 < 4.0 * rad.1 * (1.0 - 1e-12) {
        return Err(Error::Precondition("separation below 4r on some axis".into()));
    }
    let n2 = g2.len();
    let c_r = CellRect::from_rectangle(g1, g2, r);
    let c_rt = CellRect::from_rectangle(g1, g2, r_tilde);
    let mut part1 = vec![0.0; f.values.len()];
    let mut part2 = vec![0.0; f.values.len()];
    for (k, &v) in f.values.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let (i, j) = (k / n2, k % n2);
        if c_r.contains(i, j) {
            part1[k] = v;
        } else if c_rt.contains(i, j) {
            part2[k] = v;
        } else {
            return Err(Error::Precondition("function is nonzero outside R ∪ R̃".into()));
        }
    }
    let l1 = lp_norm(f, 1.0);
    let total = f.integral();
    if total.abs() > 1e-9 * l1.max(f64::MIN_POSITIVE) {
        return Err(Error::Precondition(format!("function has integral {total:e}")));
    }
    let part1 = restrict(f, &part1, &c_r)?;
    let part2 = restrict(f, &part2, &c_rt)?;
    let c1_tilde = part1.max_abs();
    let c2_tilde = part2.max_abs();

    let log_sum = (sep.0 / rad.0).log2() + (sep.1 / rad.1).log2();
    let i0 = (log_sum - 1e-12).ceil().max(1.0) as usize;
    let mid = (0.5 * (x0.0 + y0.0), 0.5 * (x0.1 + y0.1));
    let k = f64::from(2u32.pow(i0 as u32)) + 1.0;
    let r_bar = ball_rect(mid, (k * rad.0, k * rad.1))?;

    let mut terms = Vec::new();
    let d1 = telescope(&part1, r, x0, rad, i0, &r_bar, &mut terms)?;
    let d2 = telescope(&part2, r_tilde, y0, rad, i0, &r_bar, &mut terms)?;
    let doubling = d1.max(d2);
    let mass_scale = c1_tilde * r.measure(lambda) + c2_tilde * r_tilde.measure(lambda);
    Ok(TwoRectangleBound {
        terms,
        i0,
        log_sum,
        c1_tilde,
        c2_tilde,
        mass_scale,
        doubling,
        bound: (doubling + 1.0) * (i0 as f64 + 1.0) * mass_scale,
    })
}

/// Restriction of row-major values to a block, on the block's own sub-grid.
fn restrict(f: &GridFunction, values: &[f64], block: &CellRect) -> Result<GridFunction> {
    let (g1, g2) = f.domain.axes()?;
    let lambda = f.domain.lambda();
    let sub = |g: &WeightedGrid, (lo, hi): (usize, usize)| -> Result<Arc<WeightedGrid>> {
        if lo >= hi {
            return Err(Error::Precondition("rectangle contains no grid cells".into()));
        }
        Ok(Arc::new(WeightedGrid::from_boundaries(lambda, g.boundaries()[lo..=hi].to_vec())?))
    };
    let s1 = sub(g1, block.rows)?;
    let s2 = sub(g2, block.cols)?;
    let n2 = g2.len();
    let mut out = Vec::with_capacity(s1.len() * s2.len());
    for i in block.rows.0..block.rows.1 {
        for j in block.cols.0..block.cols.1 {
            out.push(values[i * n2 + j]);
        }
    }
    GridFunction::new(Domain::Product(s1, s2), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum H1Strategy {
    /// The whole function as one `∞`-atom on the bounding rectangle of its support.
    DirectFit,
    /// Normalize into a `(1,q)`-atom and run the level-set decomposition.
    Cz { q: f64 },
    TwoRectangle { r: Rectangle, r_tilde: Rectangle },
    /// Smallest of the applicable strategies among `DirectFit` and the given one.
    Best,
}

#[derive(Debug, Clone)]
pub struct H1Upper {
    pub value: f64,
    pub strategy: &'static str,
    pub terms: Vec<(f64, Atom)>,
    /// Uncertified L¹ remainder, when the strategy stops early.
    pub remainder_l1: f64,
}

/// Bounding cell block of the nonzero values.
pub fn support_block(f: &GridFunction) -> Result<Option<CellRect>> {
    let (_, g2) = f.domain.axes()?;
    let n2 = g2.len();
    let mut r = (usize::MAX, 0usize, usize::MAX, 0usize);
    for (k, &v) in f.values.iter().enumerate() {
        if v != 0.0 {
            let (i, j) = (k / n2, k % n2);
            r = (r.0.min(i), r.1.max(i + 1), r.2.min(j), r.3.max(j + 1));
        }
    }
    Ok((r.0 != usize::MAX).then(|| CellRect::new((r.0, r.1), (r.2, r.3))))
}

pub const H1_CANCELLATION_TOL: f64 = 1e-9;

/// Upper bound on the h¹ norm through an explicit decomposition.
pub fn h1_norm_upper(f: &GridFunction, strategy: &H1Strategy, cz: &CzConfig) -> Result<H1Upper> {
    let (g1, g2) = f.domain.axes()?;
    let l1 = lp_norm(f, 1.0);
    let mean = f.integral();
    if mean.abs() > H1_CANCELLATION_TOL * l1 {
        return Err(Error::NotInH1 { mean });
    }
    let Some(block) = support_block(f)? else {
        return Ok(H1Upper {
            value: 0.0,
            strategy: "zero",
            terms: vec![],
            remainder_l1: 0.0,
        });
    };
    let direct = || -> Result<H1Upper> {
        let support = block.span(g1, g2);
        let (alpha, atom) = normalize(f.clone(), support)?.expect("nonzero function");
        Ok(H1Upper {
            value: alpha,
            strategy: "direct-fit",
            terms: vec![(alpha, atom)],
            remainder_l1: 0.0,
        })
    };
    match strategy {
        H1Strategy::DirectFit | H1Strategy::Best => direct(),
        H1Strategy::TwoRectangle { r, r_tilde } => {
            let t = two_rectangle_h1_bound(f, r, r_tilde)?;
            Ok(H1Upper {
                value: t.sum_abs_alpha(),
                strategy: "two-rectangle",
                terms: t.terms,
                remainder_l1: 0.0,
            })
        }
        H1Strategy::Cz { q } => {
            let support = block.span(g1, g2);
            let mu = support.measure(f.domain.lambda());
            let scale = lp_norm(f, *q) * mu.powf(1.0 - 1.0 / q);
            let atom = Atom::new(support, f.scale(1.0 / scale), *q)?;
            let d = cz_atomic_decomposition(&atom, cz)?;
            let terms = d.terms.into_iter().map(|(a, t)| (a * scale, t)).collect::<Vec<_>>();
            let value = terms.iter().map(|(a, _)| a.abs()).sum();
            Ok(H1Upper {
                value,
                strategy: "cz",
                terms,
                remainder_l1: d.residual_norm * scale,
            })
        }
    }
}
