use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fit_slope, lambda_of, require, ExperimentReport, Params};
use crate::atoms::{cz_atomic_decomposition, two_rectangle_h1_bound, validate_atom, Atom, CellRect, CzConfig};
use crate::domain::{lp_norm, Domain, GridFunction, Interval, LambdaParam, Rectangle, WeightedGrid};
use crate::error::{Context, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtomicParams {
    pub lambda: f64,
    pub x_min: f64,
    pub x_max: f64,
    /// Power of two.
    pub cells: usize,
    pub atoms: usize,
    /// Smallest block side, in cells; the largest is half the grid.
    pub min_block: usize,
    pub q: f64,
    /// Upper end of the random spike added at the corner cell nearest the origin.
    pub spike: f64,
    pub cz: CzConfig,
    pub reconstruction_tol: f64,
    /// Σ|α| of every atom must stay below this multiple of the battery median.
    pub uniformity_factor: f64,
    /// Separations `2^k r` for `k` in this range, inclusive.
    pub separation_exponents: (u32, u32),
    pub patch_cells: usize,
    pub slope_factor: f64,
}

impl Default for AtomicParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            x_min: 0.0,
            x_max: 8.0,
            cells: 16,
            atoms: 20,
            min_block: 2,
            q: 2.0,
            spike: 8.0,
            cz: CzConfig::default(),
            reconstruction_tol: 1e-6,
            uniformity_factor: 10.0,
            separation_exponents: (2, 6),
            patch_cells: 3,
            slope_factor: 1.5,
        }
    }
}

impl Params for AtomicParams {
    fn check(&self) -> Result<()> {
        lambda_of(self.lambda)?;
        require(self.x_min >= 0.0 && self.x_max > self.x_min, "need 0 ≤ x_min < x_max")?;
        require(
            self.cells.is_power_of_two() && (8..=64).contains(&self.cells),
            "cells must be a power of two in 8..=64",
        )?;
        require(self.atoms >= 1, "need at least one atom")?;
        require(
            self.min_block >= 2 && self.min_block <= self.cells / 2,
            "min_block must lie in 2..=cells/2",
        )?;
        require(self.q > self.cz.p, "q must exceed the maximal-function exponent p")?;
        let (a, b) = self.separation_exponents;
        require(a >= 2 && b >= a + 2, "separation_exponents must start at 2 or more and span three values")?;
        require(self.patch_cells >= 1, "patch_cells must be positive")
    }
}

/// Mean-zero `(1,q)`-atom on a cell block with one spike, normalized to the size bound.
fn random_atom(dom: &Domain, block: CellRect, q: f64, spike: f64, rng: &mut ChaCha8Rng) -> Result<Atom> {
    let (g1, g2) = dom.axes()?;
    let n2 = g2.len();
    let mut f = GridFunction::zeros(dom);
    for c in block.cells(n2) {
        f.values[c] = rng.gen_range(-1.0..1.0);
    }
    let hot = block.rows.0 * n2 + block.cols.0;
    f.values[hot] += rng.gen_range(0.0..spike);
    let m = f.integral() / block.measure(g1, g2);
    for c in block.cells(n2) {
        f.values[c] -= m;
    }
    let s = block.span(g1, g2);
    let mu = s.measure(dom.lambda());
    let scale = lp_norm(&f, q) * mu.powf(1.0 - 1.0 / q);
    Atom::new(s, f.scale(1.0 / scale), q)
}

/// Grid with `cells` uniform cells on each of two intervals.
fn two_patch_axis(lambda: LambdaParam, a: &Interval, b: &Interval, cells: usize) -> Result<Arc<WeightedGrid>> {
    let mut v = Vec::new();
    for i in &[a, b] {
        for k in 0..=cells {
            v.push(i.left + i.len() * k as f64 / cells as f64);
        }
    }
    v.sort_by(f64::total_cmp);
    v.dedup_by(|x, y| (*x - *y).abs() < 1e-12);
    Ok(Arc::new(WeightedGrid::from_boundaries(lambda, v)?))
}

/// `χ_R/μ(R) − χ_R̃/μ(R̃)`.
fn two_rectangle_function(lambda: LambdaParam, r: &Rectangle, rt: &Rectangle, cells: usize) -> Result<GridFunction> {
    let dom = Domain::Product(
        two_patch_axis(lambda, &r.i1, &rt.i1, cells)?,
        two_patch_axis(lambda, &r.i2, &rt.i2, cells)?,
    );
    let (m, mt) = (r.measure(lambda), rt.measure(lambda));
    Ok(GridFunction::sample(&dom, |x, y| {
        if r.contains(x, y) {
            1.0 / m
        } else if rt.contains(x, y) {
            -1.0 / mt
        } else {
            0.0
        }
    }))
}

pub fn run(p: &AtomicParams, seed: u64, report: &mut ExperimentReport) -> Result<()> {
    let lambda = lambda_of(p.lambda)?;
    let g = Arc::new(WeightedGrid::uniform(lambda, p.x_min, p.x_max, p.cells)?);
    let dom = Domain::Product(g.clone(), g);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.cells;
    let mut sums = Vec::new();
    let (mut worst_recon, mut worst_slack, mut bad_terms, mut max_levels) = (0.0f64, f64::INFINITY, 0usize, 0usize);
    for t in 0..p.atoms {
        let (h, w) = (rng.gen_range(p.min_block..=n / 2), rng.gen_range(p.min_block..=n / 2));
        let (r0, c0) = (rng.gen_range(0..=n - h), rng.gen_range(0..=n - w));
        let a = random_atom(&dom, CellRect::new((r0, r0 + h), (c0, c0 + w)), p.q, p.spike, &mut rng)?;
        let d = cz_atomic_decomposition(&a, &p.cz).context(|| format!("atom {t}"))?;
        let l1 = lp_norm(&a.values, 1.0);
        let recon = (d.reconstruction_error(&a.values)? + d.residual_norm) / l1;
        let slack = d
            .levels
            .iter()
            .map(|l| l.slack_pointwise.min(l.slack_pmean))
            .fold(f64::INFINITY, f64::min);
        bad_terms += d
            .terms
            .iter()
            .filter(|(_, atom)| !validate_atom(atom, p.cz.atom_tol).passes())
            .count();
        worst_recon = worst_recon.max(recon);
        worst_slack = worst_slack.min(slack);
        max_levels = max_levels.max(d.levels.len());
        let s = d.sum_abs_alpha();
        report.point("sum_abs_alpha", "cz_atomic_decomposition", t as f64, s, format!("levels={}", d.levels.len()));
        report.point("reconstruction", "cz_atomic_decomposition", t as f64, recon, format!("alpha={:.4}", d.alpha));
        sums.push(s);
    }
    let mut sorted = sums.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let max = *sorted.last().unwrap();
    report.scalar("sum_abs_alpha/median", median, "cz_atomic_decomposition");
    report.scalar("levels/max", max_levels as f64, "cz_atomic_decomposition");
    report.check_le(
        "decomposition/reconstruction",
        worst_recon,
        p.reconstruction_tol,
        "worst ‖a − Σαa_i‖₁ / ‖a‖₁",
    );
    report.check(
        "decomposition/properties",
        worst_slack >= 0.0 && bad_terms == 0,
        worst_slack,
        0.0,
        format!("worst pointwise/p-mean slack over all levels; {bad_terms} emitted atoms failed validation"),
    );
    report.check_le(
        "decomposition/uniformity",
        max / median,
        p.uniformity_factor,
        "largest Σ|α| over the battery median",
    );

    let r = Rectangle::new(Interval::new(1.0, 1.5)?, Interval::new(2.0, 2.5)?);
    let radius = 0.25;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for k in p.separation_exponents.0..=p.separation_exponents.1 {
        let sep = radius * f64::from(1u32 << k);
        let rt = Rectangle::new(
            Interval::new(r.i1.left + sep, r.i1.right + sep)?,
            Interval::new(r.i2.left + sep, r.i2.right + sep)?,
        );
        let f = two_rectangle_function(lambda, &r, &rt, p.patch_cells)?;
        let b = two_rectangle_h1_bound(&f, &r, &rt).context(|| format!("separation 2^{k} r"))?;
        let s = b.sum_abs_alpha();
        report.point("two_rectangle/sum_abs_alpha", "two_rectangle_h1_bound", k as f64, s, format!("i0={}", b.i0));
        xs.push(k as f64);
        ys.push(s);
    }
    let first = ys[1] - ys[0];
    let slope = fit_slope(&xs, &ys);
    report.scalar("two_rectangle/slope", slope, "two_rectangle_h1_bound");
    report.scalar("two_rectangle/first_increment", first, "two_rectangle_h1_bound");
    report.check_le(
        "two-rectangle/log-growth",
        slope,
        p.slope_factor * first,
        "fitted slope of Σ|α| in log₂(separation/r) against the first increment",
    );
    Ok(())
}
