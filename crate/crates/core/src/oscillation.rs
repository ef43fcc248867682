//! Mean oscillation norms: one-parameter BMO, little bmo, dyadic product BMO, strong maximal functions.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{GridFunction, Interval, Rectangle, WeightedGrid};
use crate::error::{Error, Result};
use crate::haar::{build_haar, product_coefficients, HaarSystem, MaskPrefix};

/// Cell ranges are half-open index ranges `lo..hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Region {
    Interval {
        lo: usize,
        hi: usize,
        interval: Interval,
    },
    Rectangle {
        rows: (usize, usize),
        cols: (usize, usize),
        rectangle: Rectangle,
    },
    /// Union of cells, stored as runs `(row, start, end)` of the row-major mask.
    OpenSet { family: String, runs: Vec<(usize, usize, usize)>, measure: f64 },
}

impl Region {
    pub fn cells(grid: &WeightedGrid, lo: usize, hi: usize) -> Self {
        Region::Interval {
            lo,
            hi,
            interval: grid.span(lo, hi),
        }
    }

    pub fn block(g1: &WeightedGrid, g2: &WeightedGrid, rows: (usize, usize), cols: (usize, usize)) -> Self {
        Region::Rectangle {
            rows,
            cols,
            rectangle: Rectangle::new(g1.span(rows.0, rows.1), g2.span(cols.0, cols.1)),
        }
    }

    /// Cells of a real interval, by node membership.
    pub fn from_interval(grid: &WeightedGrid, i: &Interval) -> Self {
        let (lo, hi) = grid.cells_in(i);
        Region::Interval { lo, hi, interval: *i }
    }

    pub fn from_rectangle(g1: &WeightedGrid, g2: &WeightedGrid, r: &Rectangle) -> Self {
        Region::Rectangle {
            rows: g1.cells_in(&r.i1),
            cols: g2.cells_in(&r.i2),
            rectangle: *r,
        }
    }

    pub fn from_mask(family: &str, mask: &[bool], n2: usize, weights: &[f64]) -> Self {
        let mut runs = Vec::new();
        for (row, chunk) in mask.chunks(n2).enumerate() {
            let mut j = 0;
            while j < n2 {
                if chunk[j] {
                    let s = j;
                    while j < n2 && chunk[j] {
                        j += 1;
                    }
                    runs.push((row, s, j));
                } else {
                    j += 1;
                }
            }
        }
        let measure = mask.iter().zip(weights).filter(|(m, _)| **m).map(|(_, w)| w).sum();
        Region::OpenSet {
            family: family.to_string(),
            runs,
            measure,
        }
    }

    /// Row-major cell indices covered by the region on a domain with `n2` columns.
    pub fn cell_indices(&self, n2: usize) -> Vec<usize> {
        match self {
            Region::Interval { lo, hi, .. } => (*lo..*hi).collect(),
            Region::Rectangle { rows, cols, .. } => (rows.0..rows.1)
                .flat_map(|i| (cols.0..cols.1).map(move |j| i * n2 + j))
                .collect(),
            Region::OpenSet { runs, .. } => runs
                .iter()
                .flat_map(|&(r, s, e)| (s..e).map(move |j| r * n2 + j))
                .collect(),
        }
    }

    pub fn mask(&self, n1: usize, n2: usize) -> Vec<bool> {
        let mut m = vec![false; n1 * n2];
        for k in self.cell_indices(n2) {
            m[k] = true;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationEstimate {
    pub norm_value: f64,
    pub argmax_region: Region,
    pub family_spec: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalFamily {
    Exhaustive,
    /// Dyadic index intervals and their half-length translates.
    DyadicShifted,
    /// Exhaustive up to `EXHAUSTIVE_CAP` cells, dyadic-shifted beyond.
    #[default]
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OscillationKind {
    #[default]
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SweepSpec {
    #[serde(default)]
    pub family: IntervalFamily,
    #[serde(default)]
    pub kind: OscillationKind,
}

impl SweepSpec {
    pub fn exhaustive() -> Self {
        Self {
            family: IntervalFamily::Exhaustive,
            kind: OscillationKind::L1,
        }
    }

    pub fn dyadic() -> Self {
        Self {
            family: IntervalFamily::DyadicShifted,
            kind: OscillationKind::L1,
        }
    }

    fn describe(&self, n: usize) -> String {
        let fam = match self.resolve(n) {
            IntervalFamily::Exhaustive => "exhaustive",
            _ => "dyadic+half-shifts",
        };
        let kind = match self.kind {
            OscillationKind::L1 => "L1",
            OscillationKind::L2 => "L2",
        };
        format!("{fam} {kind}")
    }

    fn resolve(&self, n: usize) -> IntervalFamily {
        match self.family {
            IntervalFamily::Auto if n <= EXHAUSTIVE_CAP => IntervalFamily::Exhaustive,
            IntervalFamily::Auto => IntervalFamily::DyadicShifted,
            f => f,
        }
    }
}

pub const EXHAUSTIVE_CAP: usize = 64;

/// Index intervals `lo..hi` of the family on `n` cells.
pub fn interval_family(n: usize, family: IntervalFamily) -> Vec<(usize, usize)> {
    let family = SweepSpec {
        family,
        kind: OscillationKind::L1,
    }
    .resolve(n);
    let mut out = Vec::new();
    match family {
        IntervalFamily::Exhaustive => {
            for lo in 0..n {
                for hi in lo + 1..=n {
                    out.push((lo, hi));
                }
            }
        }
        _ => {
            let mut len = 1;
            while len <= n {
                let step = (len / 2).max(1);
                let mut s = 0;
                while s + len <= n {
                    out.push((s, s + len));
                    s += step;
                }
                len *= 2;
            }
            if !out.contains(&(0, n)) {
                out.push((0, n));
            }
        }
    }
    out
}

fn region_stats(values: &[f64], weights: &[f64], cells: &[usize]) -> Result<(f64, f64)> {
    let mut m = 0.0;
    let mut s = 0.0;
    for &c in cells {
        m += weights[c];
        s += values[c] * weights[c];
    }
    if !(m > 0.0) {
        return Err(Error::DegenerateRegion);
    }
    Ok((s / m, m))
}

/// Measure-weighted average over the region's cells.
pub fn mean_over(b: &GridFunction, region: &Region) -> Result<f64> {
    let (_, n2) = b.domain.shape();
    let cells = region.cell_indices(n2.max(1));
    if cells.iter().any(|&c| c >= b.values.len()) {
        return Err(Error::GridMismatch("region exceeds the grid".into()));
    }
    let w = b.domain.weights();
    Ok(region_stats(&b.values, &w, &cells)?.0)
}

/// Mean oscillation of the region's cells.
pub fn oscillation_over(b: &GridFunction, region: &Region, kind: OscillationKind) -> Result<f64> {
    let (_, n2) = b.domain.shape();
    let cells = region.cell_indices(n2.max(1));
    let w = b.domain.weights();
    let (mean, m) = region_stats(&b.values, &w, &cells)?;
    Ok(match kind {
        OscillationKind::L1 => cells.iter().map(|&c| (b.values[c] - mean).abs() * w[c]).sum::<f64>() / m,
        OscillationKind::L2 => {
            (cells.iter().map(|&c| (b.values[c] - mean).powi(2) * w[c]).sum::<f64>() / m).sqrt()
        }
    })
}

fn line_oscillation(values: &[f64], w: &[f64], lo: usize, hi: usize, kind: OscillationKind) -> f64 {
    let mut m = 0.0;
    let mut s = 0.0;
    for k in lo..hi {
        m += w[k];
        s += values[k] * w[k];
    }
    let mean = s / m;
    match kind {
        OscillationKind::L1 => (lo..hi).map(|k| (values[k] - mean).abs() * w[k]).sum::<f64>() / m,
        OscillationKind::L2 => ((lo..hi).map(|k| (values[k] - mean).powi(2) * w[k]).sum::<f64>() / m).sqrt(),
    }
}

/// Sup and argmax over a slice of values; ties keep the first.
fn line_sup(values: &[f64], w: &[f64], family: &[(usize, usize)], kind: OscillationKind) -> (f64, (usize, usize)) {
    let mut best = (0.0, family[0]);
    for &(lo, hi) in family {
        let v = line_oscillation(values, w, lo, hi, kind);
        if v > best.0 {
            best = (v, (lo, hi));
        }
    }
    best
}

pub fn bmo_one_param(b: &GridFunction, spec: SweepSpec) -> Result<OscillationEstimate> {
    let g = b.domain.line_grid()?;
    let fam = interval_family(g.len(), spec.family);
    let (v, (lo, hi)) = line_sup(&b.values, g.measures(), &fam, spec.kind);
    Ok(OscillationEstimate {
        norm_value: v,
        argmax_region: Region::cells(g, lo, hi),
        family_spec: spec.describe(g.len()),
    })
}

/// Sup of mean oscillation over the nodes of a Haar tree (the dyadic BMO norm).
pub fn bmo_dyadic(b: &GridFunction, system: &HaarSystem) -> Result<OscillationEstimate> {
    let g = b.domain.line_grid()?;
    if !g.same_as(system.grid()) {
        return Err(Error::GridMismatch("function and Haar system use different grids".into()));
    }
    let fam: Vec<(usize, usize)> = system.nodes().iter().map(|n| (n.lo, n.hi)).collect();
    let (v, (lo, hi)) = line_sup(&b.values, g.measures(), &fam, OscillationKind::L1);
    Ok(OscillationEstimate {
        norm_value: v,
        argmax_region: Region::cells(g, lo, hi),
        family_spec: "dyadic tree L1".into(),
    })
}

pub fn little_bmo(b: &GridFunction, spec: SweepSpec) -> Result<OscillationEstimate> {
    let (g1, g2) = b.domain.axes()?;
    let (n1, n2) = (g1.len(), g2.len());
    let f1 = interval_family(n1, spec.family);
    let f2 = interval_family(n2, spec.family);
    let w1 = g1.measures();
    let w2 = g2.measures();
    let bv = &b.values;
    let kind = spec.kind;
    let per_row: Vec<(f64, usize, usize)> = f1
        .par_iter()
        .map(|&(a, c)| {
            let mut best = (0.0, 0usize);
            for (k, &(lo, hi)) in f2.iter().enumerate() {
                let mut m = 0.0;
                let mut s = 0.0;
                for i in a..c {
                    for j in lo..hi {
                        let w = w1[i] * w2[j];
                        m += w;
                        s += bv[i * n2 + j] * w;
                    }
                }
                let mean = s / m;
                let mut o = 0.0;
                for i in a..c {
                    for j in lo..hi {
                        let d = bv[i * n2 + j] - mean;
                        let w = w1[i] * w2[j];
                        o += match kind {
                            OscillationKind::L1 => d.abs() * w,
                            OscillationKind::L2 => d * d * w,
                        };
                    }
                }
                let v = match kind {
                    OscillationKind::L1 => o / m,
                    OscillationKind::L2 => (o / m).sqrt(),
                };
                if v > best.0 {
                    best = (v, k);
                }
            }
            (best.0, best.1, 0)
        })
        .collect();
    let mut best = (0.0, 0, 0);
    for (r, &(v, k, _)) in per_row.iter().enumerate() {
        if v > best.0 {
            best = (v, r, k);
        }
    }
    Ok(OscillationEstimate {
        norm_value: best.0,
        argmax_region: Region::block(g1, g2, f1[best.1], f2[best.2]),
        family_spec: format!("{} x {}", spec.describe(n1), spec.describe(n2)),
    })
}

/// `sup_{x₁} ‖b(x₁,·)‖_BMO + sup_{x₂} ‖b(·,x₂)‖_BMO`.
pub fn slice_sup_bmo(b: &GridFunction, spec: SweepSpec) -> Result<f64> {
    let (g1, g2) = b.domain.axes()?;
    let (n1, n2) = (g1.len(), g2.len());
    let fam1 = interval_family(n1, spec.family);
    let fam2 = interval_family(n2, spec.family);
    let rows = (0..n1)
        .into_par_iter()
        .map(|i| line_sup(&b.values[i * n2..(i + 1) * n2], g2.measures(), &fam2, spec.kind).0)
        .reduce(|| 0.0, f64::max);
    let cols = (0..n2)
        .into_par_iter()
        .map(|j| {
            let col: Vec<f64> = (0..n1).map(|i| b.values[i * n2 + j]).collect();
            line_sup(&col, g1.measures(), &fam1, spec.kind).0
        })
        .reduce(|| 0.0, f64::max);
    Ok(rows + cols)
}

/// Number of super-level thresholds of the square function tried as open sets.
pub const LEVEL_SET_THRESHOLDS: usize = 32;

pub fn product_bmo_dyadic(b: &GridFunction, max_depth: usize) -> Result<OscillationEstimate> {
    let (g1, g2) = b.domain.axes()?;
    let s1 = build_haar(g1, max_depth)?;
    let s2 = build_haar(g2, max_depth)?;
    product_bmo_with(b, &s1, &s2)
}

/// Carleson sup `(μ(Ω)⁻¹ Σ_{R ⊂ Ω} |⟨b, h_I⊗h_J⟩|²)^{1/2}` over dyadic rectangles and square-function level sets.
pub fn product_bmo_with(b: &GridFunction, s1: &HaarSystem, s2: &HaarSystem) -> Result<OscillationEstimate> {
    let (g1, g2) = b.domain.axes()?;
    let (n1, n2) = (g1.len(), g2.len());
    let c = product_coefficients(b, s1, s2)?;
    let (m1, m2) = (s1.internal().len(), s2.internal().len());
    let sq: Vec<Vec<f64>> = c.iter().map(|r| r.iter().map(|v| v * v).collect()).collect();

    // Family (a): sums over dyadic sub-rectangles by descendant accumulation on both axes.
    let desc = |s: &HaarSystem| -> Vec<Vec<usize>> {
        // Internal children of each internal node.
        s.internal()
            .iter()
            .map(|&id| {
                s.node(id)
                    .children
                    .iter()
                    .filter_map(|&ch| s.internal_index(ch))
                    .collect()
            })
            .collect()
    };
    let ch1 = desc(s1);
    let ch2 = desc(s2);
    // Internal nodes are listed in breadth-first order, so children follow parents.
    let mut d1 = sq.clone();
    for i in (0..m1).rev() {
        for &k in &ch1[i] {
            for j in 0..m2 {
                d1[i][j] += d1[k][j];
            }
        }
    }
    let mut d = d1;
    for row in d.iter_mut() {
        for j in (0..m2).rev() {
            let mut add = 0.0;
            for &k in &ch2[j] {
                add += row[k];
            }
            row[j] += add;
        }
    }
    let mut best_rect = (0.0, 0usize, 0usize);
    for i in 0..m1 {
        let mi = s1.node(s1.internal()[i]).measure;
        for j in 0..m2 {
            let mj = s2.node(s2.internal()[j]).measure;
            let v = d[i][j] / (mi * mj);
            if v > best_rect.0 {
                best_rect = (v, i, j);
            }
        }
    }

    // Family (b): super-level sets of the square function.
    let w = b.domain.weights();
    let mut sfun = vec![0.0; n1 * n2];
    for (ii, &i) in s1.internal().iter().enumerate() {
        let ni = s1.node(i);
        for (jj, &j) in s2.internal().iter().enumerate() {
            if sq[ii][jj] == 0.0 {
                continue;
            }
            let nj = s2.node(j);
            let v = sq[ii][jj] / (ni.measure * nj.measure);
            for x1 in ni.lo..ni.hi {
                for x2 in nj.lo..nj.hi {
                    sfun[x1 * n2 + x2] += v;
                }
            }
        }
    }
    let mut sorted: Vec<f64> = sfun.clone();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut thresholds: Vec<f64> = (0..LEVEL_SET_THRESHOLDS)
        .map(|k| {
            let q = k as f64 / LEVEL_SET_THRESHOLDS as f64;
            let idx = ((sorted.len() as f64) * q) as usize;
            sorted[idx.min(sorted.len() - 1)]
        })
        .collect();
    thresholds.dedup();
    let mut best_set: (f64, Vec<bool>) = (0.0, vec![]);
    for &t in &thresholds {
        // Level set {S ≥ t}; the lowest threshold yields the whole domain.
        let mask: Vec<bool> = sfun.iter().map(|&v| v >= t).collect();
        let om: f64 = mask.iter().zip(&w).filter(|(m, _)| **m).map(|(_, w)| w).sum();
        if !(om > 0.0) {
            continue;
        }
        let pre = MaskPrefix::new(&mask, n1, n2);
        let mut total = 0.0;
        for (ii, &i) in s1.internal().iter().enumerate() {
            let ni = s1.node(i);
            for (jj, &j) in s2.internal().iter().enumerate() {
                let nj = s2.node(j);
                if sq[ii][jj] != 0.0 && pre.full(ni.lo, ni.hi, nj.lo, nj.hi) {
                    total += sq[ii][jj];
                }
            }
        }
        let v = total / om;
        if v > best_set.0 {
            best_set = (v, mask);
        }
    }

    let (value, region, label) = if best_set.0 > best_rect.0 {
        (
            best_set.0,
            Region::from_mask("square-function level set", &best_set.1, n2, &w),
            "level set",
        )
    } else {
        let ni = s1.node(s1.internal().get(best_rect.1).copied().unwrap_or(0));
        let nj = s2.node(s2.internal().get(best_rect.2).copied().unwrap_or(0));
        (
            best_rect.0,
            Region::block(g1, g2, (ni.lo, ni.hi), (nj.lo, nj.hi)),
            "dyadic rectangle",
        )
    };
    Ok(OscillationEstimate {
        norm_value: value.sqrt(),
        argmax_region: region,
        family_spec: format!("dyadic Haar Carleson sup; attained on {label}"),
    })
}

/// Carleson sum for a given open set, for recomputing a product BMO estimate.
pub fn carleson_value(b: &GridFunction, omega: &[bool], s1: &HaarSystem, s2: &HaarSystem) -> Result<f64> {
    let (g1, g2) = b.domain.axes()?;
    let (n1, n2) = (g1.len(), g2.len());
    let c = product_coefficients(b, s1, s2)?;
    let pre = MaskPrefix::new(omega, n1, n2);
    let w = b.domain.weights();
    let om: f64 = omega.iter().zip(&w).filter(|(m, _)| **m).map(|(_, w)| w).sum();
    if !(om > 0.0) {
        return Err(Error::DegenerateRegion);
    }
    let mut total = 0.0;
    for (ii, &i) in s1.internal().iter().enumerate() {
        let ni = s1.node(i);
        for (jj, &j) in s2.internal().iter().enumerate() {
            let nj = s2.node(j);
            if pre.full(ni.lo, ni.hi, nj.lo, nj.hi) {
                total += c[ii][jj].powi(2);
            }
        }
    }
    Ok((total / om).sqrt())
}

/// `[M_s(|f|^p)]^{1/p}` with the sup over all cell-aligned rectangles containing each cell.
pub fn strong_maximal(f: &GridFunction, p: f64) -> Result<GridFunction> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::param("p must be finite and at least 1"));
    }
    let (g1, g2) = f.domain.axes()?;
    let g: Vec<f64> = f.values.iter().map(|v| v.abs().powf(p)).collect();
    let m = strong_maximal_raw(&g, g1, g2);
    let values = m.into_iter().map(|v| v.powf(1.0 / p)).collect();
    GridFunction::new(f.domain.clone(), values)
}

/// Exact strong maximal function of a nonnegative row-major array.
pub(crate) fn strong_maximal_raw(g: &[f64], g1: &Arc<WeightedGrid>, g2: &Arc<WeightedGrid>) -> Vec<f64> {
    let (n1, n2) = (g1.len(), g2.len());
    let w1 = g1.measures();
    let w2 = g2.measures();
    // For each top row a: S_a[i][j] = max over b > i ≥ a and column intervals containing j.
    let per_top: Vec<Vec<f64>> = (0..n1)
        .into_par_iter()
        .map(|a| {
            let mut col_mass = vec![0.0; n2];
            let mut col_w = 0.0;
            let mut rowbest: Vec<Vec<f64>> = Vec::with_capacity(n1 - a);
            for bb in a..n1 {
                col_w += w1[bb];
                for j in 0..n2 {
                    col_mass[j] += g[bb * n2 + j] * w1[bb];
                }
                // best[j] = max_{c ≤ j < d} mean(c, d)
                let mut best = vec![0.0f64; n2];
                for c in 0..n2 {
                    let mut means = vec![0.0; n2 - c];
                    let mut s = 0.0;
                    let mut m = 0.0;
                    for d in c..n2 {
                        s += col_mass[d] * w2[d];
                        m += w2[d];
                        means[d - c] = s / (m * col_w);
                    }
                    let mut run = f64::NEG_INFINITY;
                    for j in (c..n2).rev() {
                        run = run.max(means[j - c]);
                        if run > best[j] {
                            best[j] = run;
                        }
                    }
                }
                rowbest.push(best);
            }
            // Fold over bottom rows.
            let mut out = vec![0.0; (n1 - a) * n2];
            let mut run = vec![0.0f64; n2];
            for bb in (a..n1).rev() {
                for j in 0..n2 {
                    run[j] = run[j].max(rowbest[bb - a][j]);
                }
                out[(bb - a) * n2..(bb - a + 1) * n2].copy_from_slice(&run);
            }
            out
        })
        .collect();
    let mut m = vec![0.0f64; n1 * n2];
    for (a, s) in per_top.iter().enumerate() {
        for i in a..n1 {
            for j in 0..n2 {
                let v = s[(i - a) * n2 + j];
                if v > m[i * n2 + j] {
                    m[i * n2 + j] = v;
                }
            }
        }
    }
    m
}
