use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::symbols::{battery, BoundSymbol};
use super::{lambda_of, require, ExperimentReport, Params};
use crate::domain::{Domain, GridFunction, WeightedGrid};
use crate::error::{Context, Error, Result};
use crate::factorization::{bmo_lower_via_pairing, PairingTest};
use crate::kernel::KernelConfig;
use crate::operators::{
    build_riesz, commutator, iterated_commutator, operator_norm, tensor_lift, Axis, DiagonalPolicy, DiscreteOperator,
};
use crate::oscillation::{little_bmo, mean_over, product_bmo_dyadic, Region, SweepSpec};

/// Geometric base grid, its refinements, and the symbol battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatterySpec {
    pub lambda: f64,
    pub x_min: f64,
    pub x_max: f64,
    /// Power of two.
    pub base_cells: usize,
    /// Each refinement doubles the cells per axis.
    pub refinements: usize,
    pub symbols: usize,
    pub norm_tol: f64,
}

impl Default for BatterySpec {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            x_min: 0.1,
            x_max: 10.0,
            base_cells: 32,
            refinements: 1,
            symbols: 30,
            norm_tol: 1e-6,
        }
    }
}

impl BatterySpec {
    fn check(&self) -> Result<()> {
        lambda_of(self.lambda)?;
        require(self.x_min > 0.0 && self.x_max > self.x_min, "need 0 < x_min < x_max")?;
        require(
            self.base_cells.is_power_of_two() && self.base_cells >= 8,
            "base_cells must be a power of two ≥ 8",
        )?;
        require(self.refinements >= 1, "need at least one refinement")?;
        require(
            self.base_cells << self.refinements <= 128,
            "finest grid must have at most 128 cells per axis",
        )?;
        require(self.symbols >= 3, "need at least 3 symbols")?;
        require(self.norm_tol > 0.0, "norm_tol must be positive")
    }

    fn grid(&self, cells: usize) -> Result<Arc<WeightedGrid>> {
        Ok(Arc::new(WeightedGrid::geometric(
            lambda_of(self.lambda)?,
            self.x_min,
            self.x_max,
            cells,
        )?))
    }

    fn sizes(&self) -> Vec<usize> {
        (0..=self.refinements).map(|k| self.base_cells << k).collect()
    }

    fn battery(&self, seed: u64) -> Result<Vec<BoundSymbol>> {
        battery(&self.grid(self.base_cells)?, self.symbols, seed)
    }
}

/// Riesz transform on one axis grid and its two lifts.
struct Riesz {
    dom: Domain,
    r1: DiscreteOperator,
    r2: DiscreteOperator,
}

fn riesz_pair(grid: Arc<WeightedGrid>) -> Result<Riesz> {
    let kc = KernelConfig::new(grid.lambda());
    let r = build_riesz(&grid, &kc, DiagonalPolicy::Zero)?;
    let dom = Domain::Product(grid.clone(), grid);
    let r1 = tensor_lift(&r, Axis::First, &dom)?;
    let r2 = tensor_lift(&r, Axis::Second, &dom)?;
    Ok(Riesz { dom, r1, r2 })
}

fn drift(a: f64, b: f64) -> f64 {
    (b / a - 1.0).abs()
}

fn geometric_mean(v: &[f64]) -> f64 {
    (v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpperBoundParams {
    pub battery: BatterySpec,
    pub drift_tol: f64,
}

impl Default for UpperBoundParams {
    fn default() -> Self {
        Self {
            battery: BatterySpec::default(),
            drift_tol: 0.25,
        }
    }
}

impl Params for UpperBoundParams {
    fn check(&self) -> Result<()> {
        self.battery.check()?;
        require(self.drift_tol > 0.0, "drift_tol must be positive")
    }
}

pub fn run_upper(p: &UpperBoundParams, seed: u64, report: &mut ExperimentReport) -> Result<()> {
    let symbols = p.battery.battery(seed)?;
    let mut sups = Vec::new();
    for n in p.battery.sizes() {
        let rz = riesz_pair(p.battery.grid(n)?)?;
        let mut sup = 0.0f64;
        for (k, s) in symbols.iter().enumerate() {
            let b = s.sample(&rz.dom);
            let bmo = product_bmo_dyadic(&b, usize::MAX)?.norm_value;
            let c = iterated_commutator(&b, &rz.r1, &rz.r2)?;
            let norm = operator_norm(&c, p.battery.norm_tol).context(|| format!("symbol {k} on {n} cells"))?;
            let ratio = norm / bmo;
            report.point(
                &format!("cells={n}/ratio"),
                "operator_norm(iterated_commutator) / product_bmo_dyadic",
                k as f64,
                ratio,
                s.tag(),
            );
            sup = sup.max(ratio);
        }
        report.scalar(format!("cells={n}/sup_ratio"), sup, "operator_norm / product_bmo_dyadic");
        sups.push(sup);
    }
    for w in sups.windows(2) {
        let d = drift(w[0], w[1]);
        report.check_le(
            "sup-ratio-drift",
            d,
            p.drift_tol,
            format!("sup ratio {:.4} -> {:.4} under refinement", w[0], w[1]),
        );
    }
    let all_finite = sups.iter().all(|s| s.is_finite());
    report.check("sup-ratio-finite", all_finite, sups.iter().cloned().fold(0.0, f64::max), f64::INFINITY, "");
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivalenceParams {
    pub battery: BatterySpec,
    pub sweep: SweepSpec,
    pub band: f64,
    pub drift_tol: f64,
    /// Pairing test atoms live on dyadic rectangles down to this depth.
    pub pairing_depth: u32,
}

impl Default for EquivalenceParams {
    fn default() -> Self {
        Self {
            battery: BatterySpec::default(),
            sweep: SweepSpec::default(),
            band: 20.0,
            drift_tol: 0.25,
            pairing_depth: 3,
        }
    }
}

impl Params for EquivalenceParams {
    fn check(&self) -> Result<()> {
        self.battery.check()?;
        require(self.band > 1.0, "band must exceed 1")?;
        require(self.drift_tol > 0.0, "drift_tol must be positive")
    }
}

/// `(1,∞)`-atom `s − mean(s)` on a cell block, `s` the sign of `b − m_R`, scaled to `‖·‖∞ ≤ μ(R)⁻¹`.
fn sign_atom(b: &GridFunction, rows: (usize, usize), cols: (usize, usize)) -> Result<Option<PairingTest>> {
    let (g1, g2) = b.domain.axes()?;
    let region = Region::block(g1, g2, rows, cols);
    let m = mean_over(b, &region)?;
    let n2 = g2.len();
    let w = b.domain.weights();
    let cells = region.cell_indices(n2);
    let mut f = vec![0.0; b.values.len()];
    let mut mass = 0.0;
    let mut total = 0.0;
    for &c in &cells {
        f[c] = (b.values[c] - m).signum();
        mass += f[c] * w[c];
        total += w[c];
    }
    let shift = mass / total;
    let mut peak = 0.0f64;
    for &c in &cells {
        f[c] -= shift;
        peak = peak.max(f[c].abs());
    }
    if peak == 0.0 {
        return Ok(None);
    }
    let scale = 1.0 / (peak * total);
    Ok(Some(PairingTest {
        f: GridFunction::new(b.domain.clone(), f.into_iter().map(|v| v * scale).collect())?,
        h1_upper: 1.0,
    }))
}

fn pairing_battery(b: &GridFunction, argmax: &Region, depth: u32) -> Result<Vec<PairingTest>> {
    let (g1, g2) = b.domain.axes()?;
    let mut blocks = Vec::new();
    if let Region::Rectangle { rows, cols, .. } = argmax {
        blocks.push((*rows, *cols));
    }
    for l1 in 0..=depth {
        for l2 in 0..=depth {
            let (s1, s2) = (g1.len() >> l1, g2.len() >> l2);
            for a in 0..1usize << l1 {
                for c in 0..1usize << l2 {
                    blocks.push(((a * s1, (a + 1) * s1), (c * s2, (c + 1) * s2)));
                }
            }
        }
    }
    let mut out = Vec::new();
    for (rows, cols) in blocks {
        if let Some(t) = sign_atom(b, rows, cols)? {
            out.push(t);
        }
    }
    Ok(out)
}

const PAIRS: [(&str, usize, usize); 3] = [
    ("first-order/little", 1, 0),
    ("product/little", 2, 0),
    ("product/first-order", 2, 1),
];

pub fn run_equivalence(p: &EquivalenceParams, seed: u64, report: &mut ExperimentReport) -> Result<()> {
    let symbols = p.battery.battery(seed)?;
    let mut means: Vec<[f64; 3]> = Vec::new();
    for n in p.battery.sizes() {
        let rz = riesz_pair(p.battery.grid(n)?)?;
        let r12 = rz.r1.compose(&rz.r2)?;
        let mut ratios: [Vec<f64>; 3] = Default::default();
        for (k, s) in symbols.iter().enumerate() {
            let b = s.sample(&rz.dom);
            let ctx = || format!("symbol {k} on {n} cells");
            let little = little_bmo(&b, p.sweep).context(ctx)?;
            let tol = p.battery.norm_tol;
            let first = operator_norm(&commutator(&b, &rz.r1)?, tol).context(ctx)?
                + operator_norm(&commutator(&b, &rz.r2)?, tol).context(ctx)?;
            let product = operator_norm(&commutator(&b, &r12)?, tol).context(ctx)?;
            let tests = pairing_battery(&b, &little.argmax_region, p.pairing_depth)?;
            let pairing = bmo_lower_via_pairing(&b, &tests)?.value;
            let q = [little.norm_value, first, product];
            let tag = format!("{}#{k}", s.tag());
            for (name, src, v) in [
                ("little_bmo", "little_bmo", q[0]),
                ("first_order", "operator_norm(commutator R1) + operator_norm(commutator R2)", q[1]),
                ("product", "operator_norm(commutator R1R2)", q[2]),
                ("pairing_lower", "bmo_lower_via_pairing", pairing),
            ] {
                report.point(&format!("cells={n}/{name}"), src, k as f64, v, tag.clone());
            }
            if q.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Precondition(format!("a compared quantity vanishes for {tag} on {n} cells")));
            }
            for (i, (_, a, c)) in PAIRS.iter().enumerate() {
                ratios[i].push(q[*a] / q[*c]);
            }
        }
        let mut gm = [0.0; 3];
        for (i, (name, _, _)) in PAIRS.iter().enumerate() {
            let v = &ratios[i];
            let max = v.iter().cloned().fold(f64::MIN, f64::max);
            let min = v.iter().cloned().fold(f64::MAX, f64::min);
            gm[i] = geometric_mean(v);
            report.scalar(format!("cells={n}/{name}/geometric_mean"), gm[i], "ratio over battery");
            report.check_le(
                &format!("cells={n}/{name}/band"),
                max / min,
                p.band,
                format!("ratio in [{min:.4}, {max:.4}]"),
            );
        }
        means.push(gm);
    }
    for w in means.windows(2) {
        for (i, (name, _, _)) in PAIRS.iter().enumerate() {
            report.check_le(
                &format!("{name}/drift"),
                drift(w[0][i], w[1][i]),
                p.drift_tol,
                format!("geometric mean {:.4} -> {:.4}", w[0][i], w[1][i]),
            );
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundedPlusRieszParams {
    pub lambda: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub cells: Vec<usize>,
    pub symbols: usize,
    pub sweep: SweepSpec,
    /// Allowed max/min of little_bmo across the resolutions, per symbol.
    pub band: f64,
}

impl Default for BoundedPlusRieszParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            x_min: 0.1,
            x_max: 10.0,
            cells: vec![16, 32, 64],
            symbols: 4,
            sweep: SweepSpec::default(),
            band: 2.0,
        }
    }
}

impl Params for BoundedPlusRieszParams {
    fn check(&self) -> Result<()> {
        lambda_of(self.lambda)?;
        require(self.x_min > 0.0 && self.x_max > self.x_min, "need 0 < x_min < x_max")?;
        require(self.cells.len() >= 2, "need at least two resolutions")?;
        require(
            self.cells.iter().all(|&n| n >= 4 && n <= 128),
            "cells per axis must lie in 4..=128",
        )?;
        require(self.symbols >= 1, "need at least one symbol")?;
        require(self.band > 1.0, "band must exceed 1")
    }
}

/// `f + R₁g₁ + R₂g₂` with `f, g₁, g₂` indicators of random rectangles and a bounded smooth term.
#[derive(Debug, Clone, Copy)]
struct BoundedPlusRiesz {
    f: ((f64, f64), (f64, f64)),
    g1: ((f64, f64), (f64, f64)),
    g2: ((f64, f64), (f64, f64)),
    wave: f64,
}

fn indicator(r: ((f64, f64), (f64, f64)), x1: f64, x2: f64) -> f64 {
    if (r.0 .0..r.0 .1).contains(&x1) && (r.1 .0..r.1 .1).contains(&x2) {
        1.0
    } else {
        0.0
    }
}

pub fn run_bounded_plus_riesz(p: &BoundedPlusRieszParams, seed: u64, report: &mut ExperimentReport) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (p.x_min.ln(), p.x_max.ln());
    let rect = |rng: &mut ChaCha8Rng| {
        let mut side = || {
            let a = rng.gen_range(lo..hi);
            let b = rng.gen_range(lo..hi);
            (a.min(b).exp(), a.max(b).exp())
        };
        (side(), side())
    };
    let symbols: Vec<BoundedPlusRiesz> = (0..p.symbols)
        .map(|_| BoundedPlusRiesz {
            f: rect(&mut rng),
            g1: rect(&mut rng),
            g2: rect(&mut rng),
            wave: rng.gen_range(0.5..3.0),
        })
        .collect();
    let lambda = lambda_of(p.lambda)?;
    let mut values = vec![Vec::new(); symbols.len()];
    for &n in &p.cells {
        let rz = riesz_pair(Arc::new(WeightedGrid::geometric(lambda, p.x_min, p.x_max, n)?))?;
        for (k, s) in symbols.iter().enumerate() {
            let f = GridFunction::sample(&rz.dom, |x1, x2| indicator(s.f, x1, x2) + (s.wave * (x1 + x2)).sin());
            let g1 = GridFunction::sample(&rz.dom, |x1, x2| indicator(s.g1, x1, x2));
            let g2 = GridFunction::sample(&rz.dom, |x1, x2| indicator(s.g2, x1, x2));
            let b = f.add(&rz.r1.apply(&g1)?)?.add(&rz.r2.apply(&g2)?)?;
            let v = little_bmo(&b, p.sweep)
                .context(|| format!("symbol {k} on {n} cells"))?
                .norm_value;
            report.point(&format!("symbol={k}"), "little_bmo", n as f64, v, "");
            values[k].push(v);
        }
    }
    for (k, v) in values.iter().enumerate() {
        let max = v.iter().cloned().fold(f64::MIN, f64::max);
        let min = v.iter().cloned().fold(f64::MAX, f64::min);
        report.check_le(
            &format!("symbol={k}/band"),
            max / min,
            p.band,
            format!("little_bmo in [{min:.4}, {max:.4}] across resolutions"),
        );
    }
    Ok(())
}
