use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{fit_slope, lambda_of, require, ExperimentReport, Params};
use crate::domain::{Domain, GridFunction, Interval, WeightedGrid};
use crate::error::{Context, Result};
use crate::kernel::{diagonal_constant, riesz_of_indicator, KernelConfig};
use crate::oscillation::{product_bmo_dyadic, slice_sup_bmo, SweepSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProperSubspaceParams {
    pub lambda: f64,
    /// δ = 2^-k for k in this range, inclusive.
    pub delta_exponents: (u32, u32),
    pub slope_band: (f64, f64),
    pub x_max: f64,
    pub base_cells: usize,
    /// Refinement levels toward x = 1, first and last compared.
    pub levels: Vec<usize>,
    pub sweep: SweepSpec,
    pub min_slice_growth: f64,
    pub max_product_change: f64,
}

impl Default for ProperSubspaceParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            delta_exponents: (3, 9),
            slope_band: (0.8, 1.2),
            x_max: 4.0,
            base_cells: 16,
            levels: (1..=7).collect(),
            sweep: SweepSpec::default(),
            min_slice_growth: 0.5,
            max_product_change: 0.25,
        }
    }
}

impl Params for ProperSubspaceParams {
    fn check(&self) -> Result<()> {
        lambda_of(self.lambda)?;
        let (a, b) = self.delta_exponents;
        require(a >= 1 && b >= a + 2 && b <= 40, "delta_exponents must span at least three values in 1..=40")?;
        require(self.slope_band.0 < self.slope_band.1, "slope_band must be increasing")?;
        require(self.x_max > 2.0, "x_max must exceed 2")?;
        require(self.base_cells >= 4 && self.base_cells <= 128, "base_cells must lie in 4..=128")?;
        require(self.levels.len() >= 2, "need at least two refinement levels")?;
        require(
            self.base_cells + 2 * self.levels.iter().max().copied().unwrap_or(0) <= 128,
            "refined grid must have at most 128 cells",
        )
    }
}

pub fn run(p: &ProperSubspaceParams, report: &mut ExperimentReport) -> Result<()> {
    let lambda = lambda_of(p.lambda)?;
    let kc = KernelConfig::new(lambda);
    let chi = Interval { left: 1.0, right: 2.0 };

    let c = diagonal_constant(&kc, 1e-6)?;
    report.scalar("diagonal_constant", c, "diagonal_constant");
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for k in p.delta_exponents.0..=p.delta_exponents.1 {
        let delta = 0.5f64.powi(k as i32);
        let v = riesz_of_indicator(&kc, 1.0 - delta, &chi).context(|| format!("delta = 2^-{k}"))?;
        let x = (1.0 / delta).ln();
        report.point("indicator_transform", "riesz_of_indicator", x, v, format!("delta=2^-{k}"));
        xs.push(x);
        ys.push(v);
    }
    let slope = fit_slope(&xs, &ys);
    let normalized = slope / c;
    report.scalar("log_slope", slope, "riesz_of_indicator");
    report.scalar("log_slope/diagonal_constant", normalized, "riesz_of_indicator");
    report.check(
        "log-slope",
        normalized >= p.slope_band.0 && normalized <= p.slope_band.1,
        normalized,
        p.slope_band.1,
        format!("normalized slope must lie in [{}, {}]", p.slope_band.0, p.slope_band.1),
    );

    let (mut slice, mut product) = (Vec::new(), Vec::new());
    for &level in &p.levels {
        let grid = Arc::new(WeightedGrid::refined_toward(lambda, 0.0, p.x_max, p.base_cells, 1.0, level)?);
        let line: Vec<f64> = grid
            .nodes()
            .iter()
            .map(|&x| riesz_of_indicator(&kc, x, &chi))
            .collect::<Result<_>>()?;
        let n = grid.len();
        let dom = Domain::Product(grid.clone(), grid.clone());
        let b = GridFunction::new(dom, (0..n * n).map(|k| line[k / n] * line[k % n]).collect())?;
        let s = slice_sup_bmo(&b, p.sweep)?;
        let d = product_bmo_dyadic(&b, usize::MAX)?.norm_value;
        let finest = grid.boundaries().windows(2).map(|w| w[1] - w[0]).fold(f64::MAX, f64::min);
        report.point("slice_sup_bmo", "slice_sup_bmo", level as f64, s, format!("cells={n}"));
        report.point("product_bmo_dyadic", "product_bmo_dyadic", level as f64, d, format!("finest={finest:e}"));
        slice.push(s);
        product.push(d);
    }
    let (s0, s1) = (slice[0], *slice.last().unwrap());
    let (d0, d1) = (product[0], *product.last().unwrap());
    let growth = s1 / s0 - 1.0;
    let change = (d1 / d0 - 1.0).abs();
    report.scalar("slice_growth", growth, "slice_sup_bmo");
    report.scalar("product_change", change, "product_bmo_dyadic");
    report.check(
        "slice-growth",
        growth >= p.min_slice_growth,
        growth,
        p.min_slice_growth,
        format!("slice_sup_bmo {s0:.4} -> {s1:.4}, must grow by at least the bound"),
    );
    report.check_le(
        "product-change",
        change,
        p.max_product_change,
        format!("product_bmo_dyadic {d0:.4} -> {d1:.4}"),
    );
    Ok(())
}
