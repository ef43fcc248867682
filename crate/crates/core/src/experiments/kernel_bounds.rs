use serde::{Deserialize, Serialize};

use super::{lambda_of, require, ExperimentReport, Params};
use crate::error::Result;
use crate::kernel::{
    asymptotic_extent, calibrate_bound_constants, log_space, riesz_kernel, KernelConfig, Regime, SampleSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelBoundsParams {
    pub lambdas: Vec<f64>,
    pub x_min: f64,
    pub x_max: f64,
    pub x_points: usize,
    pub ratio_points: usize,
    pub far_ratio_max: f64,
    pub near_zero_ratio_min: f64,
    pub diagonal_gap_min: f64,
    /// Regimes are cut where the scaled kernel leaves this factor of its limit.
    pub asymptotic_band: f64,
    pub exponent_tol: f64,
    pub diagonal_band: f64,
    pub dilations: Vec<f64>,
    pub homogeneity_tol: f64,
}

impl Default for KernelBoundsParams {
    fn default() -> Self {
        Self {
            lambdas: vec![0.5, 1.0, 2.0],
            x_min: 0.1,
            x_max: 10.0,
            x_points: 10,
            ratio_points: 24,
            far_ratio_max: 1000.0,
            near_zero_ratio_min: 1e-3,
            diagonal_gap_min: 1e-3,
            asymptotic_band: 2.0,
            exponent_tol: 0.05,
            diagonal_band: 2.0,
            dilations: vec![2.0, 10.0],
            homogeneity_tol: 1e-6,
        }
    }
}

impl Params for KernelBoundsParams {
    fn check(&self) -> Result<()> {
        require(!self.lambdas.is_empty(), "lambdas must not be empty")?;
        for &l in &self.lambdas {
            lambda_of(l)?;
        }
        require(self.x_min > 0.0 && self.x_max > self.x_min, "need 0 < x_min < x_max")?;
        require(self.x_points >= 2 && self.ratio_points >= 4, "need x_points ≥ 2 and ratio_points ≥ 4")?;
        require(self.far_ratio_max > 2.0, "far_ratio_max must exceed 2")?;
        require(
            self.near_zero_ratio_min > 0.0 && self.near_zero_ratio_min < 0.5,
            "near_zero_ratio_min must lie in (0, 0.5)",
        )?;
        require(self.diagonal_gap_min > 0.0 && self.diagonal_gap_min < 0.1, "diagonal_gap_min must lie in (0, 0.1)")?;
        require(self.asymptotic_band > 1.0 && self.diagonal_band > 1.0, "bands must exceed 1")?;
        require(self.dilations.iter().all(|&t| t > 0.0), "dilations must be positive")
    }
}

/// Least squares `ln|K| ≈ c + a·ln x + b·ln y`; returns `(a, b)`.
fn fit_exponents(samples: &[(f64, f64, f64)]) -> (f64, f64) {
    let n = samples.len() as f64;
    let u: Vec<f64> = samples.iter().map(|s| s.0.ln()).collect();
    let v: Vec<f64> = samples.iter().map(|s| s.1.ln()).collect();
    let z: Vec<f64> = samples.iter().map(|s| s.2.abs().ln()).collect();
    let mean = |a: &[f64]| a.iter().sum::<f64>() / n;
    let (mu, mv, mz) = (mean(&u), mean(&v), mean(&z));
    let mut suu = 0.0;
    let mut svv = 0.0;
    let mut suv = 0.0;
    let mut suz = 0.0;
    let mut svz = 0.0;
    for k in 0..samples.len() {
        let (du, dv, dz) = (u[k] - mu, v[k] - mv, z[k] - mz);
        suu += du * du;
        svv += dv * dv;
        suv += du * dv;
        suz += du * dz;
        svz += dv * dz;
    }
    let det = suu * svv - suv * suv;
    ((svv * suz - suv * svz) / det, (suu * svz - suv * suz) / det)
}

pub(super) fn run(p: &KernelBoundsParams, report: &mut ExperimentReport) -> Result<()> {
    let spec = SampleSpec {
        x_min: p.x_min,
        x_max: p.x_max,
        x_points: p.x_points,
        ratio_points: p.ratio_points,
        far_ratio_max: p.far_ratio_max,
        near_zero_ratio_min: p.near_zero_ratio_min,
        diagonal_gap_min: p.diagonal_gap_min,
        ..SampleSpec::default()
    };
    let xs = log_space(p.x_min, p.x_max, p.x_points);
    let mut worst_homogeneity: f64 = 0.0;
    let mut all_ok = true;
    for &l in &p.lambdas {
        let cfg = KernelConfig::new(lambda_of(l)?);
        let tag = format!("lambda={l}");
        let k = calibrate_bound_constants(&cfg, &spec)?;
        for (name, v) in [
            ("K1", k.k1),
            ("K2", k.k2),
            ("K3", k.k3),
            ("C_K1", k.c_k1),
            ("C_K2", k.c_k2),
            ("C_K3", k.c_k3),
        ] {
            report.scalar(format!("{tag}/{name}"), v, "kernel::calibrate_bound_constants");
        }
        let k1 = k.k1.max(asymptotic_extent(&cfg, &spec, Regime::Far, p.asymptotic_band)?);
        let k2 = k.k2.min(asymptotic_extent(&cfg, &spec, Regime::NearZero, p.asymptotic_band)?);
        let k3 = k.k3.min(asymptotic_extent(&cfg, &spec, Regime::NearDiagonal, p.asymptotic_band)?);
        for (name, v) in [("K1_fit", k1), ("K2_fit", k2), ("K3_fit", k3)] {
            report.scalar(format!("{tag}/{name}"), v, "kernel::asymptotic_extent");
        }

        let regimes = [
            (Regime::Far, log_space(k1, p.far_ratio_max, p.ratio_points)),
            (Regime::NearZero, log_space(p.near_zero_ratio_min, k2, p.ratio_points)),
            (
                Regime::NearDiagonal,
                log_space(p.diagonal_gap_min, k3, p.ratio_points).iter().map(|g| 1.0 + g).collect(),
            ),
        ];
        for (regime, ratios) in regimes {
            let name = match regime {
                Regime::Far => "far",
                Regime::NearZero => "near-zero",
                Regime::NearDiagonal => "near-diagonal",
            };
            let mut samples = Vec::with_capacity(xs.len() * ratios.len());
            for &x in &xs {
                for &r in &ratios {
                    samples.push((x, r * x, riesz_kernel(&cfg, x, r * x)?));
                }
            }
            let want_positive = regime != Regime::NearZero;
            let bad_signs = samples.iter().filter(|s| (s.2 > 0.0) != want_positive).count();
            report.check_le(
                &format!("{tag}/{name}/signs"),
                bad_signs as f64,
                0.0,
                format!("{} samples", samples.len()),
            );
            report.scalar(format!("{tag}/{name}/samples"), samples.len() as f64, "kernel::riesz_kernel");
            all_ok &= bad_signs == 0;
            for s in samples.iter().filter(|s| s.0 == xs[0]) {
                report.point(
                    &format!("{name}/scaled"),
                    "kernel::riesz_kernel",
                    s.1 / s.0,
                    regime.scaled(l, s.0, s.1, s.2),
                    &tag,
                );
            }
            match regime {
                Regime::Far | Regime::NearZero => {
                    let (a, b) = fit_exponents(&samples);
                    let (wa, wb) = if regime == Regime::Far {
                        (1.0, -(2.0 * l + 2.0))
                    } else {
                        (-(2.0 * l + 1.0), 0.0)
                    };
                    report.scalar(format!("{tag}/{name}/x_exponent"), a, "kernel::riesz_kernel");
                    report.scalar(format!("{tag}/{name}/y_exponent"), b, "kernel::riesz_kernel");
                    let dev = (a - wa).abs().max((b - wb).abs());
                    report.check_le(
                        &format!("{tag}/{name}/exponents"),
                        dev,
                        p.exponent_tol,
                        format!("fitted x^{a:.4} y^{b:.4}, expected x^{wa} y^{wb}"),
                    );
                    all_ok &= dev <= p.exponent_tol;
                }
                Regime::NearDiagonal => {
                    let scaled: Vec<f64> = samples.iter().map(|s| regime.scaled(l, s.0, s.1, s.2)).collect();
                    let lo = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = scaled.iter().cloned().fold(0.0, f64::max);
                    let band = hi / lo;
                    report.scalar(format!("{tag}/{name}/band"), band, "kernel::riesz_kernel");
                    report.check_le(
                        &format!("{tag}/{name}/band"),
                        band,
                        p.diagonal_band,
                        "max/min of kernel·(y−x)·x^{2λ}",
                    );
                    all_ok &= lo > 0.0 && band <= p.diagonal_band;
                }
            }
            for &t in &p.dilations {
                for s in &samples {
                    let scaled = riesz_kernel(&cfg, t * s.0, t * s.1)? * t.powf(2.0 * l + 1.0);
                    worst_homogeneity = worst_homogeneity.max((scaled / s.2 - 1.0).abs());
                }
            }
        }
        let diag = crate::kernel::diagonal_constant(&cfg, p.diagonal_gap_min)?;
        report.scalar(format!("{tag}/diagonal_constant"), diag, "kernel::diagonal_constant");
    }
    report.scalar("homogeneity/max_relative_deviation", worst_homogeneity, "kernel::riesz_kernel");
    report.check_le("homogeneity", worst_homogeneity, p.homogeneity_tol, "max |K(tx,ty)t^{2λ+1}/K(x,y) − 1|");
    report.check("regime-suite", all_ok, all_ok as u8 as f64, 1.0, "every sign, exponent and band check");
    Ok(())
}
