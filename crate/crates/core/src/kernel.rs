//! The Bessel Riesz kernel as a θ-integral, its adjoint, and the regime constants.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::domain::{Interval, LambdaParam};
use crate::error::{Error, Result};
use crate::quad::{self, Tolerance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaQuadrature {
    pub max_subdivisions: usize,
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for ThetaQuadrature {
    fn default() -> Self {
        Self {
            max_subdivisions: 2000,
            abs_tol: 1e-250,
            rel_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub lambda: LambdaParam,
    #[serde(default)]
    pub theta_quadrature: ThetaQuadrature,
}

impl KernelConfig {
    pub fn new(lambda: LambdaParam) -> Self {
        Self {
            lambda,
            theta_quadrature: ThetaQuadrature::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let q = &self.theta_quadrature;
        if q.max_subdivisions < 1 || !(q.abs_tol > 0.0) || !(q.rel_tol > 0.0) {
            return Err(Error::param("quadrature tolerances must be positive"));
        }
        Ok(())
    }

    fn tolerance(&self) -> Tolerance {
        Tolerance {
            abs: self.theta_quadrature.abs_tol,
            rel: self.theta_quadrature.rel_tol,
            max_panels: self.theta_quadrature.max_subdivisions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelValue {
    pub value: f64,
    pub est_error: f64,
}

/// `R(x,y)` with its quadrature error estimate.
pub fn riesz_kernel_with_error(cfg: &KernelConfig, x: f64, y: f64) -> Result<KernelValue> {
    if !(x > 0.0 && y > 0.0) {
        return Err(Error::param(format!("kernel needs x, y > 0, got ({x}, {y})")));
    }
    if x == y {
        return Err(Error::DiagonalSingularity(x));
    }
    let lam = cfg.lambda.value();
    let d = x - y;
    let xy = x * y;
    // D(θ) = (x−y)² + 4xy sin²(θ/2), x − y cosθ = (x−y) + 2y sin²(θ/2): no cancellation near θ = 0.
    let core = |theta: f64| -> (f64, f64) {
        let s = (0.5 * theta).sin();
        let s2 = s * s;
        let den = d * d + 4.0 * xy * s2;
        let num = d + 2.0 * y * s2;
        (num, den)
    };
    // Width of the near-diagonal peak in θ.
    let width = (d.abs() / xy.sqrt()).min(1.0);
    let finest = width / 16.0;
    let tol = cfg.tolerance();
    let est = if lam >= 0.5 {
        let p = 2.0 * lam - 1.0;
        let f = |theta: f64| {
            let (num, den) = core(theta);
            let sp = if p == 0.0 { 1.0 } else { theta.sin().powf(p) };
            num * sp / den.powf(lam + 1.0)
        };
        let breaks = quad::geometric_breaks_toward_left(0.0, PI, finest);
        quad::integrate(f, &breaks, tol)
    } else {
        // θ = u^{1/(2λ)} near 0 and π − θ = u^{1/(2λ)} near π remove the endpoint singularities.
        let e = 1.0 / (2.0 * lam);
        let p = 2.0 * lam - 1.0;
        let u_half = (0.5 * PI).powf(2.0 * lam);
        let jac = |t: f64| {
            // sin^{2λ−1}(t)·dθ/du with t the distance to the endpoint.
            if t == 0.0 {
                e
            } else {
                (t.sin() / t).powf(p) * e
            }
        };
        let left = |u: f64| {
            let theta = u.powf(e);
            let (num, den) = core(theta);
            num * jac(theta) / den.powf(lam + 1.0)
        };
        let right = |u: f64| {
            let phi = u.powf(e);
            let (num, den) = core(PI - phi);
            num * jac(phi) / den.powf(lam + 1.0)
        };
        let theta_breaks = quad::geometric_breaks_toward_left(0.0, 0.5 * PI, finest);
        let u_breaks: Vec<f64> = theta_breaks.iter().map(|t| t.powf(2.0 * lam)).collect();
        let a = quad::integrate(left, &u_breaks, tol);
        let b = quad::integrate(right, &[0.0, 0.5 * u_half, u_half], tol);
        quad::Estimate {
            value: a.value + b.value,
            error: a.error + b.error,
            abs_value: a.abs_value + b.abs_value,
            converged: a.converged && b.converged,
            panels: a.panels + b.panels,
        }
    };
    let c = -2.0 * lam / PI;
    if !est.converged || !est.value.is_finite() {
        return Err(Error::QuadratureNonConvergence {
            value: c * est.value,
            residual: (c * est.error).abs(),
        });
    }
    Ok(KernelValue {
        value: c * est.value,
        est_error: (c * est.error).abs(),
    })
}

pub fn riesz_kernel(cfg: &KernelConfig, x: f64, y: f64) -> Result<f64> {
    riesz_kernel_with_error(cfg, x, y).map(|k| k.value)
}

/// `R̃(x,y) = R(y,x)`.
pub fn adjoint_kernel(cfg: &KernelConfig, x: f64, y: f64) -> Result<f64> {
    riesz_kernel(cfg, y, x)
}

/// `∫_I R(x,y) dm_λ(y)`, as a principal value when `x` lies inside `I`.
pub fn riesz_of_indicator(cfg: &KernelConfig, x: f64, i: &Interval) -> Result<f64> {
    integrate_kernel_over(cfg, x, i, false)
}

/// `∫_I R(y,x) dm_λ(y)`, the adjoint transform of `χ_I` at `x`.
pub fn adjoint_of_indicator(cfg: &KernelConfig, x: f64, i: &Interval) -> Result<f64> {
    integrate_kernel_over(cfg, x, i, true)
}

fn integrate_kernel_over(cfg: &KernelConfig, x: f64, i: &Interval, adjoint: bool) -> Result<f64> {
    let lam2 = 2.0 * cfg.lambda.value();
    let k = |y: f64| -> Result<f64> {
        if adjoint {
            riesz_kernel(cfg, y, x)
        } else {
            riesz_kernel(cfg, x, y)
        }
    };
    let tol = Tolerance {
        abs: 1e-250,
        rel: 1e-10,
        max_panels: 4000,
    };
    let mut failure: Option<Error> = None;
    let mut eval = |y: f64| -> f64 {
        match k(y) {
            Ok(v) => v * y.powf(lam2),
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        }
    };
    let (a, b) = (i.left, i.right);
    let mut total = 0.0;
    let mut ok = true;
    if x > a && x < b {
        let rho = (x - a).min(b - x);
        // The pair stays bounded as t → 0; below one ulp of x it cannot be sampled.
        let pair = |t: f64, eval: &mut dyn FnMut(f64) -> f64| {
            if x + t == x || x - t == x {
                0.0
            } else {
                eval(x + t) + eval(x - t)
            }
        };
        let est = quad::integrate(
            |t| pair(t, &mut eval),
            &quad::geometric_breaks_toward_left(0.0, rho, rho * 1e-12),
            tol,
        );
        total += est.value;
        ok &= est.converged;
        let (lo, hi) = if x - a > b - x { (a, x - rho) } else { (x + rho, b) };
        if hi > lo {
            let near = if x - a > b - x { hi } else { lo };
            let breaks = if near == hi {
                quad::geometric_breaks_toward_right(lo, hi, rho * 1e-3)
            } else {
                quad::geometric_breaks_toward_left(lo, hi, rho * 1e-3)
            };
            let est = quad::integrate(&mut eval, &breaks, tol);
            total += est.value;
            ok &= est.converged;
        }
    } else {
        let dist = if x <= a { a - x } else { x - b };
        let finest = (dist * 1e-2).max((b - a) * 1e-14);
        let breaks = if x <= a {
            quad::geometric_breaks_toward_left(a, b, finest)
        } else {
            quad::geometric_breaks_toward_right(a, b, finest)
        };
        let est = quad::integrate(&mut eval, &breaks, tol);
        total += est.value;
        ok &= est.converged;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    if !ok || !total.is_finite() {
        return Err(Error::QuadratureNonConvergence {
            value: total,
            residual: f64::NAN,
        });
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelBoundConstants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub c_k1: f64,
    pub c_k2: f64,
    pub c_k3: f64,
}

/// Log-spaced sample clouds for the three kernel regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub x_points: usize,
    pub ratio_points: usize,
    /// Largest `y/x` in the far regime.
    pub far_ratio_max: f64,
    /// Smallest `y/x` in the small-`y` regime.
    pub near_zero_ratio_min: f64,
    /// Smallest `y/x − 1` in the near-diagonal regime.
    pub diagonal_gap_min: f64,
    /// Fitted constants must stay above this fraction of the regime's limiting value.
    pub min_constant_fraction: f64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            x_min: 0.1,
            x_max: 10.0,
            x_points: 8,
            ratio_points: 32,
            far_ratio_max: 1000.0,
            near_zero_ratio_min: 1e-3,
            diagonal_gap_min: 1e-3,
            min_constant_fraction: 0.25,
        }
    }
}

pub fn log_space(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let (la, lb) = (a.ln(), b.ln());
    (0..n)
        .map(|k| (la + (lb - la) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Scaled kernel samples `(ratio, min over x, max over x)` for one regime.
fn regime_samples(
    cfg: &KernelConfig,
    spec: &SampleSpec,
    ratios: &[f64],
    scale: impl Fn(f64, f64, f64) -> f64,
) -> Result<Vec<(f64, f64)>> {
    let xs = log_space(spec.x_min, spec.x_max, spec.x_points);
    let mut out = Vec::with_capacity(ratios.len());
    for &r in ratios {
        let mut lo = f64::INFINITY;
        for &x in &xs {
            let y = r * x;
            let k = riesz_kernel(cfg, x, y)?;
            lo = lo.min(scale(x, y, k));
        }
        out.push((r, lo));
    }
    Ok(out)
}

pub fn calibrate_bound_constants(cfg: &KernelConfig, spec: &SampleSpec) -> Result<KernelBoundConstants> {
    let lam = cfg.lambda.value();
    let frac = spec.min_constant_fraction;
    let n = spec.ratio_points.max(4);

    // Far regime: scan ratios from the top down, keep extending while the scaled kernel stays large.
    let far = regime_samples(cfg, spec, &log_space(2.01, spec.far_ratio_max, n), |x, y, k| {
        k * y.powf(2.0 * lam + 2.0) / x
    })?;
    let far_limit = far.last().unwrap().1;
    if !(far_limit > 0.0) {
        return Err(Error::CalibrationFailure("far regime kernel not positive".into()));
    }
    let mut k1 = f64::NAN;
    let mut c_k1 = f64::INFINITY;
    for &(r, v) in far.iter().rev() {
        if v >= frac * far_limit {
            k1 = r;
            c_k1 = c_k1.min(v);
        } else {
            break;
        }
    }

    let small = regime_samples(
        cfg,
        spec,
        &log_space(spec.near_zero_ratio_min, 0.999, n),
        |x, _y, k| -k * x.powf(2.0 * lam + 1.0),
    )?;
    let small_limit = small[0].1;
    if !(small_limit > 0.0) {
        return Err(Error::CalibrationFailure("small-y regime kernel not negative".into()));
    }
    let mut k2 = f64::NAN;
    let mut c_k2 = f64::INFINITY;
    for &(r, v) in small.iter() {
        if v >= frac * small_limit {
            k2 = r;
            c_k2 = c_k2.min(v);
        } else {
            break;
        }
    }

    let gaps = log_space(spec.diagonal_gap_min, 0.499, n);
    let ratios: Vec<f64> = gaps.iter().map(|g| 1.0 + g).collect();
    let diag = regime_samples(cfg, spec, &ratios, |x, y, k| k * (y - x) * (x * y).powf(lam))?;
    let diag_limit = diag[0].1;
    if !(diag_limit > 0.0) {
        return Err(Error::CalibrationFailure("near-diagonal kernel not positive".into()));
    }
    let mut k3 = f64::NAN;
    let mut c_k3 = f64::INFINITY;
    for &(r, v) in diag.iter() {
        if v >= frac * diag_limit {
            k3 = r - 1.0;
            c_k3 = c_k3.min(v);
        } else {
            break;
        }
    }

    let out = KernelBoundConstants {
        k1,
        k2,
        k3,
        c_k1,
        c_k2,
        c_k3,
    };
    let valid = k1 > 2.0
        && k2 > 0.0
        && k2 < 1.0
        && k3 > 0.0
        && k3 < 0.5
        && c_k1 > 0.0
        && c_k2 > 0.0
        && c_k3 > 0.0;
    if valid {
        Ok(out)
    } else {
        Err(Error::CalibrationFailure(format!("{out:?}")))
    }
}

/// Near-diagonal limit of `R(x, x+h)·h·(x(x+h))^λ` as `h → 0`, estimated at `h = x·gap`.
pub fn diagonal_constant(cfg: &KernelConfig, gap: f64) -> Result<f64> {
    let lam = cfg.lambda.value();
    let (x, y) = (1.0, 1.0 + gap);
    Ok(riesz_kernel(cfg, x, y)? * gap * y.powf(lam))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// `y ≥ K·x`, scaled by `y^{2λ+2}/x`.
    Far,
    /// `y ≤ K·x`, scaled by `−x^{2λ+1}`.
    NearZero,
    /// `0 < y/x − 1 ≤ K`, scaled by `(y−x)·x^{2λ}`.
    NearDiagonal,
}

impl Regime {
    pub fn scaled(self, lambda: f64, x: f64, y: f64, k: f64) -> f64 {
        match self {
            Regime::Far => k * y.powf(2.0 * lambda + 2.0) / x,
            Regime::NearZero => -k * x.powf(2.0 * lambda + 1.0),
            Regime::NearDiagonal => k * (y - x) * x.powf(2.0 * lambda),
        }
    }
}

/// Extent of the region where the scaled kernel stays within a factor `band` of its
/// limiting value: the smallest `y/x` for [`Regime::Far`], the largest `y/x` for
/// [`Regime::NearZero`], the largest `y/x − 1` for [`Regime::NearDiagonal`].
pub fn asymptotic_extent(cfg: &KernelConfig, spec: &SampleSpec, regime: Regime, band: f64) -> Result<f64> {
    if !(band > 1.0) {
        return Err(Error::param("band must exceed 1"));
    }
    let lam = cfg.lambda.value();
    let n = spec.ratio_points.max(4);
    let (ratios, to_extent): (Vec<f64>, fn(f64) -> f64) = match regime {
        Regime::Far => {
            let mut r = log_space(1.01, spec.far_ratio_max, n);
            r.reverse();
            (r, |r| r)
        }
        Regime::NearZero => (log_space(spec.near_zero_ratio_min, 0.999, n), |r| r),
        Regime::NearDiagonal => (
            log_space(spec.diagonal_gap_min, 0.999, n).iter().map(|g| 1.0 + g).collect(),
            |r| r - 1.0,
        ),
    };
    let xs = log_space(spec.x_min, spec.x_max, spec.x_points);
    let mut limit = f64::NAN;
    let mut extent = f64::NAN;
    for &r in &ratios {
        let mut ok = true;
        for &x in &xs {
            let v = regime.scaled(lam, x, r * x, riesz_kernel(cfg, x, r * x)?);
            if limit.is_nan() {
                limit = v;
            }
            if !(v > 0.0 && v >= limit / band && v <= limit * band) {
                ok = false;
            }
        }
        if !(limit > 0.0) {
            return Err(Error::CalibrationFailure(format!("{regime:?} regime has the wrong sign")));
        }
        if !ok {
            break;
        }
        extent = to_extent(r);
    }
    Ok(extent)
}
