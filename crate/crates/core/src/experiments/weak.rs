use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lambda_of, require, ExperimentReport, Params};
use crate::atoms::Atom;
use crate::domain::{Domain, GridFunction, Interval, LambdaParam, Rectangle, WeightedGrid};
use crate::error::{Context, Result};
use crate::factorization::{
    atom_approximation, k0_from_constants, minimal_m_tilde, weak_factorize, ApproximationConfig, FactorizationConfig,
};
use crate::kernel::{calibrate_bound_constants, KernelConfig, SampleSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakParams {
    pub lambda: f64,
    /// Supports `[a₀,a₁]×[b₀,b₁]` of the checkerboard ∞-atoms.
    pub atoms: Vec<(f64, f64, f64, f64)>,
    pub epsilon: f64,
    pub c0_tilde: f64,
    pub levels: usize,
    /// Calibrated from the kernel bounds when absent.
    pub k0: Option<f64>,
    /// `M̃` doubles this many times from its minimal value.
    pub doublings: u32,
    pub tol: f64,
}

impl Default for WeakParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            atoms: vec![
                (0.0, 1.0, 0.0, 1.0),
                (0.5, 1.0, 0.5, 1.0),
                (1.0, 1.5, 2.0, 2.5),
                (3.0, 4.0, 1.0, 2.0),
                (20.0, 21.0, 30.0, 31.0),
            ],
            epsilon: 0.5,
            c0_tilde: 1.0,
            levels: 4,
            k0: None,
            doublings: 4,
            tol: 1e-6,
        }
    }
}

impl Params for WeakParams {
    fn check(&self) -> Result<()> {
        lambda_of(self.lambda)?;
        require(!self.atoms.is_empty(), "need at least one atom")?;
        for &(a0, a1, b0, b1) in &self.atoms {
            require(a0 >= 0.0 && a1 > a0 && b0 >= 0.0 && b1 > b0, "atom supports must be nonempty in the quadrant")?;
        }
        require(self.epsilon > 0.0 && self.c0_tilde > 0.0, "epsilon and c0_tilde must be positive")?;
        require(self.epsilon * self.c0_tilde < 1.0, "epsilon·c0_tilde must be below 1")?;
        require(self.levels >= 1, "need at least one level")?;
        require(self.doublings >= 1, "need at least one doubling")?;
        require(self.k0.map_or(true, |k| k > 0.0), "k0 must be positive")
    }
}

/// Mean-zero checkerboard ∞-atom on `[a₀,a₁]×[b₀,b₁]`.
fn checker_atom(lambda: LambdaParam, (a0, a1, b0, b1): (f64, f64, f64, f64)) -> Result<Atom> {
    let r = Rectangle::new(Interval::new(a0, a1)?, Interval::new(b0, b1)?);
    let dom = Domain::Product(
        Arc::new(WeightedGrid::uniform(lambda, a0, a1, 4)?),
        Arc::new(WeightedGrid::uniform(lambda, b0, b1, 4)?),
    );
    let f = GridFunction::sample(&dom, |x, y| {
        if (x < (a0 + a1) / 2.0) ^ (y < (b0 + b1) / 2.0) {
            1.0
        } else {
            -1.0
        }
    });
    let mu = r.measure(lambda);
    let m = f.integral() / mu;
    let f = f.map(|v| v - m);
    let f = f.scale(1.0 / (f.max_abs() * mu));
    Atom::new(r, f, f64::INFINITY)
}

pub fn run(p: &WeakParams, seed: u64, report: &mut ExperimentReport) -> Result<()> {
    let lambda = lambda_of(p.lambda)?;
    let kc = KernelConfig::new(lambda);
    let k0 = match p.k0 {
        Some(k) => k,
        None => k0_from_constants(&calibrate_bound_constants(&kc, &SampleSpec::default())?),
    };
    let m0 = minimal_m_tilde(p.epsilon, k0)?;
    report.scalar("k0", k0, "k0_from_constants");
    report.scalar("m_tilde/min", m0, "minimal_m_tilde");

    let atoms: Vec<Atom> = p.atoms.iter().map(|&s| checker_atom(lambda, s)).collect::<Result<_>>()?;
    let (mut monotone, mut worst_size) = (true, 0.0f64);
    for (i, a) in atoms.iter().enumerate() {
        let mut prev = f64::INFINITY;
        for k in 0..=p.doublings {
            let m = m0 * f64::from(1u32 << k);
            let ap = atom_approximation(a, &kc, &ApproximationConfig::new(m, k0))
                .context(|| format!("atom {i} at M̃ = {m}"))?;
            let size = ap.pair.norm_product() / ap.pair.size_bound();
            let tag = format!("case={}", ap.pair.case.tag());
            report.point(&format!("atom={i}/error_upper"), "atom_approximation", m, ap.error_upper, tag.clone());
            report.point(&format!("atom={i}/size_ratio"), "atom_approximation", m, size, tag);
            monotone &= ap.error_upper < prev;
            prev = ap.error_upper;
            worst_size = worst_size.max(size);
        }
    }
    report.check("approximation/error-monotone", monotone, 0.0, 0.0, "error_upper decreases at every doubling of M̃");
    report.check_le(
        "approximation/pair-size",
        worst_size,
        1.0,
        "largest ‖g‖₂‖h‖₂ / M̃^{2+2λ} over atoms and doublings",
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial: Vec<(f64, Atom)> = atoms
        .into_iter()
        .map(|a| {
            let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (s * rng.gen_range(0.25..1.0), a)
        })
        .collect();
    let cfg = FactorizationConfig::new(p.epsilon, p.c0_tilde, p.levels, k0);
    let res = weak_factorize(&initial, &kc, &cfg)?;
    let mut prev = res.initial;
    let mut stepwise = true;
    for l in &res.levels {
        report.point(
            "factorization/residual_h1_upper",
            "weak_factorize",
            l.level as f64,
            l.residual_h1_upper,
            format!("processed={}", l.processed),
        );
        stepwise &= l.residual_h1_upper <= cfg.contraction() * prev * (1.0 + p.tol);
        prev = l.residual_h1_upper;
    }
    let bound = cfg.contraction().powi(p.levels as i32) * res.initial * (1.0 + p.tol);
    report.scalar("factorization/initial", res.initial, "weak_factorize");
    report.scalar("factorization/residual_h1_upper", res.residual_h1_upper, "weak_factorize");
    report.scalar("factorization/norm_sum", res.norm_sum, "weak_factorize");
    report.scalar("factorization/terms", res.terms.len() as f64, "weak_factorize");
    report.check("factorization/stepwise", stepwise, 0.0, 0.0, "each level contracts by ε·C̃₀");
    report.check_le(
        "factorization/contraction",
        res.residual_h1_upper,
        bound,
        "residual_h1_upper against (ε·C̃₀)^K · initial",
    );
    Ok(())
}
