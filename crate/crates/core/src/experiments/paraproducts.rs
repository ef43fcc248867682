use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fit_slope, lambda_of, require, ExperimentReport, Params};
use crate::domain::{lp_norm, Domain, GridFunction, WeightedGrid};
use crate::error::{Context, Result};
use crate::haar::{
    biparameter_paraproduct, build_haar_full, paraproduct_b0_tilde, paraproduct_bk, paraproduct_p, Family,
    HaarSystem, InnerSymbol,
};
use crate::oscillation::{bmo_dyadic, product_bmo_with};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParaproductParams {
    pub lambda: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub line_cells: usize,
    pub product_cells: usize,
    pub trials: usize,
    /// `B_k` is swept over `k = 0..=max_k`.
    pub max_k: usize,
    /// Largest shift parameter drawn for the biparameter families.
    pub max_shift: usize,
    pub max_log_slope: f64,
}

impl Default for ParaproductParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            x_min: 0.1,
            x_max: 10.0,
            line_cells: 64,
            product_cells: 16,
            trials: 50,
            max_k: 6,
            max_shift: 2,
            max_log_slope: 0.1,
        }
    }
}

impl Params for ParaproductParams {
    fn check(&self) -> Result<()> {
        lambda_of(self.lambda)?;
        require(self.x_min >= 0.0 && self.x_max > self.x_min, "need 0 ≤ x_min < x_max")?;
        require(
            self.line_cells.is_power_of_two() && self.line_cells <= 128,
            "line_cells must be a power of two ≤ 128",
        )?;
        require(
            self.product_cells.is_power_of_two() && self.product_cells <= 64,
            "product_cells must be a power of two ≤ 64",
        )?;
        require(self.trials >= 1, "need at least one trial")?;
        require(
            1usize << self.max_k <= self.line_cells,
            "max_k exceeds the depth of the line grid",
        )?;
        require(self.max_k >= 2, "need max_k ≥ 2 to fit a slope")
    }
}

/// Random symbol with Haar coefficients `ξ_I·μ(I)^{1/2}` at a random subset of nodes.
fn random_symbol(sys: &HaarSystem, dom: &Domain, rng: &mut ChaCha8Rng) -> GridFunction {
    let mut v = vec![0.0; dom.len()];
    for &id in sys.internal() {
        if rng.gen_bool(0.5) {
            continue;
        }
        let c = rng.gen_range(-1.0..1.0) * sys.node(id).measure.sqrt();
        let h = sys.haar_function(id);
        v.iter_mut().zip(&h.values).for_each(|(a, b)| *a += c * b);
    }
    GridFunction { domain: dom.clone(), values: v }
}

fn random_values(dom: &Domain, rng: &mut ChaCha8Rng) -> GridFunction {
    GridFunction {
        domain: dom.clone(),
        values: (0..dom.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

fn random_product_symbol(s1: &HaarSystem, s2: &HaarSystem, dom: &Domain, rng: &mut ChaCha8Rng) -> GridFunction {
    let n2 = s2.grid().len();
    let mut v = vec![0.0; dom.len()];
    for &i in s1.internal() {
        for &j in s2.internal() {
            if rng.gen_bool(0.75) {
                continue;
            }
            let c = rng.gen_range(-1.0..1.0) * (s1.node(i).measure * s2.node(j).measure).sqrt();
            let (hi, hj) = (s1.haar_function(i), s2.haar_function(j));
            for (x, a) in v.iter_mut().enumerate() {
                *a += c * hi.values[x / n2] * hj.values[x % n2];
            }
        }
    }
    GridFunction { domain: dom.clone(), values: v }
}

fn grid(p: &ParaproductParams, n: usize) -> Result<Arc<WeightedGrid>> {
    let lambda = lambda_of(p.lambda)?;
    let g = if p.x_min > 0.0 {
        WeightedGrid::geometric(lambda, p.x_min, p.x_max, n)?
    } else {
        WeightedGrid::uniform(lambda, p.x_min, p.x_max, n)?
    };
    Ok(Arc::new(g))
}

fn record(report: &mut ExperimentReport, family: &str, source: &str, ratios: &[f64]) -> f64 {
    let sup = ratios.iter().cloned().fold(0.0, f64::max);
    for (t, r) in ratios.iter().enumerate() {
        report.point(&format!("{family}/ratio"), source, t as f64, *r, "");
    }
    report.scalar(format!("{family}/sup_ratio"), sup, source);
    report.check(
        &format!("{family}/finite"),
        sup.is_finite() && ratios.len() > 0,
        sup,
        f64::INFINITY,
        format!("{} trials", ratios.len()),
    );
    sup
}

pub fn run(p: &ParaproductParams, seed: u64, report: &mut ExperimentReport) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let g = grid(p, p.line_cells)?;
    let sys = build_haar_full(&g)?;
    let line = Domain::Line(g.clone());
    let mut bk_sups = Vec::new();
    let mut bk_ratios = vec![Vec::new(); p.max_k + 1];
    let (mut tilde, mut tri) = (Vec::new(), Vec::new());
    for t in 0..p.trials {
        let b = random_symbol(&sys, &line, &mut rng);
        let a = random_symbol(&sys, &line, &mut rng);
        let f = random_values(&line, &mut rng);
        let nb = bmo_dyadic(&b, &sys)?.norm_value;
        let na = bmo_dyadic(&a, &sys)?.norm_value;
        let nf = lp_norm(&f, 2.0);
        if !(nb > 0.0 && na > 0.0 && nf > 0.0) {
            continue;
        }
        for (k, r) in bk_ratios.iter_mut().enumerate() {
            let out = paraproduct_bk(&b, &f, k, &sys).context(|| format!("B_{k}, trial {t}"))?;
            r.push(lp_norm(&out, 2.0) / (nb * nf));
        }
        tilde.push(lp_norm(&paraproduct_b0_tilde(&b, &f, &sys)?, 2.0) / (nb * nf));
        tri.push(lp_norm(&paraproduct_p(&b, &a, &f, &sys)?, 2.0) / (nb * na * nf));
    }
    for (k, r) in bk_ratios.iter().enumerate() {
        bk_sups.push(record(report, &format!("line/B_{k}"), "paraproduct_bk / bmo_dyadic", r));
    }
    record(report, "line/B~_0", "paraproduct_b0_tilde / bmo_dyadic", &tilde);
    record(report, "line/P", "paraproduct_p / bmo_dyadic", &tri);
    let ks: Vec<f64> = (0..=p.max_k).map(|k| k as f64).collect();
    let logs: Vec<f64> = bk_sups.iter().map(|s| s.ln()).collect();
    for (k, s) in bk_sups.iter().enumerate() {
        report.point("line/B_k/sup", "paraproduct_bk", k as f64, *s, "");
    }
    let slope = fit_slope(&ks, &logs);
    report.scalar("line/B_k/log_slope", slope, "paraproduct_bk");
    report.check_le("line/B_k/log-slope", slope, p.max_log_slope, "slope of ln(sup ratio) against k");

    let g = grid(p, p.product_cells)?;
    let s = build_haar_full(&g)?;
    let dom = Domain::Product(g.clone(), g.clone());
    for family in Family::ALL {
        let mut ratios = Vec::new();
        for t in 0..p.trials {
            let b = random_product_symbol(&s, &s, &dom, &mut rng);
            let f = random_values(&dom, &mut rng);
            let (k, l) = (rng.gen_range(0..=p.max_shift), rng.gen_range(0..=p.max_shift));
            let nb = product_bmo_with(&b, &s, &s)?.norm_value;
            let nf = lp_norm(&f, 2.0);
            let (a_joint, a_line);
            let (inner, na) = match family {
                Family::PP => {
                    a_joint = random_product_symbol(&s, &s, &dom, &mut rng);
                    let na = product_bmo_with(&a_joint, &s, &s)?.norm_value;
                    (InnerSymbol::Joint(&a_joint), na)
                }
                Family::BP | Family::BTildeP | Family::PB | Family::PBTilde => {
                    a_line = random_symbol(&s, &line_of(&g), &mut rng);
                    let na = bmo_dyadic(&a_line, &s)?.norm_value;
                    let inner = if matches!(family, Family::BP | Family::BTildeP) {
                        InnerSymbol::Second(&a_line)
                    } else {
                        InnerSymbol::First(&a_line)
                    };
                    (inner, na)
                }
                _ => (InnerSymbol::None, 1.0),
            };
            if !(nb > 0.0 && na > 0.0 && nf > 0.0) {
                continue;
            }
            let out = biparameter_paraproduct(family, &b, inner, &f, k, l, &s, &s)
                .context(|| format!("{} trial {t}", family.name()))?;
            ratios.push(lp_norm(&out, 2.0) / (nb * na * nf));
        }
        record(
            report,
            &format!("product/{}", family.name()),
            "biparameter_paraproduct / product_bmo_with",
            &ratios,
        );
    }
    Ok(())
}

fn line_of(g: &Arc<WeightedGrid>) -> Domain {
    Domain::Line(g.clone())
}
