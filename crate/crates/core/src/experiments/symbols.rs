//! Symbol batteries: random Haar-coefficient tensors, products of log singularities,
//! and rectangle indicators.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{measure_interval, Domain, GridFunction, Interval, LambdaParam, WeightedGrid};
use crate::error::Result;
use crate::oscillation::product_bmo_dyadic;

/// Haar function of `i` split at `mid`, in `L²(dm_λ)` normalization.
fn haar_value(lambda: LambdaParam, i: &Interval, mid: f64, x: f64) -> f64 {
    if x < i.left || x >= i.right {
        return 0.0;
    }
    let ml = measure_interval(lambda, &Interval { left: i.left, right: mid });
    let mr = measure_interval(lambda, &Interval { left: mid, right: i.right });
    let m = ml + mr;
    if x < mid {
        (mr / (ml * m)).sqrt()
    } else {
        -(ml / (mr * m)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Symbol {
    /// `Σ c·h_I(x₁)h_J(x₂)` over cell ranges of the base grid, split at the middle index.
    Haar {
        terms: Vec<(f64, (usize, usize), (usize, usize))>,
    },
    /// `ln|x₁ − c₁|·ln|x₂ − c₂|`.
    LogProduct { c1: f64, c2: f64 },
    /// `χ_{[a₁,b₁)×[a₂,b₂)}`.
    Indicator { r1: (f64, f64), r2: (f64, f64) },
}

impl Symbol {
    pub fn tag(&self) -> &'static str {
        match self {
            Symbol::Haar { .. } => "haar",
            Symbol::LogProduct { .. } => "log",
            Symbol::Indicator { .. } => "indicator",
        }
    }
}

/// A symbol tied to the base grid whose boundaries define it, with a fixed scale.
#[derive(Debug, Clone)]
pub struct BoundSymbol {
    pub symbol: Symbol,
    pub base: Arc<WeightedGrid>,
    pub scale: f64,
}

impl BoundSymbol {
    pub fn tag(&self) -> &'static str {
        self.symbol.tag()
    }

    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        let b = self.base.boundaries();
        let l = self.base.lambda();
        let v = match &self.symbol {
            Symbol::Haar { terms } => terms
                .iter()
                .map(|(c, (a1, e1), (a2, e2))| {
                    let i = Interval { left: b[*a1], right: b[*e1] };
                    let j = Interval { left: b[*a2], right: b[*e2] };
                    c * haar_value(l, &i, b[(a1 + e1) / 2], x1) * haar_value(l, &j, b[(a2 + e2) / 2], x2)
                })
                .sum(),
            Symbol::LogProduct { c1, c2 } => (x1 - c1).abs().ln() * (x2 - c2).abs().ln(),
            Symbol::Indicator { r1, r2 } => {
                if (r1.0..r1.1).contains(&x1) && (r2.0..r2.1).contains(&x2) {
                    1.0
                } else {
                    0.0
                }
            }
        };
        self.scale * v
    }

    pub fn sample(&self, dom: &Domain) -> GridFunction {
        GridFunction::sample(dom, |x, y| self.eval(x, y))
    }
}

/// Dyadic index range of the base grid at `level`, position `k`.
fn dyadic_range(n: usize, level: u32, k: usize) -> (usize, usize) {
    let len = n >> level;
    (k * len, (k + 1) * len)
}

/// Mixed battery on a base grid with `2^d` cells; Haar symbols are scaled to unit
/// dyadic product BMO on the base grid.
pub fn battery(base: &Arc<WeightedGrid>, count: usize, seed: u64) -> Result<Vec<BoundSymbol>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = base.len();
    let depth = n.trailing_zeros().min(4);
    let b = base.boundaries();
    let dom = Domain::Product(base.clone(), base.clone());
    let mut out = Vec::with_capacity(count);
    for s in 0..count {
        let symbol = match s % 3 {
            0 => {
                let terms = (0..8)
                    .map(|_| {
                        let (l1, l2) = (rng.gen_range(0..depth), rng.gen_range(0..depth));
                        let i = dyadic_range(n, l1, rng.gen_range(0..1usize << l1));
                        let j = dyadic_range(n, l2, rng.gen_range(0..1usize << l2));
                        let mi = measure_interval(base.lambda(), &Interval { left: b[i.0], right: b[i.1] });
                        let mj = measure_interval(base.lambda(), &Interval { left: b[j.0], right: b[j.1] });
                        (rng.gen_range(-1.0..1.0) * (mi * mj).sqrt(), i, j)
                    })
                    .collect();
                Symbol::Haar { terms }
            }
            1 => Symbol::LogProduct {
                c1: b[rng.gen_range(1..n)],
                c2: b[rng.gen_range(1..n)],
            },
            _ => {
                let mut pick = || {
                    let a = rng.gen_range(0..n - 1);
                    let e = rng.gen_range(a + 1..n.min(a + n / 2 + 1) + 1).min(n);
                    (b[a], b[e])
                };
                let r1 = pick();
                let r2 = pick();
                Symbol::Indicator { r1, r2 }
            }
        };
        let mut sym = BoundSymbol {
            symbol,
            base: base.clone(),
            scale: 1.0,
        };
        if let Symbol::Haar { .. } = sym.symbol {
            let v = product_bmo_dyadic(&sym.sample(&dom), usize::MAX)?.norm_value;
            if v > 0.0 {
                sym.scale = 1.0 / v;
            }
        }
        out.push(sym);
    }
    Ok(out)
}
