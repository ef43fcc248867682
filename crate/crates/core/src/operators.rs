//! Discrete Riesz transforms, multiplication operators, commutators and norm estimation.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Domain, GridFunction, WeightedGrid};
use crate::error::{Error, Result};
use crate::kernel::{riesz_kernel, KernelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DiagonalPolicy {
    /// Symmetric truncation of the principal value.
    #[default]
    Zero,
    /// Diagonal set to minus the mean of the adjacent off-diagonal entries.
    PairCancellation,
}

#[derive(Debug, Clone)]
enum Repr {
    /// `(Tf)_j = Σ_k A[j][k] f_k w_k`, row-major.
    Dense(Arc<Vec<f64>>),
    Multiply(Arc<Vec<f64>>),
    Identity,
    Lift { factor: Arc<DiscreteOperator>, axis: Axis },
    /// `outer ∘ inner`.
    Compose(Arc<DiscreteOperator>, Arc<DiscreteOperator>),
    Sum(Vec<(f64, Arc<DiscreteOperator>)>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    First,
    Second,
}

impl Axis {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Axis::First),
            2 => Ok(Axis::Second),
            _ => Err(Error::param(format!("axis must be 1 or 2, got {i}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    domain: Domain,
    repr: Repr,
    pub diagonal_policy: Option<DiagonalPolicy>,
}

impl DiscreteOperator {
    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn identity(domain: &Domain) -> Self {
        Self {
            domain: domain.clone(),
            repr: Repr::Identity,
            diagonal_policy: None,
        }
    }

    /// Operator from a table in the `Σ_k A[j][k] f_k w_k` convention.
    pub fn from_table(domain: &Domain, entries: Vec<f64>) -> Result<Self> {
        let n = domain.len();
        if entries.len() != n * n {
            return Err(Error::GridMismatch(format!(
                "table of {} entries for {n} nodes",
                entries.len()
            )));
        }
        Ok(Self {
            domain: domain.clone(),
            repr: Repr::Dense(Arc::new(entries)),
            diagonal_policy: None,
        })
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.repr, Repr::Dense(_))
    }

    /// Dense table, if this operator stores one.
    pub fn table(&self) -> Option<&[f64]> {
        match &self.repr {
            Repr::Dense(a) => Some(a),
            _ => None,
        }
    }

    pub fn compose(&self, inner: &DiscreteOperator) -> Result<Self> {
        self.domain.check_compatible(&inner.domain)?;
        Ok(Self {
            domain: self.domain.clone(),
            repr: Repr::Compose(Arc::new(self.clone()), Arc::new(inner.clone())),
            diagonal_policy: None,
        })
    }

    pub fn linear_combination(terms: &[(f64, &DiscreteOperator)]) -> Result<Self> {
        let first = terms
            .first()
            .ok_or_else(|| Error::param("empty linear combination"))?;
        for (_, t) in terms {
            first.1.domain.check_compatible(&t.domain)?;
        }
        Ok(Self {
            domain: first.1.domain.clone(),
            repr: Repr::Sum(terms.iter().map(|(c, t)| (*c, Arc::new((*t).clone()))).collect()),
            diagonal_policy: None,
        })
    }

    pub fn sub(&self, other: &DiscreteOperator) -> Result<Self> {
        Self::linear_combination(&[(1.0, self), (-1.0, other)])
    }

    pub fn add(&self, other: &DiscreteOperator) -> Result<Self> {
        Self::linear_combination(&[(1.0, self), (1.0, other)])
    }

    pub fn apply(&self, f: &GridFunction) -> Result<GridFunction> {
        self.domain.check_compatible(&f.domain)?;
        Ok(GridFunction {
            domain: self.domain.clone(),
            values: self.apply_values(&f.values),
        })
    }

    pub fn apply_values(&self, f: &[f64]) -> Vec<f64> {
        match &self.repr {
            Repr::Identity => f.to_vec(),
            Repr::Multiply(b) => b.iter().zip(f).map(|(b, v)| b * v).collect(),
            Repr::Dense(a) => {
                let w = self.domain.weights();
                let fw: Vec<f64> = f.iter().zip(&w).map(|(v, w)| v * w).collect();
                dense_apply(a, &fw)
            }
            Repr::Lift { factor, axis } => lift_apply(factor, *axis, &self.domain, f),
            Repr::Compose(outer, inner) => outer.apply_values(&inner.apply_values(f)),
            Repr::Sum(terms) => {
                let mut out = vec![0.0; f.len()];
                for (c, t) in terms {
                    for (o, v) in out.iter_mut().zip(t.apply_values(f)) {
                        *o += c * v;
                    }
                }
                out
            }
        }
    }

    /// Weighted adjoint: transposition for tables, structural for compositions.
    pub fn adjoint(&self) -> Self {
        let repr = match &self.repr {
            Repr::Identity => Repr::Identity,
            Repr::Multiply(b) => Repr::Multiply(b.clone()),
            Repr::Dense(a) => {
                let n = self.domain.len();
                let mut t = vec![0.0; n * n];
                for j in 0..n {
                    for k in 0..n {
                        t[k * n + j] = a[j * n + k];
                    }
                }
                Repr::Dense(Arc::new(t))
            }
            Repr::Lift { factor, axis } => Repr::Lift {
                factor: Arc::new(factor.adjoint()),
                axis: *axis,
            },
            Repr::Compose(outer, inner) => {
                Repr::Compose(Arc::new(inner.adjoint()), Arc::new(outer.adjoint()))
            }
            Repr::Sum(terms) => {
                Repr::Sum(terms.iter().map(|(c, t)| (*c, Arc::new(t.adjoint()))).collect())
            }
        };
        Self {
            domain: self.domain.clone(),
            repr,
            diagonal_policy: self.diagonal_policy,
        }
    }

    /// Dense table in the `Σ_k A[j][k] f_k w_k` convention.
    pub fn materialize(&self) -> Vec<f64> {
        if let Repr::Dense(a) = &self.repr {
            return a.to_vec();
        }
        let n = self.domain.len();
        let w = self.domain.weights();
        let mut t = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for k in 0..n {
            e[k] = 1.0 / w[k];
            let col = self.apply_values(&e);
            for j in 0..n {
                t[j * n + k] = col[j];
            }
            e[k] = 0.0;
        }
        t
    }

    /// `row,col,entry` lines of the materialized table.
    pub fn to_csv(&self) -> String {
        let n = self.domain.len();
        let t = self.materialize();
        let mut s = String::from("row,col,entry\n");
        for j in 0..n {
            for k in 0..n {
                let _ = writeln!(s, "{j},{k},{:e}", t[j * n + k]);
            }
        }
        s
    }
}

fn dense_apply(a: &[f64], fw: &[f64]) -> Vec<f64> {
    let n = fw.len();
    a.chunks_exact(n)
        .map(|row| row.iter().zip(fw).map(|(x, y)| x * y).sum())
        .collect()
}

fn lift_apply(factor: &DiscreteOperator, axis: Axis, domain: &Domain, f: &[f64]) -> Vec<f64> {
    let (n1, n2) = domain.shape();
    let mut out = vec![0.0; f.len()];
    match axis {
        Axis::First => {
            let mut col = vec![0.0; n1];
            for j in 0..n2 {
                for i in 0..n1 {
                    col[i] = f[i * n2 + j];
                }
                let r = factor.apply_values(&col);
                for i in 0..n1 {
                    out[i * n2 + j] = r[i];
                }
            }
        }
        Axis::Second => {
            for i in 0..n1 {
                let r = factor.apply_values(&f[i * n2..(i + 1) * n2]);
                out[i * n2..(i + 1) * n2].copy_from_slice(&r);
            }
        }
    }
    out
}

/// Off-diagonal entries `R(x_j, x_k)`; the diagonal follows `policy`.
pub fn build_riesz(
    grid: &Arc<WeightedGrid>,
    cfg: &KernelConfig,
    policy: DiagonalPolicy,
) -> Result<DiscreteOperator> {
    cfg.validate()?;
    if (grid.lambda().value() - cfg.lambda.value()).abs() > 0.0 {
        return Err(Error::param("kernel and grid use different lambda"));
    }
    let n = grid.len();
    let x = grid.nodes();
    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|j| {
            (0..n)
                .map(|k| {
                    if j == k {
                        Ok(0.0)
                    } else {
                        riesz_kernel(cfg, x[j], x[k]).map_err(|e| Error::KernelEntry {
                            row: j,
                            col: k,
                            source: Box::new(e),
                        })
                    }
                })
                .collect()
        })
        .collect();
    let mut a = Vec::with_capacity(n * n);
    for r in rows {
        a.extend(r?);
    }
    if policy == DiagonalPolicy::PairCancellation {
        for j in 0..n {
            let mut s = 0.0;
            let mut c = 0.0;
            if j > 0 {
                s += a[j * n + j - 1];
                c += 1.0;
            }
            if j + 1 < n {
                s += a[j * n + j + 1];
                c += 1.0;
            }
            if c > 0.0 {
                a[j * n + j] = -s / c;
            }
        }
    }
    let mut op = DiscreteOperator::from_table(&Domain::Line(grid.clone()), a)?;
    op.diagonal_policy = Some(policy);
    Ok(op)
}

pub fn adjoint(op: &DiscreteOperator) -> DiscreteOperator {
    op.adjoint()
}

/// Acts as `op` on one axis of `domain` and as the identity on the other.
pub fn tensor_lift(op: &DiscreteOperator, axis: Axis, domain: &Domain) -> Result<DiscreteOperator> {
    let g = op.domain.line_grid()?;
    let (a, b) = domain.axes()?;
    let target = match axis {
        Axis::First => a,
        Axis::Second => b,
    };
    if !g.same_as(target) {
        return Err(Error::GridMismatch("lifted operator does not match the axis grid".into()));
    }
    Ok(DiscreteOperator {
        domain: domain.clone(),
        repr: Repr::Lift {
            factor: Arc::new(op.clone()),
            axis,
        },
        diagonal_policy: op.diagonal_policy,
    })
}

pub fn multiplication_operator(b: &GridFunction) -> DiscreteOperator {
    DiscreteOperator {
        domain: b.domain.clone(),
        repr: Repr::Multiply(Arc::new(b.values.clone())),
        diagonal_policy: None,
    }
}

/// `[A, B] = A∘B − B∘A`.
pub fn bracket(a: &DiscreteOperator, b: &DiscreteOperator) -> Result<DiscreteOperator> {
    a.compose(b)?.sub(&b.compose(a)?)
}

/// `M_b∘op − op∘M_b`.
pub fn commutator(b: &GridFunction, op: &DiscreteOperator) -> Result<DiscreteOperator> {
    bracket(&multiplication_operator(b), op)
}

/// `[[M_b, op1], op2]`.
pub fn iterated_commutator(
    b: &GridFunction,
    op1: &DiscreteOperator,
    op2: &DiscreteOperator,
) -> Result<DiscreteOperator> {
    bracket(&commutator(b, op1)?, op2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerIteration {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 20_000,
            seed: 0x5eed,
        }
    }
}

pub fn operator_norm(op: &DiscreteOperator, tol: f64) -> Result<f64> {
    operator_norm_with(
        op,
        &PowerIteration {
            tol,
            ..PowerIteration::default()
        },
    )
}

/// Largest singular value in weighted `L²`, by power iteration on `T*T`.
pub fn operator_norm_with(op: &DiscreteOperator, cfg: &PowerIteration) -> Result<f64> {
    let w = op.domain.weights();
    let norm2 = |v: &[f64]| -> f64 { v.iter().zip(&w).map(|(x, w)| x * x * w).sum() };
    let adj = op.adjoint();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v: Vec<f64> = (0..w.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut prev = f64::NAN;
    for _ in 0..cfg.max_iter {
        let nv = norm2(&v).sqrt();
        if nv == 0.0 || !nv.is_finite() {
            return Ok(0.0);
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let u = op.apply_values(&v);
        let rho = norm2(&u);
        if rho == 0.0 {
            return Ok(0.0);
        }
        if (rho - prev).abs() <= cfg.tol * rho {
            return Ok(rho.sqrt());
        }
        prev = rho;
        v = adj.apply_values(&u);
    }
    Err(Error::NormNonConvergence {
        rayleigh: prev.sqrt(),
    })
}
