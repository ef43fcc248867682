//! The weighted half-line `(R+, x^{2λ} dx)`, its square, and sampled functions.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct LambdaParam(f64);

impl LambdaParam {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda.is_finite() && lambda > 0.0 {
            Ok(Self(lambda))
        } else {
            Err(Error::param(format!("lambda must be positive, got {lambda}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Exponent `2λ+1` of the measure growth.
    pub fn dim(self) -> f64 {
        2.0 * self.0 + 1.0
    }
}

impl TryFrom<f64> for LambdaParam {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LambdaParam> for f64 {
    fn from(l: LambdaParam) -> f64 {
        l.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub left: f64,
    pub right: f64,
}

impl Interval {
    pub fn new(left: f64, right: f64) -> Result<Self> {
        if left.is_finite() && right.is_finite() && left >= 0.0 && right > left {
            Ok(Self { left, right })
        } else {
            Err(Error::param(format!("invalid interval ({left}, {right})")))
        }
    }

    /// The ball `I(x,t) = (x-t, x+t) ∩ R+`.
    pub fn ball(x: f64, t: f64) -> Result<Self> {
        if !(t > 0.0) || x < 0.0 || x + t <= 0.0 {
            return Err(Error::param(format!("invalid ball I({x}, {t})")));
        }
        Self::new((x - t).max(0.0), x + t)
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.left + self.right)
    }

    pub fn radius(&self) -> f64 {
        0.5 * (self.right - self.left)
    }

    pub fn len(&self) -> f64 {
        self.right - self.left
    }

    /// Concentric dilate by `c`, clipped to `R+`.
    pub fn dilate(&self, c: f64) -> Self {
        let x = self.center();
        let t = c * self.radius();
        Self {
            left: (x - t).max(0.0),
            right: x + t,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.left && x <= self.right
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        other.left >= self.left && other.right <= self.right
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rectangle {
    pub i1: Interval,
    pub i2: Interval,
}

impl Rectangle {
    pub fn new(i1: Interval, i2: Interval) -> Self {
        Self { i1, i2 }
    }

    pub fn dilate(&self, c: f64) -> Self {
        Self::new(self.i1.dilate(c), self.i2.dilate(c))
    }

    pub fn measure(&self, lambda: LambdaParam) -> f64 {
        measure_interval(lambda, &self.i1) * measure_interval(lambda, &self.i2)
    }

    pub fn contains(&self, x1: f64, x2: f64) -> bool {
        self.i1.contains(x1) && self.i2.contains(x2)
    }
}

/// `m_λ(I) = (b^{2λ+1} - a^{2λ+1})/(2λ+1)`.
pub fn measure_interval(lambda: LambdaParam, i: &Interval) -> f64 {
    measure_between(lambda, i.left, i.right)
}

pub(crate) fn measure_between(lambda: LambdaParam, a: f64, b: f64) -> f64 {
    let d = lambda.dim();
    // a^d - b^d loses digits when a ≈ b; factor out b^d and use exp_m1.
    let ratio = if b > 0.0 { a / b } else { 0.0 };
    let rel = if ratio > 0.0 {
        -(d * ratio.ln()).exp_m1()
    } else {
        1.0
    };
    b.powf(d) * rel / d
}

/// `m_λ(I(x,2t)) / m_λ(I(x,t))` for the ball read off from `i`.
pub fn doubling_ratio(lambda: LambdaParam, i: &Interval) -> f64 {
    measure_interval(lambda, &i.dilate(2.0)) / measure_interval(lambda, i)
}

pub fn dyadic_children(i: &Interval) -> (Interval, Interval) {
    let m = i.center();
    (
        Interval {
            left: i.left,
            right: m,
        },
        Interval {
            left: m,
            right: i.right,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    Uniform,
    Geometric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lambda: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub cells: usize,
    #[serde(default = "default_spacing")]
    pub spacing: Spacing,
}

fn default_spacing() -> Spacing {
    Spacing::Geometric
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGrid {
    lambda: LambdaParam,
    boundaries: Vec<f64>,
    nodes: Vec<f64>,
    measures: Vec<f64>,
}

impl WeightedGrid {
    pub fn from_boundaries(lambda: LambdaParam, boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(Error::param("grid needs at least one cell"));
        }
        if boundaries[0] < 0.0 || !boundaries.iter().all(|x| x.is_finite()) {
            return Err(Error::param("grid boundaries must be finite and non-negative"));
        }
        if boundaries.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("grid boundaries must increase strictly"));
        }
        let nodes = boundaries.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let measures: Vec<f64> = boundaries
            .windows(2)
            .map(|w| measure_between(lambda, w[0], w[1]))
            .collect();
        if measures.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::param("grid has a cell of zero measure"));
        }
        Ok(Self {
            lambda,
            boundaries,
            nodes,
            measures,
        })
    }

    pub fn uniform(lambda: LambdaParam, x_min: f64, x_max: f64, cells: usize) -> Result<Self> {
        check_range(x_min, x_max, cells)?;
        let h = (x_max - x_min) / cells as f64;
        let mut b: Vec<f64> = (0..=cells).map(|k| x_min + h * k as f64).collect();
        b[cells] = x_max;
        Self::from_boundaries(lambda, b)
    }

    pub fn geometric(lambda: LambdaParam, x_min: f64, x_max: f64, cells: usize) -> Result<Self> {
        check_range(x_min, x_max, cells)?;
        if x_min <= 0.0 {
            return Err(Error::param("geometric spacing needs x_min > 0"));
        }
        let step = (x_max / x_min).ln() / cells as f64;
        let mut b: Vec<f64> = (0..=cells).map(|k| x_min * (step * k as f64).exp()).collect();
        b[0] = x_min;
        b[cells] = x_max;
        Self::from_boundaries(lambda, b)
    }

    pub fn from_spec(spec: &GridSpec) -> Result<Self> {
        let lambda = LambdaParam::new(spec.lambda)?;
        match spec.spacing {
            Spacing::Uniform => Self::uniform(lambda, spec.x_min, spec.x_max, spec.cells),
            Spacing::Geometric => Self::geometric(lambda, spec.x_min, spec.x_max, spec.cells),
        }
    }

    /// Uniform base grid whose two cells adjacent to `focus` are halved `levels` times.
    pub fn refined_toward(
        lambda: LambdaParam,
        x_min: f64,
        x_max: f64,
        base_cells: usize,
        focus: f64,
        levels: usize,
    ) -> Result<Self> {
        let base = Self::uniform(lambda, x_min, x_max, base_cells)?;
        let mut b = base.boundaries;
        for _ in 0..levels {
            let mut next = Vec::with_capacity(b.len() + 2);
            for w in b.windows(2) {
                next.push(w[0]);
                let touches = (w[0] - focus).abs() < 1e-12 * focus.abs().max(1.0)
                    || (w[1] - focus).abs() < 1e-12 * focus.abs().max(1.0)
                    || (w[0] < focus && focus < w[1]);
                if touches {
                    next.push(0.5 * (w[0] + w[1]));
                }
            }
            next.push(*b.last().unwrap());
            b = next;
        }
        Self::from_boundaries(lambda, b)
    }

    pub fn lambda(&self) -> LambdaParam {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn measures(&self) -> &[f64] {
        &self.measures
    }

    pub fn total_measure(&self) -> f64 {
        measure_between(self.lambda, self.boundaries[0], *self.boundaries.last().unwrap())
    }

    pub fn x_min(&self) -> f64 {
        self.boundaries[0]
    }

    pub fn x_max(&self) -> f64 {
        *self.boundaries.last().unwrap()
    }

    /// Interval spanned by cells `lo..hi`.
    pub fn span(&self, lo: usize, hi: usize) -> Interval {
        Interval {
            left: self.boundaries[lo],
            right: self.boundaries[hi],
        }
    }

    /// Measure of cells `lo..hi`, by closed form.
    pub fn range_measure(&self, lo: usize, hi: usize) -> f64 {
        measure_between(self.lambda, self.boundaries[lo], self.boundaries[hi])
    }

    /// Cells whose node lies in `i`, as a half-open index range (possibly empty).
    pub fn cells_in(&self, i: &Interval) -> (usize, usize) {
        let lo = self.nodes.partition_point(|&x| x < i.left);
        let hi = self.nodes.partition_point(|&x| x <= i.right);
        (lo, hi.max(lo))
    }

    /// Index of the cell containing `x`, if any.
    pub fn locate(&self, x: f64) -> Option<usize> {
        if x < self.boundaries[0] || x > self.x_max() {
            return None;
        }
        let k = self.boundaries.partition_point(|&b| b <= x);
        Some(k.saturating_sub(1).min(self.len() - 1))
    }

    pub fn same_as(&self, other: &WeightedGrid) -> bool {
        std::ptr::eq(self, other) || self == other
    }
}

fn check_range(x_min: f64, x_max: f64, cells: usize) -> Result<()> {
    if cells == 0 {
        return Err(Error::param("cells must be positive"));
    }
    if !(x_min >= 0.0 && x_max > x_min && x_max.is_finite()) {
        return Err(Error::param(format!("invalid range [{x_min}, {x_max}]")));
    }
    Ok(())
}

/// Either the half-line grid or the product of two grids.
#[derive(Debug, Clone)]
pub enum Domain {
    Line(Arc<WeightedGrid>),
    Product(Arc<WeightedGrid>, Arc<WeightedGrid>),
}

impl Domain {
    pub fn line(g: WeightedGrid) -> Self {
        Domain::Line(Arc::new(g))
    }

    pub fn product(g1: WeightedGrid, g2: WeightedGrid) -> Self {
        Domain::Product(Arc::new(g1), Arc::new(g2))
    }

    pub fn square(g: WeightedGrid) -> Self {
        let g = Arc::new(g);
        Domain::Product(g.clone(), g)
    }

    pub fn len(&self) -> usize {
        match self {
            Domain::Line(g) => g.len(),
            Domain::Product(a, b) => a.len() * b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Domain::Line(g) => (g.len(), 1),
            Domain::Product(a, b) => (a.len(), b.len()),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        match self {
            Domain::Line(g) => g.measures().to_vec(),
            Domain::Product(a, b) => {
                let mut w = Vec::with_capacity(a.len() * b.len());
                for &wa in a.measures() {
                    for &wb in b.measures() {
                        w.push(wa * wb);
                    }
                }
                w
            }
        }
    }

    pub fn lambda(&self) -> LambdaParam {
        match self {
            Domain::Line(g) => g.lambda(),
            Domain::Product(a, _) => a.lambda(),
        }
    }

    pub fn axes(&self) -> Result<(&Arc<WeightedGrid>, &Arc<WeightedGrid>)> {
        match self {
            Domain::Product(a, b) => Ok((a, b)),
            Domain::Line(_) => Err(Error::GridMismatch("expected a product grid".into())),
        }
    }

    pub fn line_grid(&self) -> Result<&Arc<WeightedGrid>> {
        match self {
            Domain::Line(g) => Ok(g),
            Domain::Product(..) => Err(Error::GridMismatch("expected a one-parameter grid".into())),
        }
    }

    pub fn compatible(&self, other: &Domain) -> bool {
        match (self, other) {
            (Domain::Line(a), Domain::Line(b)) => a.same_as(b),
            (Domain::Product(a1, a2), Domain::Product(b1, b2)) => a1.same_as(b1) && a2.same_as(b2),
            _ => false,
        }
    }

    pub fn check_compatible(&self, other: &Domain) -> Result<()> {
        if self.compatible(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch("functions live on different grids".into()))
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridFunction {
    pub domain: Domain,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(domain: Domain, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                domain.len()
            )));
        }
        Ok(Self { domain, values })
    }

    pub fn zeros(domain: &Domain) -> Self {
        Self {
            values: vec![0.0; domain.len()],
            domain: domain.clone(),
        }
    }

    pub fn constant(domain: &Domain, c: f64) -> Self {
        Self {
            values: vec![c; domain.len()],
            domain: domain.clone(),
        }
    }

    /// Samples `f` at the nodes of a one-parameter grid.
    pub fn sample_line(grid: &Arc<WeightedGrid>, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: grid.nodes().iter().map(|&x| f(x)).collect(),
            domain: Domain::Line(grid.clone()),
        }
    }

    /// Samples `f` at the node pairs of a product domain.
    pub fn sample(domain: &Domain, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = match domain {
            Domain::Line(g) => g.nodes().iter().map(|&x| f(x, 0.0)).collect(),
            Domain::Product(a, b) => {
                let mut v = Vec::with_capacity(a.len() * b.len());
                for &x1 in a.nodes() {
                    for &x2 in b.nodes() {
                        v.push(f(x1, x2));
                    }
                }
                v
            }
        };
        Self {
            domain: domain.clone(),
            values,
        }
    }

    /// `f1 ⊗ f2` on the product of their grids.
    pub fn tensor(f1: &GridFunction, f2: &GridFunction) -> Result<Self> {
        let a = f1.domain.line_grid()?.clone();
        let b = f2.domain.line_grid()?.clone();
        let mut v = Vec::with_capacity(a.len() * b.len());
        for &x in &f1.values {
            for &y in &f2.values {
                v.push(x * y);
            }
        }
        Ok(Self {
            domain: Domain::Product(a, b),
            values: v,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            domain: self.domain.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.domain.check_compatible(&other.domain)?;
        Ok(Self {
            domain: self.domain.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &GridFunction) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &GridFunction) -> Result<Self> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, t: f64) -> Self {
        self.map(|v| t * v)
    }

    pub fn integral(&self) -> f64 {
        self.domain
            .weights()
            .iter()
            .zip(&self.values)
            .map(|(w, v)| w * v)
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Value at product node `(i, j)`.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        let (_, n2) = self.domain.shape();
        self.values[i * n2 + j]
    }
}

pub fn weighted_inner_product(f: &GridFunction, g: &GridFunction) -> Result<f64> {
    f.domain.check_compatible(&g.domain)?;
    Ok(f.domain
        .weights()
        .iter()
        .zip(f.values.iter().zip(&g.values))
        .map(|(w, (a, b))| w * a * b)
        .sum())
}

pub fn lp_norm(f: &GridFunction, p: f64) -> f64 {
    if p.is_infinite() {
        return f.max_abs();
    }
    let s: f64 = f
        .domain
        .weights()
        .iter()
        .zip(&f.values)
        .map(|(w, v)| w * v.abs().powf(p))
        .sum();
    s.powf(1.0 / p)
}
