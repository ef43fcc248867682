//! Weighted martingale Haar systems, dyadic shifts and paraproducts.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Domain, GridFunction, WeightedGrid};
use crate::error::{Error, Result};
use crate::operators::DiscreteOperator;

#[derive(Debug, Clone)]
pub struct HaarNode {
    pub lo: usize,
    pub hi: usize,
    pub level: usize,
    pub parent: Option<usize>,
    /// Child node ids; empty for leaves. Only two-child splits are instantiated.
    pub children: Vec<usize>,
    pub measure: f64,
}

impl HaarNode {
    pub fn is_internal(&self) -> bool {
        !self.children.is_empty()
    }

    pub fn contains_cell(&self, c: usize) -> bool {
        self.lo <= c && c < self.hi
    }
}

#[derive(Debug, Clone)]
pub struct HaarSystem {
    grid: Arc<WeightedGrid>,
    nodes: Vec<HaarNode>,
    internal: Vec<usize>,
    internal_index: Vec<Option<usize>>,
    /// Node ids from the root down to the leaf, per cell.
    chains: Vec<Vec<usize>>,
    depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaarCoefficients {
    /// `⟨f, h⁰_root⟩`.
    pub mean: f64,
    /// `⟨f, h_I⟩` per internal node, in `HaarSystem::internal` order.
    pub cancellative: Vec<f64>,
}

/// Splits at the cell boundary closest to the metric midpoint.
fn split_index(grid: &WeightedGrid, lo: usize, hi: usize) -> usize {
    let b = grid.boundaries();
    let mid = 0.5 * (b[lo] + b[hi]);
    let mut best = lo + 1;
    for k in lo + 1..hi {
        if (b[k] - mid).abs() < (b[best] - mid).abs() {
            best = k;
        }
    }
    best
}

pub fn build_haar(grid: &Arc<WeightedGrid>, depth: usize) -> Result<HaarSystem> {
    let w = grid.measures();
    let n = grid.len();
    let mut prefix = vec![0.0; n + 1];
    for k in 0..n {
        prefix[k + 1] = prefix[k] + w[k];
    }
    let mut nodes = vec![HaarNode {
        lo: 0,
        hi: n,
        level: 0,
        parent: None,
        children: vec![],
        measure: prefix[n],
    }];
    let mut k = 0;
    while k < nodes.len() {
        let (lo, hi, level) = (nodes[k].lo, nodes[k].hi, nodes[k].level);
        if level < depth && hi - lo >= 2 {
            let s = split_index(grid, lo, hi);
            let ml = prefix[s] - prefix[lo];
            let mr = prefix[hi] - prefix[s];
            if !(ml > 0.0 && mr > 0.0) {
                return Err(Error::DegenerateSplit { lo, hi });
            }
            for (a, b, m) in [(lo, s, ml), (s, hi, mr)] {
                let id = nodes.len();
                nodes.push(HaarNode {
                    lo: a,
                    hi: b,
                    level: level + 1,
                    parent: Some(k),
                    children: vec![],
                    measure: m,
                });
                nodes[k].children.push(id);
            }
        }
        k += 1;
    }
    let internal: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].is_internal()).collect();
    let mut internal_index = vec![None; nodes.len()];
    for (k, &i) in internal.iter().enumerate() {
        internal_index[i] = Some(k);
    }
    let mut chains = vec![Vec::new(); n];
    for (c, chain) in chains.iter_mut().enumerate() {
        let mut id = 0;
        loop {
            chain.push(id);
            match nodes[id].children.iter().find(|&&ch| nodes[ch].contains_cell(c)) {
                Some(&ch) => id = ch,
                None => break,
            }
        }
    }
    let depth = nodes.iter().map(|n| n.level).max().unwrap_or(0);
    Ok(HaarSystem {
        grid: grid.clone(),
        nodes,
        internal,
        internal_index,
        chains,
        depth,
    })
}

/// Haar system split down to single cells.
pub fn build_haar_full(grid: &Arc<WeightedGrid>) -> Result<HaarSystem> {
    build_haar(grid, usize::MAX)
}

impl HaarSystem {
    pub fn grid(&self) -> &Arc<WeightedGrid> {
        &self.grid
    }

    pub fn nodes(&self) -> &[HaarNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &HaarNode {
        &self.nodes[id]
    }

    pub fn internal(&self) -> &[usize] {
        &self.internal
    }

    pub fn internal_index(&self, id: usize) -> Option<usize> {
        self.internal_index[id]
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Ancestor chain of a cell, root first.
    pub fn chain(&self, cell: usize) -> &[usize] {
        &self.chains[cell]
    }

    pub fn is_full(&self) -> bool {
        self.nodes.iter().all(|n| n.is_internal() || n.hi - n.lo == 1)
    }

    pub fn ancestor(&self, id: usize, k: usize) -> Option<usize> {
        let mut id = id;
        for _ in 0..k {
            id = self.nodes[id].parent?;
        }
        Some(id)
    }

    /// `(first cell of the right child, c/μ_l, −c/μ_r)` with `c = √(μ_l μ_r/μ)`.
    fn haar_shape(&self, id: usize) -> (usize, f64, f64) {
        let n = &self.nodes[id];
        let l = &self.nodes[n.children[0]];
        let r = &self.nodes[n.children[1]];
        let c = (l.measure * r.measure / n.measure).sqrt();
        (r.lo, c / l.measure, -c / r.measure)
    }

    /// `h_I` at a cell; zero outside `I`.
    pub fn h(&self, id: usize, cell: usize) -> f64 {
        let n = &self.nodes[id];
        if !n.is_internal() || !n.contains_cell(cell) {
            return 0.0;
        }
        let (s, vl, vr) = self.haar_shape(id);
        if cell < s {
            vl
        } else {
            vr
        }
    }

    /// `h⁰_I = χ_I/√μ(I)` at a cell.
    pub fn h0(&self, id: usize, cell: usize) -> f64 {
        let n = &self.nodes[id];
        if n.contains_cell(cell) {
            1.0 / n.measure.sqrt()
        } else {
            0.0
        }
    }

    pub fn haar_function(&self, id: usize) -> GridFunction {
        GridFunction::sample_line(&self.grid, |_| 0.0).map_indexed(|c, _| self.h(id, c))
    }

    pub fn noncancellative_function(&self, id: usize) -> GridFunction {
        GridFunction::sample_line(&self.grid, |_| 0.0).map_indexed(|c, _| self.h0(id, c))
    }

    fn weighted_prefix(&self, values: &[f64]) -> Vec<f64> {
        let w = self.grid.measures();
        let mut p = vec![0.0; values.len() + 1];
        for k in 0..values.len() {
            p[k + 1] = p[k] + values[k] * w[k];
        }
        p
    }

    fn coefficients_of(&self, values: &[f64]) -> HaarCoefficients {
        let p = self.weighted_prefix(values);
        let cancellative = self
            .internal
            .iter()
            .map(|&id| {
                let n = &self.nodes[id];
                let (s, vl, vr) = self.haar_shape(id);
                vl * (p[s] - p[n.lo]) + vr * (p[n.hi] - p[s])
            })
            .collect();
        let root = &self.nodes[0];
        HaarCoefficients {
            mean: (p[root.hi] - p[root.lo]) / root.measure.sqrt(),
            cancellative,
        }
    }

    /// `⟨f, h⁰_I⟩` for every node.
    fn noncancellative_coefficients(&self, values: &[f64]) -> Vec<f64> {
        let p = self.weighted_prefix(values);
        self.nodes
            .iter()
            .map(|n| (p[n.hi] - p[n.lo]) / n.measure.sqrt())
            .collect()
    }

    fn check_line(&self, f: &GridFunction) -> Result<()> {
        let g = f.domain.line_grid()?;
        if g.same_as(&self.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch("function and Haar system use different grids".into()))
        }
    }

    /// `Σ_{J ⊊ I} c_J h_J` per cell of `I`, for every internal `I`, as a per-cell table over levels.
    /// Entry `[cell][ℓ]` sums the chain nodes at levels `> ℓ`.
    fn strict_descendant_sums(&self, coeffs: &HaarCoefficients) -> Vec<Vec<f64>> {
        (0..self.grid.len())
            .map(|c| {
                let chain = &self.chains[c];
                let mut out = vec![0.0; chain.len()];
                let mut acc = 0.0;
                for pos in (0..chain.len()).rev() {
                    out[pos] = acc;
                    let id = chain[pos];
                    if let Some(k) = self.internal_index[id] {
                        acc += coeffs.cancellative[k] * self.h(id, c);
                    }
                }
                out
            })
            .collect()
    }
}

trait MapIndexed {
    fn map_indexed(self, f: impl Fn(usize, f64) -> f64) -> Self;
}

impl MapIndexed for GridFunction {
    fn map_indexed(mut self, f: impl Fn(usize, f64) -> f64) -> Self {
        for (k, v) in self.values.iter_mut().enumerate() {
            *v = f(k, *v);
        }
        self
    }
}

pub fn haar_coefficients(f: &GridFunction, system: &HaarSystem) -> Result<HaarCoefficients> {
    system.check_line(f)?;
    Ok(system.coefficients_of(&f.values))
}

pub fn haar_reconstruct(coeffs: &HaarCoefficients, system: &HaarSystem) -> Result<GridFunction> {
    if coeffs.cancellative.len() != system.internal.len() {
        return Err(Error::GridMismatch("coefficient count does not match the system".into()));
    }
    let values = (0..system.grid.len())
        .map(|c| {
            let mut v = coeffs.mean * system.h0(0, c);
            for &id in &system.chains[c] {
                if let Some(k) = system.internal_index[id] {
                    v += coeffs.cancellative[k] * system.h(id, c);
                }
            }
            v
        })
        .collect();
    GridFunction::new(Domain::Line(system.grid.clone()), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftCoefficient {
    pub l: usize,
    pub i: usize,
    pub j: usize,
    pub a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftParams {
    pub m: usize,
    pub n: usize,
    pub coefficients: Vec<ShiftCoefficient>,
}

impl ShiftParams {
    pub fn validate(&self, system: &HaarSystem) -> Result<()> {
        for c in &self.coefficients {
            let nodes = system.nodes();
            if c.l >= nodes.len() || c.i >= nodes.len() || c.j >= nodes.len() {
                return Err(Error::param("shift node id out of range"));
            }
            if system.ancestor(c.i, self.m) != Some(c.l) || system.ancestor(c.j, self.n) != Some(c.l) {
                return Err(Error::param(format!(
                    "shift triple ({}, {}, {}) does not match generations ({}, {})",
                    c.l, c.i, c.j, self.m, self.n
                )));
            }
            if !nodes[c.i].is_internal() || !nodes[c.j].is_internal() {
                return Err(Error::param("shift uses a leaf as a cancellative node"));
            }
            let bound = (nodes[c.i].measure * nodes[c.j].measure).sqrt() / nodes[c.l].measure;
            if c.a.abs() > bound * (1.0 + 1e-12) {
                return Err(Error::ShiftCoefficient {
                    value: c.a.abs(),
                    bound,
                });
            }
        }
        Ok(())
    }
}

/// Descendants of `id` exactly `k` generations below.
pub fn descendants_at(system: &HaarSystem, id: usize, k: usize) -> Vec<usize> {
    let mut cur = vec![id];
    for _ in 0..k {
        cur = cur
            .iter()
            .flat_map(|&c| system.node(c).children.iter().copied())
            .collect();
    }
    cur
}

/// Shift with every admissible coefficient drawn uniformly within its size bound.
pub fn random_shift(system: &HaarSystem, m: usize, n: usize, rng: &mut impl Rng) -> ShiftParams {
    let mut coefficients = Vec::new();
    for &l in system.internal() {
        let is: Vec<usize> = descendants_at(system, l, m)
            .into_iter()
            .filter(|&i| system.node(i).is_internal())
            .collect();
        let js: Vec<usize> = descendants_at(system, l, n)
            .into_iter()
            .filter(|&j| system.node(j).is_internal())
            .collect();
        for &i in &is {
            for &j in &js {
                let bound =
                    (system.node(i).measure * system.node(j).measure).sqrt() / system.node(l).measure;
                coefficients.push(ShiftCoefficient {
                    l,
                    i,
                    j,
                    a: rng.gen_range(-1.0..=1.0) * bound,
                });
            }
        }
    }
    ShiftParams { m, n, coefficients }
}

/// `Σ_L Σ_{I,J} a_{L,I,J} ⟨f, h_I⟩ h_J`.
pub fn apply_shift(params: &ShiftParams, system: &HaarSystem, f: &GridFunction) -> Result<GridFunction> {
    params.validate(system)?;
    system.check_line(f)?;
    let c = system.coefficients_of(&f.values);
    let mut out = vec![0.0; f.values.len()];
    for s in &params.coefficients {
        let fi = c.cancellative[system.internal_index(s.i).unwrap()];
        let node = system.node(s.j);
        for (cell, o) in out.iter_mut().enumerate().take(node.hi).skip(node.lo) {
            *o += s.a * fi * system.h(s.j, cell);
        }
    }
    GridFunction::new(f.domain.clone(), out)
}

/// The shift as a dense operator on the system's grid.
pub fn shift_operator(params: &ShiftParams, system: &HaarSystem) -> Result<DiscreteOperator> {
    params.validate(system)?;
    let domain = Domain::Line(system.grid.clone());
    let n = system.grid.len();
    let w = system.grid.measures();
    let mut table = vec![0.0; n * n];
    for s in &params.coefficients {
        // (Sf)(x) = Σ_y a h_J(x) h_I(y) f(y) w(y)
        let ni = system.node(s.i);
        let nj = system.node(s.j);
        for x in nj.lo..nj.hi {
            let hx = s.a * system.h(s.j, x);
            for y in ni.lo..ni.hi {
                table[x * n + y] += hx * system.h(s.i, y);
            }
        }
    }
    let _ = w;
    DiscreteOperator::from_table(&domain, table)
}

/// One axis of a paraproduct: which Haar functions meet the symbol, the input, and the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    /// `⟨b, h_{I^(k)}⟩ ⟨f, h_I⟩ h_I h_{I^(k)}`.
    Cancellative(usize),
    /// `⟨b, h_{I^(k)}⟩ ⟨f, h⁰_I⟩ h⁰_I h_{I^(k)}`.
    Noncancellative(usize),
    /// `⟨b, h_I⟩ ⟨f, h_I⟩ h_I² · Σ_{J ⊊ I} ⟨a, h_J⟩ h_J`.
    Trilinear,
}

/// Sparse description of one summand along an axis.
struct Term {
    /// Node whose cancellative Haar function pairs with the symbol.
    b_node: usize,
    /// Node and kind (`true` = cancellative) pairing with the input.
    f_node: usize,
    f_cancellative: bool,
    /// Support node of the output factor.
    support: usize,
    /// Output factor on the support cells (without the trilinear inner sum).
    out: Vec<f64>,
    /// Level of `I` for the inner sum, when trilinear.
    inner_level: Option<usize>,
}

fn axis_terms(sys: &HaarSystem, slot: Slot) -> Vec<Term> {
    let mut terms = Vec::new();
    match slot {
        Slot::Cancellative(k) | Slot::Noncancellative(k) => {
            let cancel = matches!(slot, Slot::Cancellative(_));
            for (id, node) in sys.nodes.iter().enumerate() {
                if cancel && !node.is_internal() {
                    continue;
                }
                if !cancel && k == 0 && !node.is_internal() {
                    continue;
                }
                let Some(anc) = sys.ancestor(id, k) else { continue };
                if !sys.nodes[anc].is_internal() {
                    continue;
                }
                let out = (node.lo..node.hi)
                    .map(|c| {
                        let f = if cancel { sys.h(id, c) } else { sys.h0(id, c) };
                        f * sys.h(anc, c)
                    })
                    .collect();
                terms.push(Term {
                    b_node: anc,
                    f_node: id,
                    f_cancellative: cancel,
                    support: id,
                    out,
                    inner_level: None,
                });
            }
        }
        Slot::Trilinear => {
            for &id in &sys.internal {
                let node = &sys.nodes[id];
                let out = (node.lo..node.hi).map(|c| sys.h(id, c).powi(2)).collect();
                terms.push(Term {
                    b_node: id,
                    f_node: id,
                    f_cancellative: true,
                    support: id,
                    out,
                    inner_level: Some(node.level),
                });
            }
        }
    }
    terms
}

/// Coefficient of the input against the term's input function, by node kind.
fn pick(c: &HaarCoefficients, nc: &[f64], sys: &HaarSystem, node: usize, cancellative: bool) -> f64 {
    if cancellative {
        c.cancellative[sys.internal_index(node).unwrap()]
    } else {
        nc[node]
    }
}

fn is_constant(values: &[f64]) -> bool {
    values.iter().all(|&v| v == values[0])
}

/// Generic one-parameter paraproduct along a slot; `a` feeds the trilinear inner sum.
pub fn paraproduct_line(
    b: &GridFunction,
    a: Option<&GridFunction>,
    f: &GridFunction,
    slot: Slot,
    sys: &HaarSystem,
) -> Result<GridFunction> {
    sys.check_line(b)?;
    sys.check_line(f)?;
    let mut out = vec![0.0; f.values.len()];
    if is_constant(&b.values) {
        return GridFunction::new(f.domain.clone(), out);
    }
    let bc = sys.coefficients_of(&b.values);
    let fc = sys.coefficients_of(&f.values);
    let fnc = sys.noncancellative_coefficients(&f.values);
    let inner = match (slot, a) {
        (Slot::Trilinear, Some(a)) => {
            sys.check_line(a)?;
            Some(sys.strict_descendant_sums(&sys.coefficients_of(&a.values)))
        }
        (Slot::Trilinear, None) => return Err(Error::Usage("trilinear paraproduct needs a".into())),
        _ => None,
    };
    for t in axis_terms(sys, slot) {
        let coef = bc.cancellative[sys.internal_index(t.b_node).unwrap()]
            * pick(&fc, &fnc, sys, t.f_node, t.f_cancellative);
        if coef == 0.0 {
            continue;
        }
        let node = &sys.nodes[t.support];
        for (k, c) in (node.lo..node.hi).enumerate() {
            let mut v = t.out[k];
            if let (Some(level), Some(inner)) = (t.inner_level, &inner) {
                v *= inner[c][level];
            }
            out[c] += coef * v;
        }
    }
    GridFunction::new(f.domain.clone(), out)
}

pub fn paraproduct_bk(b: &GridFunction, f: &GridFunction, k: usize, sys: &HaarSystem) -> Result<GridFunction> {
    paraproduct_line(b, None, f, Slot::Cancellative(k), sys)
}

pub fn paraproduct_b0_tilde(b: &GridFunction, f: &GridFunction, sys: &HaarSystem) -> Result<GridFunction> {
    paraproduct_line(b, None, f, Slot::Noncancellative(0), sys)
}

pub fn paraproduct_p(b: &GridFunction, a: &GridFunction, f: &GridFunction, sys: &HaarSystem) -> Result<GridFunction> {
    paraproduct_line(b, Some(a), f, Slot::Trilinear, sys)
}

/// Adjoint of `f ↦ P(b, a, f)` with `b` and `a` fixed.
pub fn paraproduct_p_adjoint(
    b: &GridFunction,
    a: &GridFunction,
    g: &GridFunction,
    sys: &HaarSystem,
) -> Result<GridFunction> {
    sys.check_line(b)?;
    sys.check_line(a)?;
    sys.check_line(g)?;
    let mut out = vec![0.0; g.values.len()];
    if is_constant(&b.values) {
        return GridFunction::new(g.domain.clone(), out);
    }
    let bc = sys.coefficients_of(&b.values);
    let inner = sys.strict_descendant_sums(&sys.coefficients_of(&a.values));
    let w = sys.grid.measures();
    for &id in &sys.internal {
        let node = &sys.nodes[id];
        let beta = bc.cancellative[sys.internal_index(id).unwrap()];
        if beta == 0.0 {
            continue;
        }
        // ⟨g, h_I² A_I⟩
        let pair: f64 = (node.lo..node.hi)
            .map(|c| g.values[c] * sys.h(id, c).powi(2) * inner[c][node.level] * w[c])
            .sum();
        for (c, o) in out.iter_mut().enumerate().take(node.hi).skip(node.lo) {
            *o += beta * pair * sys.h(id, c);
        }
    }
    GridFunction::new(g.domain.clone(), out)
}

/// Residual of `[⟨f,h⁰_root⟩h⁰_root + Σ_{J ⊋ I} ⟨f,h_J⟩h_J]·h_I = ⟨f,h⁰_I⟩h⁰_I h_I` on `I`, in `L²`.
pub fn martingale_identity_check(f: &GridFunction, node: usize, sys: &HaarSystem) -> Result<f64> {
    sys.check_line(f)?;
    let n = sys.nodes.get(node).ok_or_else(|| Error::param("node out of range"))?;
    if !n.is_internal() {
        return Err(Error::param("martingale identity needs an internal node"));
    }
    let c = sys.coefficients_of(&f.values);
    let nc = sys.noncancellative_coefficients(&f.values);
    let w = sys.grid.measures();
    let mut sq = 0.0;
    for cell in n.lo..n.hi {
        let mut lhs = c.mean * sys.h0(0, cell);
        for &j in &sys.chains[cell] {
            if sys.nodes[j].level >= n.level {
                break;
            }
            if let Some(k) = sys.internal_index[j] {
                lhs += c.cancellative[k] * sys.h(j, cell);
            }
        }
        lhs *= sys.h(node, cell);
        let rhs = nc[node] * sys.h0(node, cell) * sys.h(node, cell);
        sq += (lhs - rhs).powi(2) * w[cell];
    }
    Ok(sq.sqrt())
}

/// Product Haar coefficients `⟨b, h_I ⊗ h_J⟩`, indexed `[I internal][J internal]`.
pub fn product_coefficients(b: &GridFunction, s1: &HaarSystem, s2: &HaarSystem) -> Result<Vec<Vec<f64>>> {
    let (g1, g2) = b.domain.axes()?;
    if !g1.same_as(&s1.grid) || !g2.same_as(&s2.grid) {
        return Err(Error::GridMismatch("Haar systems do not match the product grid".into()));
    }
    let (n1, n2) = (g1.len(), g2.len());
    let rows: Vec<Vec<f64>> = (0..n1)
        .map(|i| s2.coefficients_of(&b.values[i * n2..(i + 1) * n2]).cancellative)
        .collect();
    let m2 = s2.internal.len();
    let mut out = vec![vec![0.0; m2]; s1.internal.len()];
    let mut col = vec![0.0; n1];
    for jj in 0..m2 {
        for i in 0..n1 {
            col[i] = rows[i][jj];
        }
        let c = s1.coefficients_of(&col).cancellative;
        for (ii, v) in c.into_iter().enumerate() {
            out[ii][jj] = v;
        }
    }
    Ok(out)
}

/// Coefficients of a product function against all `(u, v)` pairs of per-axis functions.
/// Each per-axis function is a node id and kind; the result is `[u][v]`.
fn mixed_coefficients(
    f: &GridFunction,
    s1: &HaarSystem,
    s2: &HaarSystem,
    fun1: &[(usize, bool)],
    fun2: &[(usize, bool)],
) -> Vec<Vec<f64>> {
    let n2 = s2.grid.len();
    let n1 = s1.grid.len();
    let w1 = s1.grid.measures();
    let w2 = s2.grid.measures();
    let eval = |s: &HaarSystem, (id, cancel): (usize, bool), c: usize| {
        if cancel {
            s.h(id, c)
        } else {
            s.h0(id, c)
        }
    };
    // T[i][v] = Σ_j f_ij w2_j v(j)
    let t: Vec<Vec<f64>> = (0..n1)
        .map(|i| {
            fun2.iter()
                .map(|&(id, cancel)| {
                    let nd = &s2.nodes[id];
                    (nd.lo..nd.hi)
                        .map(|j| f.values[i * n2 + j] * w2[j] * eval(s2, (id, cancel), j))
                        .sum()
                })
                .collect()
        })
        .collect();
    fun1.iter()
        .map(|&(id, cancel)| {
            let nd = &s1.nodes[id];
            (0..fun2.len())
                .map(|v| {
                    (nd.lo..nd.hi)
                        .map(|i| w1[i] * eval(s1, (id, cancel), i) * t[i][v])
                        .sum()
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// `B_{k,l}`
    B,
    /// `B̃^{(1)}_{k,l}`: noncancellative input on the first axis.
    BTilde1,
    /// `B̃^{(2)}_{k,l}`
    BTilde2,
    /// `B̃^{(3)}_{k,l}`
    BTilde3,
    PP,
    /// `BP_k(b, a², f)`
    BP,
    /// `B̃P_k(b, a², f)`
    BTildeP,
    /// `PB_l(b, a¹, f)`
    PB,
    /// `PB̃_l(b, a¹, f)`
    PBTilde,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::B,
        Family::BTilde1,
        Family::BTilde2,
        Family::BTilde3,
        Family::PP,
        Family::BP,
        Family::BTildeP,
        Family::PB,
        Family::PBTilde,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::B => "B",
            Family::BTilde1 => "B~1",
            Family::BTilde2 => "B~2",
            Family::BTilde3 => "B~3",
            Family::PP => "PP",
            Family::BP => "BP",
            Family::BTildeP => "B~P",
            Family::PB => "PB",
            Family::PBTilde => "PB~",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownFamily(s.to_string()))
    }

    fn slots(self, k: usize, l: usize) -> (Slot, Slot) {
        use Slot::*;
        match self {
            Family::B => (Cancellative(k), Cancellative(l)),
            Family::BTilde1 => (Noncancellative(k), Cancellative(l)),
            Family::BTilde2 => (Cancellative(k), Noncancellative(l)),
            Family::BTilde3 => (Noncancellative(k), Noncancellative(l)),
            Family::PP => (Trilinear, Trilinear),
            Family::BP => (Cancellative(k), Trilinear),
            Family::BTildeP => (Noncancellative(k), Trilinear),
            Family::PB => (Trilinear, Cancellative(l)),
            Family::PBTilde => (Trilinear, Noncancellative(l)),
        }
    }
}

/// Extra symbol of the trilinear families: joint `a` for `PP`, or one-axis `a¹`/`a²`.
pub enum InnerSymbol<'a> {
    None,
    Joint(&'a GridFunction),
    First(&'a GridFunction),
    Second(&'a GridFunction),
}

pub fn biparameter_paraproduct(
    family: Family,
    b: &GridFunction,
    a: InnerSymbol<'_>,
    f: &GridFunction,
    k: usize,
    l: usize,
    s1: &HaarSystem,
    s2: &HaarSystem,
) -> Result<GridFunction> {
    let (g1, g2) = f.domain.axes()?;
    b.domain.check_compatible(&f.domain)?;
    if !g1.same_as(&s1.grid) || !g2.same_as(&s2.grid) {
        return Err(Error::GridMismatch("Haar systems do not match the product grid".into()));
    }
    let (n1, n2) = (g1.len(), g2.len());
    let mut out = vec![0.0; n1 * n2];
    if is_constant(&b.values) {
        return GridFunction::new(f.domain.clone(), out);
    }
    let (slot1, slot2) = family.slots(k, l);
    let t1 = axis_terms(s1, slot1);
    let t2 = axis_terms(s2, slot2);

    let bco = product_coefficients(b, s1, s2)?;
    let fun1: Vec<(usize, bool)> = t1.iter().map(|t| (t.f_node, t.f_cancellative)).collect();
    let fun2: Vec<(usize, bool)> = t2.iter().map(|t| (t.f_node, t.f_cancellative)).collect();
    let fco = mixed_coefficients(f, s1, s2, &fun1, &fun2);

    // Inner sums of the trilinear slots.
    let inner1 = match (&a, slot1) {
        (InnerSymbol::First(a1), Slot::Trilinear) => {
            s1.check_line(a1)?;
            Some(s1.strict_descendant_sums(&s1.coefficients_of(&a1.values)))
        }
        _ => None,
    };
    let inner2 = match (&a, slot2) {
        (InnerSymbol::Second(a2), Slot::Trilinear) => {
            s2.check_line(a2)?;
            Some(s2.strict_descendant_sums(&s2.coefficients_of(&a2.values)))
        }
        _ => None,
    };
    let joint = match (family, &a) {
        (Family::PP, InnerSymbol::Joint(a)) => {
            a.domain.check_compatible(&f.domain)?;
            Some(product_coefficients(a, s1, s2)?)
        }
        (Family::PP, _) => return Err(Error::Usage("PP needs a joint symbol a".into())),
        _ => None,
    };
    if matches!(family, Family::BP | Family::BTildeP) && inner2.is_none() {
        return Err(Error::Usage(format!("{} needs a second-axis symbol a²", family.name())));
    }
    if matches!(family, Family::PB | Family::PBTilde) && inner1.is_none() {
        return Err(Error::Usage(format!("{} needs a first-axis symbol a¹", family.name())));
    }

    if let Some(ac) = joint {
        // Per cell pair: 2D suffix sums of a over strict descendants along both chains.
        for x1 in 0..n1 {
            let ch1 = s1.chain(x1);
            for x2 in 0..n2 {
                let ch2 = s2.chain(x2);
                let (d1, d2) = (ch1.len(), ch2.len());
                let mut m = vec![0.0; (d1 + 1) * (d2 + 1)];
                for p1 in (0..d1).rev() {
                    for p2 in (0..d2).rev() {
                        let v = match (s1.internal_index(ch1[p1]), s2.internal_index(ch2[p2])) {
                            (Some(i), Some(j)) => ac[i][j] * s1.h(ch1[p1], x1) * s2.h(ch2[p2], x2),
                            _ => 0.0,
                        };
                        m[p1 * (d2 + 1) + p2] = v + m[(p1 + 1) * (d2 + 1) + p2]
                            + m[p1 * (d2 + 1) + p2 + 1]
                            - m[(p1 + 1) * (d2 + 1) + p2 + 1];
                    }
                }
                let mut acc = 0.0;
                for p1 in 0..d1 {
                    let Some(i) = s1.internal_index(ch1[p1]) else { continue };
                    for p2 in 0..d2 {
                        let Some(j) = s2.internal_index(ch2[p2]) else { continue };
                        let strict = m[(p1 + 1) * (d2 + 1) + p2 + 1];
                        if strict == 0.0 {
                            continue;
                        }
                        acc += bco[i][j]
                            * fco[i][j]
                            * s1.h(ch1[p1], x1).powi(2)
                            * s2.h(ch2[p2], x2).powi(2)
                            * strict;
                    }
                }
                out[x1 * n2 + x2] = acc;
            }
        }
        return GridFunction::new(f.domain.clone(), out);
    }

    // Separable families: out = Σ_u o_u ⊗ (Σ_v c_uv o_v).
    let factor = |t: &Term, s: &HaarSystem, inner: &Option<Vec<Vec<f64>>>| -> Vec<(usize, f64)> {
        let node = &s.nodes[t.support];
        (node.lo..node.hi)
            .enumerate()
            .map(|(k, c)| {
                let mut v = t.out[k];
                if let (Some(level), Some(inner)) = (t.inner_level, inner) {
                    v *= inner[c][level];
                }
                (c, v)
            })
            .collect()
    };
    let o1: Vec<Vec<(usize, f64)>> = t1.iter().map(|t| factor(t, s1, &inner1)).collect();
    let o2: Vec<Vec<(usize, f64)>> = t2.iter().map(|t| factor(t, s2, &inner2)).collect();
    let bi1: Vec<usize> = t1.iter().map(|t| s1.internal_index(t.b_node).unwrap()).collect();
    let bi2: Vec<usize> = t2.iter().map(|t| s2.internal_index(t.b_node).unwrap()).collect();
    let mut row = vec![0.0; n2];
    for u in 0..t1.len() {
        row.iter_mut().for_each(|r| *r = 0.0);
        let mut any = false;
        for v in 0..t2.len() {
            let c = bco[bi1[u]][bi2[v]] * fco[u][v];
            if c == 0.0 {
                continue;
            }
            any = true;
            for &(x2, val) in &o2[v] {
                row[x2] += c * val;
            }
        }
        if !any {
            continue;
        }
        for &(x1, val) in &o1[u] {
            for x2 in 0..n2 {
                out[x1 * n2 + x2] += val * row[x2];
            }
        }
    }
    GridFunction::new(f.domain.clone(), out)
}

/// Dispatch by family name.
pub fn biparameter_by_name(
    name: &str,
    b: &GridFunction,
    a: InnerSymbol<'_>,
    f: &GridFunction,
    k: usize,
    l: usize,
    s1: &HaarSystem,
    s2: &HaarSystem,
) -> Result<GridFunction> {
    biparameter_paraproduct(Family::from_name(name)?, b, a, f, k, l, s1, s2)
}

/// Double square function restricted to rectangles inside `omega` (a cell mask, row-major).
pub struct SquareFunctionReport {
    pub lp_norm: f64,
    pub omega_measure: f64,
    /// `‖b‖_{BMO}·μ(Ω)^{1/p}` with the dyadic product norm.
    pub reference: f64,
    pub ratio: f64,
}

pub fn john_nirenberg_square_function(
    b: &GridFunction,
    p: f64,
    omega: &[bool],
    s1: &HaarSystem,
    s2: &HaarSystem,
    bmo: f64,
) -> Result<SquareFunctionReport> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::param("p must lie in (1, ∞)"));
    }
    let (g1, g2) = b.domain.axes()?;
    let (n1, n2) = (g1.len(), g2.len());
    if omega.len() != n1 * n2 {
        return Err(Error::GridMismatch("mask size does not match the grid".into()));
    }
    let c = product_coefficients(b, s1, s2)?;
    let inside = MaskPrefix::new(omega, n1, n2);
    let w = b.domain.weights();
    let mut sq = vec![0.0; n1 * n2];
    for (ii, &i) in s1.internal().iter().enumerate() {
        let ni = s1.node(i);
        for (jj, &j) in s2.internal().iter().enumerate() {
            let nj = s2.node(j);
            if c[ii][jj] == 0.0 || !inside.full(ni.lo, ni.hi, nj.lo, nj.hi) {
                continue;
            }
            let v = c[ii][jj].powi(2) / (ni.measure * nj.measure);
            for x1 in ni.lo..ni.hi {
                for x2 in nj.lo..nj.hi {
                    sq[x1 * n2 + x2] += v;
                }
            }
        }
    }
    let lp = sq
        .iter()
        .zip(&w)
        .map(|(s, w)| s.sqrt().powf(p) * w)
        .sum::<f64>()
        .powf(1.0 / p);
    let om: f64 = omega.iter().zip(&w).filter(|(m, _)| **m).map(|(_, w)| w).sum();
    let reference = bmo * om.powf(1.0 / p);
    Ok(SquareFunctionReport {
        lp_norm: lp,
        omega_measure: om,
        reference,
        ratio: if reference > 0.0 { lp / reference } else { 0.0 },
    })
}

/// Constant-time "is this block entirely inside the mask" queries.
pub(crate) struct MaskPrefix {
    p: Vec<u32>,
    n2: usize,
}

impl MaskPrefix {
    pub(crate) fn new(mask: &[bool], n1: usize, n2: usize) -> Self {
        let mut p = vec![0u32; (n1 + 1) * (n2 + 1)];
        for i in 0..n1 {
            for j in 0..n2 {
                p[(i + 1) * (n2 + 1) + j + 1] = mask[i * n2 + j] as u32 + p[i * (n2 + 1) + j + 1]
                    + p[(i + 1) * (n2 + 1) + j]
                    - p[i * (n2 + 1) + j];
            }
        }
        Self { p, n2 }
    }

    pub(crate) fn count(&self, a: usize, b: usize, c: usize, d: usize) -> u32 {
        let s = self.n2 + 1;
        self.p[b * s + d] + self.p[a * s + c] - self.p[a * s + d] - self.p[b * s + c]
    }

    pub(crate) fn full(&self, a: usize, b: usize, c: usize, d: usize) -> bool {
        self.count(a, b, c, d) as usize == (b - a) * (d - c)
    }
}
