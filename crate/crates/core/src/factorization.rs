//! The bilinear form Π, atom approximation by Π-pairs, iterated weak factorization and the
//! pairing lower bound for bmo.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::atoms::{two_rectangle_h1_bound, Atom, H1Upper};
use crate::domain::{lp_norm, weighted_inner_product, Domain, GridFunction, Interval, Rectangle, WeightedGrid};
use crate::error::{Error, Result};
use crate::kernel::{adjoint_of_indicator, riesz_kernel, KernelBoundConstants, KernelConfig};
use crate::operators::DiscreteOperator;

/// `g·(R₁R₂h) − h·(R̃₁R̃₂g)`.
pub fn pi_form(
    g: &GridFunction,
    h: &GridFunction,
    r12: &DiscreteOperator,
    r12_adj: &DiscreteOperator,
) -> Result<GridFunction> {
    g.domain.check_compatible(&h.domain)?;
    g.domain.check_compatible(r12.domain())?;
    g.domain.check_compatible(r12_adj.domain())?;
    let a = g.mul(&r12.apply(h)?)?;
    let b = h.mul(&r12_adj.apply(g)?)?;
    a.sub(&b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    A,
    B,
    C,
    D,
}

impl Case {
    pub fn tag(self) -> &'static str {
        match self {
            Case::A => "a",
            Case::B => "b",
            Case::C => "c",
            Case::D => "d",
        }
    }
}

/// Case from the comparison of `x₀,ᵢ` with `2M̃rᵢ`.
pub fn dispatch(x0: (f64, f64), r: (f64, f64), m_tilde: f64) -> Case {
    match (x0.0 <= 2.0 * m_tilde * r.0, x0.1 <= 2.0 * m_tilde * r.1) {
        (true, true) => Case::A,
        (false, true) => Case::B,
        (true, false) => Case::C,
        (false, false) => Case::D,
    }
}

/// Center and radius of an interval of ℝ₊ read as a ball.
///
/// A ball `I(x, r)` with `r > x` is `[0, x + r)`, the ball `I((x+r)/2, (x+r)/2)`; reading
/// the interval back from its endpoints always gives `r ≤ x`.
pub fn support_ball(i: &Interval) -> (f64, f64) {
    (i.center(), i.radius())
}

/// Center of `R̃` on one axis: far right when `small`, else to the left at distance `M̃r/K₀`.
fn shifted_center(x0: f64, r: f64, small: bool, m_tilde: f64, k0: f64) -> f64 {
    if small {
        x0 + 2.0 * m_tilde * k0 * r
    } else {
        x0 - m_tilde * r / k0
    }
}

/// `K₀` just above `max(1/K₂, 1/K₃) + 1`.
pub fn k0_from_constants(c: &KernelBoundConstants) -> f64 {
    1.01 * ((1.0 / c.k2).max(1.0 / c.k3) + 1.0)
}

/// Smallest `M̃ ≥ 100K₀` with `log₂M̃/M̃ < ε`.
pub fn minimal_m_tilde(epsilon: f64, k0: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::param("epsilon must be positive"));
    }
    let mut m = 100.0 * k0;
    while m.log2() / m >= epsilon {
        m *= 1.25;
        if !m.is_finite() {
            return Err(Error::param("no finite M~ for this epsilon"));
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproximationConfig {
    pub m_tilde: f64,
    pub k0: f64,
    /// Cells across `R̃` on each axis.
    pub patch_cells: usize,
    /// `|(R̃₁R̃₂g)(x₀)|` must exceed `degeneracy_factor/M̃²`.
    pub degeneracy_factor: f64,
}

impl ApproximationConfig {
    pub fn new(m_tilde: f64, k0: f64) -> Self {
        Self {
            m_tilde,
            k0,
            patch_cells: 4,
            degeneracy_factor: DEFAULT_DEGENERACY_FACTOR,
        }
    }
}

/// Calibrated so that every battery atom clears the guard by two orders of magnitude.
pub const DEFAULT_DEGENERACY_FACTOR: f64 = 1e-4;

/// `(g, h)` on a two-patch grid holding `R` and `R̃`.
#[derive(Debug, Clone)]
pub struct BilinearPair {
    pub g: GridFunction,
    pub h: GridFunction,
    pub case: Case,
    pub m_tilde: f64,
    pub k0: f64,
    pub r: Rectangle,
    pub r_tilde: Rectangle,
    /// `(R̃₁R̃₂g)(x₀)` by quadrature over `R̃`.
    pub denominator: f64,
    pub g_norm: f64,
    pub h_norm: f64,
}

impl BilinearPair {
    pub fn norm_product(&self) -> f64 {
        self.g_norm * self.h_norm
    }

    /// `M̃^{2+2λ}`.
    pub fn size_bound(&self) -> f64 {
        let l = self.g.domain.lambda().value();
        self.m_tilde.powf(2.0 + 2.0 * l)
    }
}

#[derive(Debug, Clone)]
pub struct Approximation {
    pub pair: BilinearPair,
    /// `Π(g, h)` on the pair's grid.
    pub pi: GridFunction,
    /// `a − Π(g, h)` on the pair's grid.
    pub residual: GridFunction,
    /// Atomic decomposition of the residual.
    pub residual_terms: Vec<(f64, Atom)>,
    /// `Σ|α|` of `residual_terms`: an h¹ upper bound on the residual.
    pub error_upper: f64,
    pub i0: usize,
    /// Integral of `a − Π(g, h)` before rebalancing (pure rounding).
    pub rounding_drift: f64,
}

fn dedup_sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() <= 1e-13 * b.abs().max(1e-300));
    v
}

struct AxisPlan {
    grid: Arc<WeightedGrid>,
    /// Cell ranges of `R` and `R̃`.
    r_cells: (usize, usize),
    t_cells: (usize, usize),
    /// `K[t][s] = R(y_t, x_s)`.
    block: Vec<Vec<f64>>,
    /// `Σ_t K[t][s] w_t`.
    adj_g: Vec<f64>,
}

fn plan_axis(
    cfg: &KernelConfig,
    atom_axis: &WeightedGrid,
    r: &Interval,
    t: &Interval,
    patch_cells: usize,
) -> Result<AxisPlan> {
    let lambda = atom_axis.lambda();
    let mut b: Vec<f64> = atom_axis
        .boundaries()
        .iter()
        .copied()
        .filter(|&x| x > r.left && x < r.right)
        .collect();
    b.extend([r.left, r.right]);
    for k in 0..=patch_cells {
        b.push(t.left + t.len() * k as f64 / patch_cells as f64);
    }
    let b = dedup_sorted(b);
    let grid = Arc::new(WeightedGrid::from_boundaries(lambda, b)?);
    let r_cells = grid.cells_in(r);
    let t_cells = grid.cells_in(t);
    let x = grid.nodes();
    let w = grid.measures();
    let mut block = Vec::with_capacity(t_cells.1 - t_cells.0);
    for ti in t_cells.0..t_cells.1 {
        let mut row = Vec::with_capacity(r_cells.1 - r_cells.0);
        for si in r_cells.0..r_cells.1 {
            row.push(riesz_kernel(cfg, x[ti], x[si])?);
        }
        block.push(row);
    }
    let adj_g = (0..r_cells.1 - r_cells.0)
        .map(|s| (t_cells.0..t_cells.1).map(|ti| block[ti - t_cells.0][s] * w[ti]).sum())
        .collect();
    Ok(AxisPlan {
        grid,
        r_cells,
        t_cells,
        block,
        adj_g,
    })
}

/// Π-pair approximating a `(1,∞)`-atom, with the residual certified through the
/// two-rectangle decomposition.
pub fn atom_approximation(a: &Atom, kernel: &KernelConfig, cfg: &ApproximationConfig) -> Result<Approximation> {
    let lambda = a.lambda();
    if (lambda.value() - kernel.lambda.value()).abs() > 0.0 {
        return Err(Error::param("kernel and atom use different lambda"));
    }
    if !(cfg.m_tilde >= 100.0 * cfg.k0) || !(cfg.k0 > 1.0) || cfg.patch_cells == 0 {
        return Err(Error::param("need K0 > 1, M~ >= 100 K0 and at least one patch cell"));
    }
    let (x01, r1) = support_ball(&a.support.i1);
    let (x02, r2) = support_ball(&a.support.i2);
    let case = dispatch((x01, x02), (r1, r2), cfg.m_tilde);
    let small = (matches!(case, Case::A | Case::C), matches!(case, Case::A | Case::B));
    let y01 = shifted_center(x01, r1, small.0, cfg.m_tilde, cfg.k0);
    let y02 = shifted_center(x02, r2, small.1, cfg.m_tilde, cfg.k0);
    let r_tilde = Rectangle::new(Interval::ball(y01, r1)?, Interval::ball(y02, r2)?);

    let denominator = adjoint_of_indicator(kernel, x01, &r_tilde.i1)? * adjoint_of_indicator(kernel, x02, &r_tilde.i2)?;
    let floor = cfg.degeneracy_factor / (cfg.m_tilde * cfg.m_tilde);
    if !(denominator.abs() >= floor) {
        return Err(Error::DenominatorDegeneracy {
            value: denominator.abs(),
            floor,
        });
    }

    let (ag1, ag2) = a.values.domain.axes()?;
    let p1 = plan_axis(kernel, ag1, &a.support.i1, &r_tilde.i1, cfg.patch_cells)?;
    let p2 = plan_axis(kernel, ag2, &a.support.i2, &r_tilde.i2, cfg.patch_cells)?;
    let dom = Domain::Product(p1.grid.clone(), p2.grid.clone());
    let av = crate::atoms::resample(&a.values, &dom)?;
    let n2 = p2.grid.len();
    let (w1, w2) = (p1.grid.measures(), p2.grid.measures());

    let mut g = GridFunction::zeros(&dom);
    for i in p1.t_cells.0..p1.t_cells.1 {
        for j in p2.t_cells.0..p2.t_cells.1 {
            g.values[i * n2 + j] = 1.0;
        }
    }
    let h = av.scale(-1.0 / denominator);
    // Π on R is −h·(R̃₁R̃₂g); on R̃ it is g·(R₁R₂h).
    let mut pi = GridFunction::zeros(&dom);
    for (si, i) in (p1.r_cells.0..p1.r_cells.1).enumerate() {
        for (sj, j) in (p2.r_cells.0..p2.r_cells.1).enumerate() {
            let k = i * n2 + j;
            pi.values[k] = -h.values[k] * p1.adj_g[si] * p2.adj_g[sj];
        }
    }
    // R₁R₂h on R̃ by contracting one axis at a time.
    let nr2 = p2.r_cells.1 - p2.r_cells.0;
    let mut partial = vec![0.0; (p1.t_cells.1 - p1.t_cells.0) * nr2];
    for (ti, row) in p1.block.iter().enumerate() {
        for (si, i) in (p1.r_cells.0..p1.r_cells.1).enumerate() {
            let kw = row[si] * w1[i];
            if kw == 0.0 {
                continue;
            }
            for (sj, j) in (p2.r_cells.0..p2.r_cells.1).enumerate() {
                partial[ti * nr2 + sj] += kw * h.values[i * n2 + j];
            }
        }
    }
    for (ti, i) in (p1.t_cells.0..p1.t_cells.1).enumerate() {
        for (tj, j) in (p2.t_cells.0..p2.t_cells.1).enumerate() {
            let row = &p2.block[tj];
            let mut s = 0.0;
            for (sj, jj) in (p2.r_cells.0..p2.r_cells.1).enumerate() {
                s += row[sj] * w2[jj] * partial[ti * nr2 + sj];
            }
            pi.values[i * n2 + j] = s;
        }
    }
    let mut residual = av.sub(&pi)?;
    // The exact residual has zero integral; fold the rounding into R̃ so that the
    // two-rectangle construction sees an exactly balanced function.
    let drift = residual.integral();
    let t_measure = p1.grid.range_measure(p1.t_cells.0, p1.t_cells.1) * p2.grid.range_measure(p2.t_cells.0, p2.t_cells.1);
    for i in p1.t_cells.0..p1.t_cells.1 {
        for j in p2.t_cells.0..p2.t_cells.1 {
            residual.values[i * n2 + j] -= drift / t_measure;
        }
    }
    let tr = two_rectangle_h1_bound(&residual, &a.support, &r_tilde)?;
    let g_norm = lp_norm(&g, 2.0);
    let h_norm = lp_norm(&h, 2.0);
    Ok(Approximation {
        pair: BilinearPair {
            g,
            h,
            case,
            m_tilde: cfg.m_tilde,
            k0: cfg.k0,
            r: a.support,
            r_tilde,
            denominator,
            g_norm,
            h_norm,
        },
        pi,
        residual,
        error_upper: tr.sum_abs_alpha(),
        i0: tr.i0,
        rounding_drift: drift,
        residual_terms: tr.terms,
    })
}

/// An atom stored at unit scale: the actual atom is `x ↦ a(x₁/s₁, x₂/s₂)/(s₁s₂)^{2λ+1}`.
#[derive(Debug, Clone)]
pub struct ScaledAtom {
    pub atom: Atom,
    pub scale: (f64, f64),
}

impl ScaledAtom {
    /// Rescales so that the support's right edges sit at 1.
    pub fn normalize(atom: Atom, scale: (f64, f64)) -> Result<Self> {
        let s = (atom.support.i1.right, atom.support.i2.right);
        if s == (1.0, 1.0) {
            return Ok(Self { atom, scale });
        }
        let rescaled = rescale_atom(&atom, (1.0 / s.0, 1.0 / s.1))?;
        Ok(Self {
            atom: rescaled,
            scale: (scale.0 * s.0, scale.1 * s.1),
        })
    }

    /// The atom in original coordinates.
    pub fn actual(&self) -> Result<Atom> {
        rescale_atom(&self.atom, self.scale)
    }
}

/// `x ↦ a(x₁/t₁, x₂/t₂)/(t₁t₂)^{2λ+1}`, supported on the dilated rectangle.
pub fn rescale_atom(a: &Atom, t: (f64, f64)) -> Result<Atom> {
    let lambda = a.lambda();
    let (g1, g2) = a.values.domain.axes()?;
    let scale_grid = |g: &WeightedGrid, s: f64| -> Result<Arc<WeightedGrid>> {
        Ok(Arc::new(WeightedGrid::from_boundaries(
            lambda,
            g.boundaries().iter().map(|x| x * s).collect(),
        )?))
    };
    let dom = Domain::Product(scale_grid(g1, t.0)?, scale_grid(g2, t.1)?);
    let d = lambda.dim();
    let factor = (t.0 * t.1).powf(-d);
    let values = a.values.values.iter().map(|v| v * factor).collect();
    let scale_iv = |i: &Interval, s: f64| Interval::new(i.left * s, i.right * s);
    let support = Rectangle::new(scale_iv(&a.support.i1, t.0)?, scale_iv(&a.support.i2, t.1)?);
    Atom::new(support, GridFunction::new(dom, values)?, a.q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorizationConfig {
    pub epsilon: f64,
    /// Constant relating the level-k atomic sum to the previous residual certificate.
    pub c0_tilde: f64,
    pub max_levels: usize,
    pub k0: f64,
    /// Per-atom target for `error_upper`; `M̃` doubles until it is met.
    pub atom_target: f64,
    pub max_doublings: usize,
    /// Cap on approximations per level.
    pub max_atoms_per_level: usize,
    pub patch_cells: usize,
    pub degeneracy_factor: f64,
    /// Keep the `(g, h)` grids of every term, not only their summaries.
    pub keep_pairs: bool,
}

impl FactorizationConfig {
    pub fn new(epsilon: f64, c0_tilde: f64, max_levels: usize, k0: f64) -> Self {
        Self {
            epsilon,
            c0_tilde,
            max_levels,
            k0,
            atom_target: 0.25,
            max_doublings: 4,
            max_atoms_per_level: 20_000,
            patch_cells: 4,
            degeneracy_factor: DEFAULT_DEGENERACY_FACTOR,
            keep_pairs: false,
        }
    }

    pub fn contraction(&self) -> f64 {
        self.epsilon * self.c0_tilde
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermSummary {
    pub level: usize,
    pub alpha: f64,
    pub case: Case,
    pub m_tilde: f64,
    pub g_norm: f64,
    pub h_norm: f64,
    pub error_upper: f64,
    /// `(s₁, s₂)`: the pair lives at unit scale.
    pub scale: (f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelCertificate {
    pub level: usize,
    pub atoms_in: usize,
    pub processed: usize,
    /// Mass of atoms left for the next level unapproximated.
    pub carried_mass: f64,
    pub input_mass: f64,
    /// `Σ_processed |α|·error_upper + carried_mass`.
    pub residual_h1_upper: f64,
    pub max_error: f64,
    pub contraction: f64,
}

#[derive(Debug, Clone)]
pub struct FactorizationResult {
    pub terms: Vec<TermSummary>,
    pub pairs: Vec<(f64, BilinearPair)>,
    /// `E_K` as an atomic sum.
    pub residual: Vec<(f64, ScaledAtom)>,
    pub level: usize,
    pub initial: f64,
    pub residual_h1_upper: f64,
    pub levels: Vec<LevelCertificate>,
    /// `Σ |α|·‖g‖₂‖h‖₂` over all terms.
    pub norm_sum: f64,
}

/// Approximates one atom, doubling `M̃` until the error target is met.
pub fn approximate_with_target(
    a: &Atom,
    kernel: &KernelConfig,
    start: &ApproximationConfig,
    target: f64,
    max_doublings: usize,
) -> Result<Approximation> {
    let mut cfg = *start;
    let mut best = atom_approximation(a, kernel, &cfg)?;
    for _ in 0..max_doublings {
        if best.error_upper <= target {
            break;
        }
        cfg.m_tilde *= 2.0;
        let next = atom_approximation(a, kernel, &cfg)?;
        if next.error_upper < best.error_upper {
            best = next;
        }
    }
    Ok(best)
}

/// Iterated weak factorization of `Σ αⱼaⱼ` into Π-pairs.
///
/// Each level approximates atoms in decreasing `|α|` until the level certificate reaches
/// `ε·C̃₀` times the previous one; untouched atoms carry over at full mass.
pub fn weak_factorize(
    initial: &[(f64, Atom)],
    kernel: &KernelConfig,
    cfg: &FactorizationConfig,
) -> Result<FactorizationResult> {
    let theta = cfg.contraction();
    if !(theta < 1.0) {
        return Err(Error::NonContraction(theta));
    }
    if cfg.max_levels == 0 {
        return Err(Error::param("max_levels must be at least 1"));
    }
    let start = ApproximationConfig {
        m_tilde: minimal_m_tilde(cfg.epsilon, cfg.k0)?,
        k0: cfg.k0,
        patch_cells: cfg.patch_cells,
        degeneracy_factor: cfg.degeneracy_factor,
    };
    let mut current: Vec<(f64, ScaledAtom)> = initial
        .iter()
        .map(|(alpha, a)| Ok((*alpha, ScaledAtom::normalize(a.clone(), (1.0, 1.0))?)))
        .collect::<Result<_>>()?;
    let initial_mass: f64 = current.iter().map(|(a, _)| a.abs()).sum();
    let mut prev = initial_mass;
    let mut terms = Vec::new();
    let mut pairs = Vec::new();
    let mut levels = Vec::new();
    let mut norm_sum = 0.0;
    for level in 1..=cfg.max_levels {
        current.sort_by(|a, b| b.0.abs().total_cmp(&a.0.abs()));
        let input_mass: f64 = current.iter().map(|(a, _)| a.abs()).sum();
        let goal = theta * prev;
        let mut remaining = input_mass;
        let mut processed_cost = 0.0;
        let mut next = Vec::new();
        let mut max_error: f64 = 0.0;
        let mut processed = 0;
        let atoms_in = current.len();
        let mut iter = current.into_iter();
        for (alpha, sa) in iter.by_ref() {
            if processed_cost + remaining <= goal || processed >= cfg.max_atoms_per_level {
                next.push((alpha, sa));
                break;
            }
            let approx = approximate_with_target(&sa.atom, kernel, &start, cfg.atom_target, cfg.max_doublings)?;
            remaining -= alpha.abs();
            processed_cost += alpha.abs() * approx.error_upper;
            max_error = max_error.max(approx.error_upper);
            processed += 1;
            let p = &approx.pair;
            norm_sum += alpha.abs() * p.norm_product();
            terms.push(TermSummary {
                level,
                alpha,
                case: p.case,
                m_tilde: p.m_tilde,
                g_norm: p.g_norm,
                h_norm: p.h_norm,
                error_upper: approx.error_upper,
                scale: sa.scale,
            });
            for (beta, atom) in approx.residual_terms {
                next.push((alpha * beta, ScaledAtom::normalize(atom, sa.scale)?));
            }
            if cfg.keep_pairs {
                pairs.push((alpha, approx.pair));
            }
        }
        next.extend(iter);
        let residual_h1_upper = processed_cost + remaining.max(0.0);
        let carried_mass = remaining.max(0.0);
        let contraction = if prev > 0.0 { residual_h1_upper / prev } else { 0.0 };
        levels.push(LevelCertificate {
            level,
            atoms_in,
            processed,
            carried_mass,
            input_mass,
            residual_h1_upper,
            max_error,
            contraction,
        });
        if residual_h1_upper > goal * (1.0 + 1e-9) {
            return Err(Error::NonContraction(contraction));
        }
        prev = residual_h1_upper;
        current = next;
    }
    Ok(FactorizationResult {
        terms,
        pairs,
        residual: current,
        level: cfg.max_levels,
        initial: initial_mass,
        residual_h1_upper: prev,
        levels,
        norm_sum,
    })
}

/// Test function paired against a symbol, with its certified h¹ upper bound.
#[derive(Debug, Clone)]
pub struct PairingTest {
    pub f: GridFunction,
    pub h1_upper: f64,
}

impl From<(GridFunction, H1Upper)> for PairingTest {
    fn from((f, u): (GridFunction, H1Upper)) -> Self {
        Self { f, h1_upper: u.value }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairingBound {
    pub value: f64,
    pub argmax: usize,
}

/// `max |⟨b, f⟩| / h1_upper(f)` over the battery.
pub fn bmo_lower_via_pairing(b: &GridFunction, battery: &[PairingTest]) -> Result<PairingBound> {
    if battery.is_empty() {
        return Err(Error::Usage("pairing battery is empty".into()));
    }
    let mut best = PairingBound { value: 0.0, argmax: 0 };
    for (k, t) in battery.iter().enumerate() {
        if !(t.h1_upper > 0.0) {
            continue;
        }
        let v = weighted_inner_product(b, &t.f)?.abs() / t.h1_upper;
        if v > best.value {
            best = PairingBound { value: v, argmax: k };
        }
    }
    Ok(best)
}
