//! Globally adaptive Gauss–Kronrod (7/15) integration over a prescribed initial partition.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];

const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];

const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    /// Integral of |f|, the scale used by the relative criterion.
    pub abs_value: f64,
    pub converged: bool,
    pub panels: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
    pub max_panels: usize,
}

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
    abs_value: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn gk15(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64) -> Panel {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut rk = fc * WGK[7];
    let mut rg = fc * WG[3];
    let mut ra = rk.abs();
    for j in 0..7 {
        let dx = h * XGK[j];
        let f1 = f(c - dx);
        let f2 = f(c + dx);
        rk += WGK[j] * (f1 + f2);
        ra += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            rg += WG[j / 2] * (f1 + f2);
        }
    }
    let value = rk * h;
    let abs_value = ra * h.abs();
    let error = ((rk - rg) * h).abs();
    Panel {
        a,
        b,
        value,
        error,
        abs_value,
    }
}

/// Integrates `f` over the union of consecutive panels given by `breaks`.
pub fn integrate(mut f: impl FnMut(f64) -> f64, breaks: &[f64], tol: Tolerance) -> Estimate {
    let mut heap = BinaryHeap::new();
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            heap.push(gk15(&mut f, w[0], w[1]));
        }
    }
    let totals = |heap: &BinaryHeap<Panel>| {
        let mut s = (0.0, 0.0, 0.0);
        for p in heap.iter() {
            s.0 += p.value;
            s.1 += p.error;
            s.2 += p.abs_value;
        }
        s
    };
    let mut panels = heap.len();
    let (mut error, mut abs_value) = {
        let t = totals(&heap);
        (t.1, t.2)
    };
    loop {
        let target = tol.abs.max(tol.rel * abs_value);
        let done = error <= target;
        if done || panels >= tol.max_panels {
            let (value, e, av) = totals(&heap);
            // Refresh with exact sums; the running ones may drift.
            let converged = e <= tol.abs.max(tol.rel * av);
            if converged || panels >= tol.max_panels {
                return Estimate {
                    value,
                    error: e,
                    abs_value: av,
                    converged,
                    panels,
                };
            }
            error = e;
            abs_value = av;
        }
        let worst = match heap.pop() {
            Some(p) => p,
            None => {
                return Estimate {
                    value: 0.0,
                    error: 0.0,
                    abs_value: 0.0,
                    converged: true,
                    panels,
                }
            }
        };
        let m = 0.5 * (worst.a + worst.b);
        if !(m > worst.a && m < worst.b) {
            // Panel no longer splittable in floating point.
            let (value, e, av) = totals(&heap);
            return Estimate {
                value: value + worst.value,
                error: e + worst.error,
                abs_value: av + worst.abs_value,
                converged: false,
                panels,
            };
        }
        let left = gk15(&mut f, worst.a, m);
        let right = gk15(&mut f, m, worst.b);
        error += left.error + right.error - worst.error;
        abs_value += left.abs_value + right.abs_value - worst.abs_value;
        heap.push(left);
        heap.push(right);
        panels += 1;
    }
}

/// Breakpoints on `[a, b]` accumulating geometrically toward `a` down to width `finest`.
pub fn geometric_breaks_toward_left(a: f64, b: f64, finest: f64) -> Vec<f64> {
    let len = b - a;
    let mut out = vec![b];
    let mut w = 0.5 * len;
    while w > finest && out.len() < 64 {
        out.push(a + w);
        w *= 0.5;
    }
    out.push(a);
    out.reverse();
    out
}

/// Breakpoints on `[a, b]` accumulating geometrically toward `b`.
pub fn geometric_breaks_toward_right(a: f64, b: f64, finest: f64) -> Vec<f64> {
    let mut v: Vec<f64> = geometric_breaks_toward_left(0.0, b - a, finest)
        .into_iter()
        .map(|t| b - t)
        .collect();
    v.reverse();
    v[0] = a;
    v
}
