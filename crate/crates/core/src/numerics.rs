//! Quadrature and summation helpers shared by the operator and analysis modules.

use crate::error::{Error, Result};

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let step = p / d;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Fixed-order Gauss–Legendre rule reused across panels.
#[derive(Debug, Clone)]
pub struct GaussRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussRule {
    pub fn new(order: usize) -> Self {
        let (nodes, weights) = gauss_legendre(order);
        Self { nodes, weights }
    }

    pub fn integrate(&self, f: &mut impl FnMut(f64) -> f64, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }
}

impl Default for GaussRule {
    fn default() -> Self {
        Self::new(16)
    }
}

/// Geometrically graded composite Gauss rule for integrands with an integrable
/// singularity at 0: panels [T r^{j+1}, T r^j] for j < levels, plus [0, T r^levels].
pub fn integrate_graded(mut f: impl FnMut(f64) -> f64, t: f64, ratio: f64, levels: usize) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let rule = GaussRule::default();
    let mut sum = NeumaierSum::default();
    let mut hi = t;
    for _ in 0..levels {
        let lo = hi * ratio;
        sum.add(rule.integrate(&mut f, lo, hi));
        hi = lo;
    }
    sum.add(rule.integrate(&mut f, 0.0, hi));
    sum.value()
}

/// ∫_0^t f with the default grading used throughout the crate.
pub fn integrate_singular(f: impl FnMut(f64) -> f64, t: f64) -> f64 {
    integrate_graded(f, t, 0.2, 100)
}

/// ∫_eps^t f on a graded mesh, used for divergence-by-refinement verdicts.
pub fn integrate_cutoff(mut f: impl FnMut(f64) -> f64, eps: f64, t: f64) -> f64 {
    if eps >= t {
        return 0.0;
    }
    let rule = GaussRule::default();
    let mut sum = NeumaierSum::default();
    let mut hi = t;
    while hi > eps {
        let lo = (hi * 0.15).max(eps);
        sum.add(rule.integrate(&mut f, lo, hi));
        hi = lo;
    }
    sum.value()
}

/// Compensated (Neumaier) summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut s = NeumaierSum::default();
    for x in it {
        s.add(x);
    }
    s.value()
}

/// Index k with t = k/m, rejecting times off the grid.
pub fn grid_index(t: f64, m: usize) -> Result<usize> {
    let dt = 1.0 / m as f64;
    if !t.is_finite() || t < 0.0 {
        return Err(Error::OffGrid { t, dt });
    }
    let k = (t * m as f64).round();
    if (k - t * m as f64).abs() > 1e-9 * (1.0 + k) {
        return Err(Error::OffGrid { t, dt });
    }
    Ok(k as usize)
}

/// Hölder conjugate; 1 maps to infinity.
pub fn conjugate(p: f64) -> f64 {
    if p == 1.0 {
        f64::INFINITY
    } else if p.is_infinite() {
        1.0
    } else {
        p / (p - 1.0)
    }
}

/// Σ_{n≥1} e^{-a n²} for a > 0, switching to the theta-function dual for small a.
pub fn theta_tail_sum(a: f64) -> f64 {
    debug_assert!(a > 0.0);
    if a >= 1.0 {
        let mut s = 0.0;
        let mut n = 1.0f64;
        loop {
            let term = (-a * n * n).exp();
            s += term;
            if term < 1e-18 * s {
                break;
            }
            n += 1.0;
        }
        s
    } else {
        let pi = std::f64::consts::PI;
        let b = pi * pi / a;
        let mut dual = 0.0;
        let mut k = 1.0f64;
        loop {
            let term = (-b * k * k).exp();
            dual += term;
            if term < 1e-18 {
                break;
            }
            k += 1.0;
        }
        0.5 * ((pi / a).sqrt() * (1.0 + 2.0 * dual) - 1.0)
    }
}
