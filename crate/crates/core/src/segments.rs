//! History segments on [-1,0], the lifted state [x, f] ∈ E × L^p(-1,0;E), and
//! windowing / time-integration of paths.

use crate::error::{invalid, Error, Result};
use crate::field::{FieldSpace, SpectralField};
use crate::numerics::grid_index;

/// Node values at θ_k = -1 + k/m, k = 0..=m, stored as a flat (m+1) × N array.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    m: usize,
    n_modes: usize,
    values: Vec<f64>,
}

impl Segment {
    pub fn zeros(m: usize, n_modes: usize) -> Self {
        Self {
            m,
            n_modes,
            values: vec![0.0; (m + 1) * n_modes],
        }
    }

    pub fn constant(m: usize, x: &SpectralField) -> Self {
        let n = x.n_modes();
        let mut values = Vec::with_capacity((m + 1) * n);
        for _ in 0..=m {
            values.extend_from_slice(x.coeffs());
        }
        Self {
            m,
            n_modes: n,
            values,
        }
    }

    pub fn from_nodes(nodes: &[SpectralField]) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(invalid("segment", "need at least two nodes"));
        }
        let n = nodes[0].n_modes();
        if nodes.iter().any(|x| x.n_modes() != n) {
            return Err(Error::GridMismatch("segment nodes with different mode counts".into()));
        }
        let mut values = Vec::with_capacity(nodes.len() * n);
        for x in nodes {
            values.extend_from_slice(x.coeffs());
        }
        Ok(Self {
            m: nodes.len() - 1,
            n_modes: n,
            values,
        })
    }

    /// Node k gets `f(k, θ_k)`.
    pub fn from_fn(m: usize, n_modes: usize, mut f: impl FnMut(usize, f64) -> SpectralField) -> Self {
        let mut s = Self::zeros(m, n_modes);
        for k in 0..=m {
            let x = f(k, s.theta(k));
            s.node_mut(k).copy_from_slice(x.coeffs());
        }
        s
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_nodes(&self) -> usize {
        self.m + 1
    }

    pub fn theta(&self, k: usize) -> f64 {
        if k == self.m {
            0.0
        } else {
            -1.0 + k as f64 / self.m as f64
        }
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_modes..(k + 1) * self.n_modes]
    }

    pub fn node_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.n_modes..(k + 1) * self.n_modes]
    }

    pub fn node_field(&self, k: usize) -> SpectralField {
        SpectralField::from_coeffs(self.node(k).to_vec())
    }

    pub fn last(&self) -> &[f64] {
        self.node(self.m)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Drops node 0, moves every node one step left and writes `newest` at θ = 0.
    pub fn shift_push(&mut self, newest: &[f64]) {
        let n = self.n_modes;
        self.values.copy_within(n.., 0);
        let m = self.m;
        self.node_mut(m).copy_from_slice(newest);
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            m: self.m,
            n_modes: self.n_modes,
            values: self.values.iter().map(|v| a * v).collect(),
        }
    }

    pub fn axpy(&mut self, a: f64, other: &Segment) {
        debug_assert!(self.same_grid(other));
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }

    pub fn add(&self, other: &Segment) -> Self {
        let mut s = self.clone();
        s.axpy(1.0, other);
        s
    }

    pub fn sub(&self, other: &Segment) -> Self {
        let mut s = self.clone();
        s.axpy(-1.0, other);
        s
    }

    pub fn same_grid(&self, other: &Segment) -> bool {
        self.m == other.m && self.n_modes == other.n_modes
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedState {
    pub head: SpectralField,
    pub tail: Segment,
}

impl LiftedState {
    pub fn new(head: SpectralField, tail: Segment) -> Result<Self> {
        if head.n_modes() != tail.n_modes() {
            return Err(Error::GridMismatch(format!(
                "head has {} modes, tail has {}",
                head.n_modes(),
                tail.n_modes()
            )));
        }
        Ok(Self { head, tail })
    }

    /// [x, x] with a constant history.
    pub fn constant(m: usize, x: SpectralField) -> Self {
        let tail = Segment::constant(m, &x);
        Self { head: x, tail }
    }

    pub fn zeros(m: usize, n_modes: usize) -> Self {
        Self {
            head: SpectralField::zeros(n_modes),
            tail: Segment::zeros(m, n_modes),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            head: self.head.sub(&other.head),
            tail: self.tail.sub(&other.tail),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            head: self.head.add(&other.head),
            tail: self.tail.add(&other.tail),
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            head: self.head.scaled(a),
            tail: self.tail.scaled(a),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.head.is_finite() && self.tail.is_finite()
    }
}

/// E × L^p(-1,0;E) with segment step 1/m.
#[derive(Debug, Clone)]
pub struct LiftedSpace {
    field: FieldSpace,
    m: usize,
    p: f64,
}

impl LiftedSpace {
    pub fn new(field: FieldSpace, m: usize, p: f64) -> Result<Self> {
        if m < 1 {
            return Err(invalid("m", "steps per unit delay must be at least 1"));
        }
        if !(p >= 1.0) {
            return Err(invalid("p", format!("need p >= 1, got {p}")));
        }
        Ok(Self { field, m, p })
    }

    pub fn field(&self) -> &FieldSpace {
        &self.field
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn n_modes(&self) -> usize {
        self.field.n_modes()
    }

    /// Composite trapezoid weight of segment node k.
    pub fn theta_weight(&self, k: usize) -> f64 {
        let h = self.dt();
        if k == 0 || k == self.m {
            0.5 * h
        } else {
            h
        }
    }

    pub fn theta(&self, k: usize) -> f64 {
        if k == self.m {
            0.0
        } else {
            -1.0 + k as f64 / self.m as f64
        }
    }

    pub fn zero_segment(&self) -> Segment {
        Segment::zeros(self.m, self.n_modes())
    }

    pub fn zero_state(&self) -> LiftedState {
        LiftedState::zeros(self.m, self.n_modes())
    }

    fn check(&self, s: &Segment) -> Result<()> {
        if s.m() != self.m || s.n_modes() != self.n_modes() {
            return Err(Error::GridMismatch(format!(
                "segment ({} steps, {} modes) on space ({} steps, {} modes)",
                s.m(),
                s.n_modes(),
                self.m,
                self.n_modes()
            )));
        }
        Ok(())
    }

    /// (Σ_k w_k ‖f(θ_k)‖_E^p)^{1/p} from precomputed node norms.
    pub fn lp_from_node_norms(&self, norms: &[f64]) -> f64 {
        let p = self.p;
        norms
            .iter()
            .enumerate()
            .map(|(k, v)| self.theta_weight(k) * v.powf(p))
            .sum::<f64>()
            .powf(1.0 / p)
    }

    pub fn node_norms(&self, s: &Segment) -> Vec<f64> {
        let n = self.n_modes();
        let mut buf = vec![0.0; self.field.n_grid()];
        (0..s.n_nodes())
            .map(|k| {
                if self.field.r() == 2.0 {
                    s.node(k).iter().map(|c| c * c).sum::<f64>().sqrt()
                } else {
                    self.field.synthesize_into(&s.node(k)[..n], &mut buf);
                    self.field.norm_values(&buf)
                }
            })
            .collect()
    }

    pub fn segment_norm(&self, s: &Segment) -> Result<f64> {
        self.check(s)?;
        Ok(self.lp_from_node_norms(&self.node_norms(s)))
    }

    pub fn combine(&self, head_norm: f64, tail_norm: f64) -> f64 {
        let p = self.p;
        (head_norm.powf(p) + tail_norm.powf(p)).powf(1.0 / p)
    }

    /// ‖[x,f]‖ = (‖x‖^p + ‖f‖_{L^p}^p)^{1/p}
    pub fn norm(&self, y: &LiftedState) -> Result<f64> {
        let t = self.segment_norm(&y.tail)?;
        Ok(self.combine(self.field.norm(&y.head), t))
    }

    /// f(0) = x within `tol` in the norm of E.
    pub fn in_domain(&self, y: &LiftedState, tol: f64) -> bool {
        let d = SpectralField::from_coeffs(y.tail.last().to_vec()).sub(&y.head);
        self.field.norm(&d) <= tol
    }
}

/// A path X on [-1, T] sampled at step 1/m: history f₀ on [-1,0] and values X(t_k), k = 0..=K.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    history: Segment,
    values: Vec<SpectralField>,
}

impl Path {
    pub fn new(history: Segment, values: Vec<SpectralField>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("path", "needs at least the initial value"));
        }
        if values.iter().any(|v| v.n_modes() != history.n_modes()) {
            return Err(Error::GridMismatch("path values and history differ in modes".into()));
        }
        Ok(Self { history, values })
    }

    pub fn m(&self) -> usize {
        self.history.m()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.m() as f64
    }

    pub fn n_steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn history(&self) -> &Segment {
        &self.history
    }

    pub fn values(&self) -> &[SpectralField] {
        &self.values
    }

    pub fn value(&self, k: usize) -> &SpectralField {
        &self.values[k]
    }

    /// Coefficients of X(t_k + θ_j) as seen from the window at step k.
    pub fn window_node(&self, k: usize, j: usize) -> &[f64] {
        let m = self.m();
        if k == 0 {
            return self.history.node(j);
        }
        let idx = k as isize + j as isize - m as isize;
        if idx < 0 {
            self.history.node((idx + m as isize) as usize)
        } else {
            self.values[idx as usize].coeffs()
        }
    }

    /// Coefficients of X at time index i ∈ [-m, K], taking X(0) = x₀.
    pub fn at_index(&self, i: isize) -> &[f64] {
        if i < 0 {
            self.history.node((i + self.m() as isize) as usize)
        } else {
            self.values[i as usize].coeffs()
        }
    }
}

/// The window θ ↦ X(t + θ).
pub fn segment_at(path: &Path, t: f64) -> Result<Segment> {
    let k = grid_index(t, path.m())?;
    if k > path.n_steps() {
        return Err(invalid("t", format!("{t} beyond path horizon")));
    }
    if k == 0 {
        return Ok(path.history.clone());
    }
    let m = path.m();
    let mut s = Segment::zeros(m, path.history.n_modes());
    for j in 0..=m {
        s.node_mut(j).copy_from_slice(path.window_node(k, j));
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeRule {
    /// Σ_{k<K} dt·y(t_k): the Itô-consistent rule.
    LeftPoint,
    Trapezoid,
}

/// θ ↦ ∫_0^t X(s+θ) h(s) ds on the shared grid; `h[k]` is h(t_k).
pub fn segment_time_integral(path: &Path, h: &[f64], t: f64, rule: TimeRule) -> Result<Segment> {
    let m = path.m();
    let kk = grid_index(t, m)?;
    if kk > path.n_steps() {
        return Err(invalid("t", format!("{t} beyond path horizon")));
    }
    if h.len() < kk + 1 {
        return Err(Error::GridMismatch(format!(
            "weight has {} samples, need {}",
            h.len(),
            kk + 1
        )));
    }
    let dt = path.dt();
    let n = path.history.n_modes();
    let mut out = Segment::zeros(m, n);
    for k in 0..=kk {
        let w = match rule {
            TimeRule::LeftPoint if k == kk => 0.0,
            TimeRule::LeftPoint => dt,
            TimeRule::Trapezoid if k == 0 || k == kk => 0.5 * dt,
            TimeRule::Trapezoid => dt,
        } * h[k];
        if w == 0.0 {
            continue;
        }
        for j in 0..=m {
            let src = path.window_node(k, j);
            for (o, v) in out.node_mut(j).iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// Left-hand and right-hand sides of sup_{s ≤ t} ‖X_s‖_{L^p} ≤ ‖X‖_{L^p(-1,t;E)}.
pub fn segment_sup_bound(path: &Path, t: f64, space: &LiftedSpace) -> Result<(f64, f64)> {
    let m = path.m();
    let kk = grid_index(t, m)?;
    if kk > path.n_steps() {
        return Err(invalid("t", format!("{t} beyond path horizon")));
    }
    let fs = space.field();
    let p = space.p();
    let mut buf = vec![0.0; fs.n_grid()];
    let mut norm_of = |c: &[f64]| {
        fs.synthesize_into(c, &mut buf);
        fs.norm_values(&buf)
    };
    // node norms at time indices -m..=kk
    let node: Vec<f64> = (-(m as isize)..=kk as isize).map(|i| norm_of(path.at_index(i))).collect();
    let hist: Vec<f64> = (0..=m).map(|j| norm_of(path.history.node(j))).collect();
    let dt = path.dt();
    let total = node.len();
    let rhs = node
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let w = if i == 0 || i == total - 1 { 0.5 * dt } else { dt };
            w * v.powf(p)
        })
        .sum::<f64>()
        .powf(1.0 / p);
    let mut lhs = space.lp_from_node_norms(&hist);
    for k in 1..=kk {
        lhs = lhs.max(space.lp_from_node_norms(&node[k..=k + m]));
    }
    Ok((lhs, rhs))
}

pub fn segment_sup_bound_check(path: &Path, t: f64, space: &LiftedSpace) -> Result<bool> {
    let (lhs, rhs) = segment_sup_bound(path, t, space)?;
    Ok(lhs <= rhs + 1e-9 * (1.0 + rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldSpace;
    use proptest::prelude::*;

    fn scalar(v: f64) -> SpectralField {
        SpectralField::from_coeffs(vec![v])
    }

    /// Scalar path X(u) = g(u) on [-1, T].
    fn scalar_path(m: usize, steps: usize, g: impl Fn(f64) -> f64) -> Path {
        let h = Segment::from_fn(m, 1, |_, th| scalar(g(th)));
        let vals = (0..=steps).map(|k| scalar(g(k as f64 / m as f64))).collect();
        Path::new(h, vals).unwrap()
    }

    #[test]
    fn node_layout() {
        let s = Segment::zeros(8, 3);
        assert_eq!(s.n_nodes(), 9);
        assert_eq!(s.theta(0), -1.0);
        assert_eq!(s.theta(8), 0.0);
    }

    #[test]
    fn window_at_zero_is_history() {
        let p = scalar_path(4, 8, |u| u * u);
        assert_eq!(segment_at(&p, 0.0).unwrap(), *p.history());
    }

    #[test]
    fn constant_path_has_constant_windows() {
        let p = scalar_path(8, 24, |_| 2.5);
        for k in 0..=24 {
            let s = segment_at(&p, k as f64 / 8.0).unwrap();
            assert!(s.values().iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn linear_path_window() {
        let m = 16;
        let p = scalar_path(m, m, |u| u);
        let s = segment_at(&p, 1.0).unwrap();
        for j in 0..=m {
            assert!((s.node(j)[0] - (1.0 + s.theta(j))).abs() < 1e-15);
        }
    }

    #[test]
    fn off_grid_and_beyond_horizon_rejected() {
        let p = scalar_path(8, 8, |u| u);
        assert!(matches!(segment_at(&p, 0.3), Err(Error::OffGrid { .. })));
        assert!(segment_at(&p, 2.0).is_err());
    }

    #[test]
    fn time_integral_examples() {
        let m = 32;
        let p = scalar_path(m, m, |u| u);
        let zero = segment_time_integral(&p, &vec![0.0; m + 1], 1.0, TimeRule::Trapezoid).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));

        let c = scalar_path(m, 2 * m, |_| 3.0);
        let s = segment_time_integral(&c, &vec![1.0; 2 * m + 1], 2.0, TimeRule::LeftPoint).unwrap();
        assert!(s.values().iter().all(|&v| (v - 6.0).abs() < 1e-13));

        // ∫_0^1 (s + θ) ds = 1/2 + θ; trapezoid is exact for linear integrands
        let s = segment_time_integral(&p, &vec![1.0; m + 1], 1.0, TimeRule::Trapezoid).unwrap();
        for j in 0..=m {
            assert!((s.node(j)[0] - (0.5 + s.theta(j))).abs() < 1e-13);
        }
        let s = segment_time_integral(&p, &vec![1.0; m + 1], 1.0, TimeRule::LeftPoint).unwrap();
        for j in 0..=m {
            assert!((s.node(j)[0] - (0.5 + s.theta(j))).abs() <= 1.0 / m as f64);
        }
        assert!(segment_time_integral(&p, &[1.0; 3], 1.0, TimeRule::LeftPoint).is_err());
    }

    #[test]
    fn derivative_identity() {
        let m = 64;
        let steps = 96;
        let g = |u: f64| (3.0 * u).sin() + 0.5 * u;
        let p = scalar_path(m, steps, g);
        let t = steps as f64 / m as f64;
        for rule in [TimeRule::LeftPoint, TimeRule::Trapezoid] {
            let s = segment_time_integral(&p, &vec![1.0; steps + 1], t, rule).unwrap();
            let yt = segment_at(&p, t).unwrap();
            let y0 = segment_at(&p, 0.0).unwrap();
            for j in 0..m {
                let d = (s.node(j + 1)[0] - s.node(j)[0]) * m as f64;
                let exact = yt.node(j)[0] - y0.node(j)[0];
                assert!((d - exact).abs() < 4.0 / m as f64, "{rule:?} j={j}");
            }
        }
    }

    #[test]
    fn lifted_norm_with_zero_tail() {
        let fs = FieldSpace::new(4, 4.0).unwrap();
        let sp = LiftedSpace::new(fs.clone(), 8, 3.0).unwrap();
        let x = SpectralField::from_coeffs(vec![1.0, -0.5, 0.25, 0.0]);
        let y = LiftedState::new(x.clone(), sp.zero_segment()).unwrap();
        assert_eq!(sp.norm(&y).unwrap(), fs.norm(&x));
        assert!(!sp.in_domain(&y, 1e-12));
        assert!(sp.in_domain(&LiftedState::constant(8, x), 0.0));
    }

    #[test]
    fn sup_bound_edge_cases() {
        let fs = FieldSpace::new(1, 2.0).unwrap();
        let sp = LiftedSpace::new(fs, 8, 2.0).unwrap();
        let z = scalar_path(8, 16, |_| 0.0);
        assert_eq!(segment_sup_bound(&z, 2.0, &sp).unwrap(), (0.0, 0.0));
        assert!(segment_sup_bound_check(&z, 2.0, &sp).unwrap());
        let c = scalar_path(8, 16, |_| 1.5);
        let (lhs, rhs) = segment_sup_bound(&c, 2.0, &sp).unwrap();
        // window length 1 against path length 3
        assert!((rhs / lhs - 3f64.sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn translation_consistency(seed in prop::collection::vec(-1.0f64..1.0, 40), k in 1usize..24, shift in 1usize..8) {
            let m = 8;
            let h = Segment::from_fn(m, 1, |j, _| scalar(seed[j]));
            let vals = (0..=31).map(|i| scalar(seed[(i + 9) % 40])).collect();
            let p = Path::new(h, vals).unwrap();
            let a = segment_at(&p, k as f64 / m as f64).unwrap();
            let b = segment_at(&p, (k + shift) as f64 / m as f64).unwrap();
            // X_{t}(θ) = X_{t+θ'}(θ-θ') with θ' = shift·Δθ
            for j in shift..=m {
                prop_assert_eq!(a.node(j), b.node(j - shift));
            }
        }

        #[test]
        fn sup_bound_random_paths(vals in prop::collection::vec(-3.0f64..3.0, 8 * 3 + 1 + 9), p in 1.0f64..5.0) {
            let m = 8;
            let fs = FieldSpace::new(1, 3.0).unwrap();
            let sp = LiftedSpace::new(fs, m, p).unwrap();
            let h = Segment::from_fn(m, 1, |j, _| scalar(vals[j]));
            let mut path_vals: Vec<SpectralField> = vec![scalar(vals[m])];
            path_vals.extend((m + 1..vals.len()).map(|i| scalar(vals[i])));
            let path = Path::new(h, path_vals).unwrap();
            prop_assert!(segment_sup_bound_check(&path, 2.0, &sp).unwrap());
        }

        #[test]
        fn segment_norm_homogeneous(c in prop::collection::vec(-2.0f64..2.0, 9 * 3), a in -4.0f64..4.0) {
            let fs = FieldSpace::new(3, 4.0).unwrap();
            let sp = LiftedSpace::new(fs, 8, 2.5).unwrap();
            let s = Segment::from_fn(8, 3, |k, _| SpectralField::from_coeffs(c[3 * k..3 * k + 3].to_vec()));
            let lhs = sp.segment_norm(&s.scaled(a)).unwrap();
            let rhs = a.abs() * sp.segment_norm(&s).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
        }
    }
}
