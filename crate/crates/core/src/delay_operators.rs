//! The delay operator Φ = ∫ dη, the Nemytskii drift φ and diffusion ψ, and the
//! growth functions a, b together with their transferred versions ã, b̃.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::field::{FieldSpace, SpectralField};
use crate::numerics::{conjugate, integrate_singular, GaussRule};
use crate::segments::{LiftedSpace, Path, Segment};
use crate::semigroup::HeatSemigroup;

/// Read access to the m+1 nodes of a segment-like window.
pub trait NodeSource {
    fn node(&self, j: usize) -> &[f64];
}

impl NodeSource for Segment {
    fn node(&self, j: usize) -> &[f64] {
        Segment::node(self, j)
    }
}

/// The window of a path at step k, without copying.
pub struct PathWindow<'a> {
    pub path: &'a Path,
    pub k: usize,
}

impl NodeSource for PathWindow<'_> {
    fn node(&self, j: usize) -> &[f64] {
        self.path.window_node(self.k, j)
    }
}

impl<T: AsRef<[f64]>> NodeSource for [T] {
    fn node(&self, j: usize) -> &[f64] {
        self[j].as_ref()
    }
}

// ---------------------------------------------------------------------------
// scalar nonlinearities

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseMap {
    Zero,
    Id,
    Tanh,
    Sin,
}

impl BaseMap {
    #[inline]
    fn eval(self, u: f64) -> f64 {
        match self {
            BaseMap::Zero => 0.0,
            BaseMap::Id => u,
            BaseMap::Tanh => u.tanh(),
            BaseMap::Sin => u.sin(),
        }
    }

    fn lipschitz(self) -> f64 {
        match self {
            BaseMap::Zero => 0.0,
            _ => 1.0,
        }
    }
}

/// u ↦ offset + scale·base(u). Names: `zero`, `id`, `tanh`, `sin`, `one_plus_tanh`,
/// `const(c)`, `linear(c)`, and the general form `[c+][s*]base`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMap {
    offset: f64,
    scale: f64,
    base: BaseMap,
}

fn parse_num(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Config(format!("cannot read number `{s}` in {what}")))
}

fn parse_call<'a>(s: &'a str, name: &str) -> Option<&'a str> {
    s.strip_prefix(name)?.strip_prefix('(')?.strip_suffix(')')
}

impl ScalarMap {
    pub const ZERO: ScalarMap = ScalarMap::new(0.0, 0.0, BaseMap::Zero);

    pub const fn new(offset: f64, scale: f64, base: BaseMap) -> Self {
        Self {
            offset,
            scale,
            base,
        }
    }

    pub const fn id() -> Self {
        Self::new(0.0, 1.0, BaseMap::Id)
    }

    pub const fn tanh() -> Self {
        Self::new(0.0, 1.0, BaseMap::Tanh)
    }

    pub const fn sin() -> Self {
        Self::new(0.0, 1.0, BaseMap::Sin)
    }

    pub const fn constant(c: f64) -> Self {
        Self::new(c, 0.0, BaseMap::Zero)
    }

    pub fn parse(spec: &str) -> Result<Self> {
        let s: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
        match s.as_str() {
            "zero" => return Ok(Self::ZERO),
            "one_plus_tanh" => return Ok(Self::new(1.0, 1.0, BaseMap::Tanh)),
            _ => {}
        }
        if let Some(c) = parse_call(&s, "const") {
            return Ok(Self::constant(parse_num(c, spec)?));
        }
        if let Some(c) = parse_call(&s, "linear") {
            return Ok(Self::new(0.0, parse_num(c, spec)?, BaseMap::Id));
        }
        let split = s
            .char_indices()
            .skip(1)
            .find(|&(i, ch)| ch == '+' && !matches!(s.as_bytes()[i - 1], b'e' | b'E'))
            .map(|(i, _)| i);
        let (offset, rest) = match split {
            Some(i) => (parse_num(&s[..i], spec)?, &s[i + 1..]),
            None => (0.0, s.as_str()),
        };
        let (scale, base) = match rest.rsplit_once('*') {
            Some((c, b)) => (parse_num(c, spec)?, b),
            None => (1.0, rest),
        };
        let base = match base {
            "zero" => BaseMap::Zero,
            "id" => BaseMap::Id,
            "tanh" => BaseMap::Tanh,
            "sin" => BaseMap::Sin,
            "one" => return Ok(Self::constant(offset + scale)),
            other => return Err(Error::Config(format!("unknown nonlinearity `{other}` in `{spec}`"))),
        };
        Ok(Self::new(offset, scale, base))
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        self.offset + self.scale * self.base.eval(u)
    }

    pub fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (o, &u) in out.iter_mut().zip(input) {
            *o = self.eval(u);
        }
    }

    pub fn lipschitz(&self) -> f64 {
        self.scale.abs() * self.base.lipschitz()
    }

    /// The map is identically zero.
    pub fn is_zero(&self) -> bool {
        self.offset == 0.0 && (self.scale == 0.0 || self.base == BaseMap::Zero)
    }

    /// The map does not depend on its argument.
    pub fn is_constant(&self) -> bool {
        self.lipschitz() == 0.0
    }

    pub fn value_at_zero(&self) -> f64 {
        self.eval(0.0)
    }
}

// ---------------------------------------------------------------------------
// kernels

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XiShape {
    One,
    /// sin(πξ)
    SinPi,
}

impl XiShape {
    #[inline]
    pub fn eval(self, xi: f64) -> f64 {
        match self {
            XiShape::One => 1.0,
            XiShape::SinPi => (std::f64::consts::PI * xi).sin(),
        }
    }

    /// max over the grid of |χ|.
    pub fn grid_sup(self, space: &FieldSpace) -> f64 {
        match self {
            XiShape::One => 1.0,
            s => space.grid().nodes().iter().fold(0.0, |m, &x| m.max(s.eval(x).abs())),
        }
    }
}

/// k(θ,ξ) = scale · e^{rate·θ} · θ^power · χ(ξ). Names are products of factors joined
/// by `*`: a number, `one`, `zero`, `exp`, `exp(a)`, `theta`, `const(c)`, `sin_xi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub scale: f64,
    pub rate: f64,
    pub power: u32,
    pub xi: XiShape,
}

impl Kernel {
    pub const ZERO: Kernel = Kernel::constant(0.0);

    pub const fn constant(c: f64) -> Self {
        Self {
            scale: c,
            rate: 0.0,
            power: 0,
            xi: XiShape::One,
        }
    }

    pub const fn exp(scale: f64, rate: f64) -> Self {
        Self {
            scale,
            rate,
            power: 0,
            xi: XiShape::One,
        }
    }

    pub fn parse(spec: &str) -> Result<Self> {
        let s: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
        let mut k = Self::constant(1.0);
        for factor in s.split('*') {
            match factor {
                "one" => {}
                "zero" => k.scale = 0.0,
                "exp" => k.rate += 1.0,
                "theta" => k.power += 1,
                "sin_xi" => {
                    if k.xi != XiShape::One {
                        return Err(Error::Config(format!("repeated space factor in `{spec}`")));
                    }
                    k.xi = XiShape::SinPi
                }
                f => {
                    if let Some(a) = parse_call(f, "exp") {
                        k.rate += parse_num(a, spec)?;
                    } else if let Some(c) = parse_call(f, "const") {
                        k.scale *= parse_num(c, spec)?;
                    } else if let Ok(c) = f.parse::<f64>() {
                        k.scale *= c;
                    } else {
                        return Err(Error::Config(format!("unknown kernel factor `{f}` in `{spec}`")));
                    }
                }
            }
        }
        Ok(k)
    }

    #[inline]
    pub fn theta_profile(&self, theta: f64) -> f64 {
        self.scale * (self.rate * theta).exp() * theta.powi(self.power as i32)
    }

    pub fn eval(&self, theta: f64, xi: f64) -> f64 {
        self.theta_profile(theta) * self.xi.eval(xi)
    }

    pub fn is_zero(&self) -> bool {
        self.scale == 0.0
    }

    /// ‖κ‖_{L^s(-1,0)} of the θ-profile.
    pub fn theta_norm(&self, s: f64) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        if s.is_infinite() {
            let n = 4096;
            return (0..=n)
                .map(|i| self.theta_profile(-1.0 + i as f64 / n as f64).abs())
                .fold(0.0, f64::max);
        }
        let rule = GaussRule::default();
        let panels = 16;
        let mut f = |th: f64| self.theta_profile(th).abs().powf(s);
        let total: f64 = (0..panels)
            .map(|i| {
                let a = -1.0 + i as f64 / panels as f64;
                rule.integrate(&mut f, a, a + 1.0 / panels as f64)
            })
            .sum();
        total.powf(1.0 / s)
    }

    /// ess sup_ξ ‖k(·,ξ)‖_{L^s(-1,0)}, sup taken over the space grid.
    pub fn sup_theta_norm(&self, s: f64, space: &FieldSpace) -> f64 {
        self.xi.grid_sup(space) * self.theta_norm(s)
    }

    pub fn sample(&self, space: &LiftedSpace) -> SampledKernel {
        let m = space.m();
        let theta_w: Vec<f64> = (0..=m)
            .map(|j| space.theta_weight(j) * self.theta_profile(space.theta(j)))
            .collect();
        let xi = match self.xi {
            XiShape::One => None,
            s => Some(space.field().grid().nodes().iter().map(|&x| s.eval(x)).collect()),
        };
        let geometric = (self.power == 0).then(|| (-self.rate * space.dt()).exp());
        SampledKernel {
            theta_w,
            xi,
            zero: self.is_zero(),
            geometric,
        }
    }
}

/// A kernel on the segment × space grid: trapezoid weights folded with κ(θ_j), and χ(ξ).
#[derive(Debug, Clone)]
pub struct SampledKernel {
    theta_w: Vec<f64>,
    xi: Option<Vec<f64>>,
    zero: bool,
    geometric: Option<f64>,
}

impl SampledKernel {
    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// w_j κ(θ_j) for node j.
    pub fn theta_weights(&self) -> &[f64] {
        &self.theta_w
    }

    pub fn xi_values(&self) -> Option<&[f64]> {
        self.xi.as_deref()
    }

    /// Ratio κ(θ - Δθ)/κ(θ) when the θ-profile is a pure exponential.
    pub fn geometric_ratio(&self) -> Option<f64> {
        self.geometric
    }

    /// out = χ · Σ_j w_j κ(θ_j) nodes_j, for nodes of the same length as out.
    pub fn integrate<S: NodeSource + ?Sized>(&self, nodes: &S, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        if self.zero {
            return;
        }
        for (j, &w) in self.theta_w.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(nodes.node(j)) {
                *o += w * v;
            }
        }
        self.apply_xi(out);
    }

    pub fn apply_xi(&self, out: &mut [f64]) {
        if let Some(chi) = &self.xi {
            for (o, c) in out.iter_mut().zip(chi) {
                *o *= c;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// the delay measure

#[derive(Debug, Clone, PartialEq)]
pub enum AtomOperator {
    Scalar(f64),
    /// Multiplies coefficient n by d_n.
    Diagonal(Vec<f64>),
    /// Multiplies pointwise by scale·χ(ξ).
    Pointwise { scale: f64, shape: XiShape },
}

impl AtomOperator {
    pub fn norm(&self, space: &FieldSpace) -> f64 {
        match self {
            AtomOperator::Scalar(c) => c.abs(),
            AtomOperator::Diagonal(d) => d.iter().take(space.n_modes()).fold(0.0, |m, v| m.max(v.abs())),
            AtomOperator::Pointwise { scale, shape } => scale.abs() * shape.grid_sup(space),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub theta: f64,
    pub op: AtomOperator,
}

/// η = φ(θ,ξ)dθ + Σ_i φ_i δ_{θ_i}.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayMeasure {
    pub density: Kernel,
    pub atoms: Vec<Atom>,
}

impl DelayMeasure {
    pub fn zero() -> Self {
        Self {
            density: Kernel::ZERO,
            atoms: vec![],
        }
    }

    pub fn density(k: Kernel) -> Self {
        Self {
            density: k,
            atoms: vec![],
        }
    }

    pub fn with_atom(mut self, theta: f64, op: AtomOperator) -> Self {
        self.atoms.push(Atom { theta, op });
        self
    }

    pub fn is_zero(&self) -> bool {
        self.density.is_zero() && self.atoms.iter().all(|a| a.op.norm_is_zero())
    }

    /// |η|(-1,0) = max_ξ ‖φ(·,ξ)‖_{L¹} + Σ_i ‖φ_i‖.
    pub fn total_variation(&self, space: &FieldSpace) -> f64 {
        self.density.sup_theta_norm(1.0, space) + self.atoms.iter().map(|a| a.op.norm(space)).sum::<f64>()
    }

    pub fn sample(&self, space: &LiftedSpace) -> Result<SampledMeasure> {
        let m = space.m();
        let mut atoms = Vec::with_capacity(self.atoms.len());
        for a in &self.atoms {
            if !(-1.0..=0.0).contains(&a.theta) {
                return Err(invalid("atom", format!("θ = {} outside [-1, 0]", a.theta)));
            }
            let pos = (a.theta + 1.0) * m as f64;
            let j = pos.round();
            if (pos - j).abs() > 1e-9 {
                return Err(Error::OffGrid { t: a.theta, dt: space.dt() });
            }
            if let AtomOperator::Diagonal(d) = &a.op {
                if d.len() < space.n_modes() {
                    return Err(Error::GridMismatch(format!(
                        "diagonal atom has {} multipliers for {} modes",
                        d.len(),
                        space.n_modes()
                    )));
                }
            }
            atoms.push((j as usize, a.op.clone()));
        }
        let pointwise = atoms
            .iter()
            .map(|(_, op)| match op {
                AtomOperator::Pointwise { scale, shape } => Some(
                    space
                        .field()
                        .grid()
                        .nodes()
                        .iter()
                        .map(|&x| scale * shape.eval(x))
                        .collect(),
                ),
                _ => None,
            })
            .collect();
        Ok(SampledMeasure {
            density: self.density.sample(space),
            atoms,
            pointwise,
            zero: self.is_zero(),
        })
    }
}

impl AtomOperator {
    fn norm_is_zero(&self) -> bool {
        match self {
            AtomOperator::Scalar(c) => *c == 0.0,
            AtomOperator::Diagonal(d) => d.iter().all(|&v| v == 0.0),
            AtomOperator::Pointwise { scale, .. } => *scale == 0.0,
        }
    }
}

/// A delay measure resolved on a segment × space grid.
#[derive(Debug, Clone)]
pub struct SampledMeasure {
    density: SampledKernel,
    atoms: Vec<(usize, AtomOperator)>,
    pointwise: Vec<Option<Vec<f64>>>,
    zero: bool,
}

impl SampledMeasure {
    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn density(&self) -> &SampledKernel {
        &self.density
    }

    /// out = Φh in coefficients; `nodes` yields segment nodes as coefficient slices.
    pub fn apply<S: NodeSource + ?Sized>(&self, space: &FieldSpace, nodes: &S, out: &mut [f64]) {
        let n = out.len();
        out.iter_mut().for_each(|o| *o = 0.0);
        if self.zero {
            return;
        }
        if !self.density.is_zero() {
            for (j, &w) in self.density.theta_weights().iter().enumerate() {
                if w != 0.0 {
                    for (o, v) in out.iter_mut().zip(nodes.node(j)) {
                        *o += w * v;
                    }
                }
            }
            if let Some(chi) = self.density.xi_values() {
                let mut g = vec![0.0; space.n_grid()];
                space.synthesize_into(out, &mut g);
                for (v, c) in g.iter_mut().zip(chi) {
                    *v *= c;
                }
                space.analyze_into(&g, out);
            }
        }
        for ((j, op), pw) in self.atoms.iter().zip(&self.pointwise) {
            let h = &nodes.node(*j)[..n];
            match op {
                AtomOperator::Scalar(c) => {
                    for (o, v) in out.iter_mut().zip(h) {
                        *o += c * v;
                    }
                }
                AtomOperator::Diagonal(d) => {
                    for ((o, v), dn) in out.iter_mut().zip(h).zip(d) {
                        *o += dn * v;
                    }
                }
                AtomOperator::Pointwise { .. } => {
                    let mult = pw.as_ref().expect("sampled with the atom");
                    let mut g = vec![0.0; space.n_grid()];
                    space.synthesize_into(h, &mut g);
                    for (v, c) in g.iter_mut().zip(mult) {
                        *v *= c;
                    }
                    let mut tmp = vec![0.0; n];
                    space.analyze_into(&g, &mut tmp);
                    for (o, t) in out.iter_mut().zip(&tmp) {
                        *o += t;
                    }
                }
            }
        }
    }
}

/// Φh = ∫ φ(θ,·) h(θ) dθ + Σ φ_i h(θ_i).
pub fn phi_apply(measure: &SampledMeasure, space: &LiftedSpace, h: &Segment) -> Result<SpectralField> {
    if h.m() != space.m() || h.n_modes() != space.n_modes() {
        return Err(Error::GridMismatch("segment does not match the measure grid".into()));
    }
    let mut out = vec![0.0; space.n_modes()];
    measure.apply(space.field(), h, &mut out);
    Ok(SpectralField::from_coeffs(out))
}

// ---------------------------------------------------------------------------
// Nemytskii operators

/// φ([x,h])(ξ) = f1(x(ξ)) + ∫ k1(θ,ξ) f2(h(θ,ξ)) dθ
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NemytskiiDrift {
    pub f1: ScalarMap,
    pub f2: ScalarMap,
    pub k1: Kernel,
}

/// (ψ([x,h])u)(ξ) = (g1(x(ξ)) + ∫ k2(θ,ξ) g2(h(θ,ξ)) dθ) u(ξ)
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NemytskiiDiffusion {
    pub g1: ScalarMap,
    pub g2: ScalarMap,
    pub k2: Kernel,
}

impl NemytskiiDrift {
    pub fn zero() -> Self {
        Self {
            f1: ScalarMap::ZERO,
            f2: ScalarMap::ZERO,
            k1: Kernel::ZERO,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.f1.is_zero() && (self.f2.is_zero() || self.k1.is_zero())
    }

    pub fn has_history(&self) -> bool {
        !(self.f2.is_zero() || self.k1.is_zero())
    }

    /// (L_{f1}, L_{f2}·ess sup ‖k1(·,ξ)‖_{L^{p'}}).
    pub fn lipschitz(&self, space: &FieldSpace, p: f64) -> (f64, f64) {
        (
            self.f1.lipschitz(),
            self.f2.lipschitz() * self.k1.sup_theta_norm(conjugate(p), space),
        )
    }
}

impl NemytskiiDiffusion {
    pub fn zero() -> Self {
        Self {
            g1: ScalarMap::ZERO,
            g2: ScalarMap::ZERO,
            k2: Kernel::ZERO,
        }
    }

    pub fn additive(c: f64) -> Self {
        Self {
            g1: ScalarMap::constant(c),
            ..Self::zero()
        }
    }

    pub fn is_zero(&self) -> bool {
        self.g1.is_zero() && (self.g2.is_zero() || self.k2.is_zero())
    }

    pub fn has_history(&self) -> bool {
        !(self.g2.is_zero() || self.k2.is_zero())
    }

    /// Multiplier independent of the state.
    pub fn is_additive(&self) -> bool {
        self.g1.is_constant() && (self.g2.is_constant() || self.k2.is_zero())
    }

    pub fn lipschitz(&self, space: &FieldSpace, p: f64) -> (f64, f64) {
        (
            self.g1.lipschitz(),
            self.g2.lipschitz() * self.k2.sup_theta_norm(conjugate(p), space),
        )
    }
}

/// Σ_j w_j κ(θ_j) map(h_j(ξ)) · χ(ξ) on the grid, synthesizing each node.
fn history_integral_grid(space: &LiftedSpace, map: &ScalarMap, k: &Kernel, h: &Segment) -> Vec<f64> {
    let fs = space.field();
    let g = fs.n_grid();
    let mut out = vec![0.0; g];
    if k.is_zero() || map.is_zero() {
        return out;
    }
    let sk = k.sample(space);
    let mut node = vec![0.0; g];
    for (j, &w) in sk.theta_weights().iter().enumerate() {
        fs.synthesize_into(h.node(j), &mut node);
        for (o, &u) in out.iter_mut().zip(&node) {
            *o += w * map.eval(u);
        }
    }
    sk.apply_xi(&mut out);
    out
}

fn check_pair(space: &LiftedSpace, x: &SpectralField, h: &Segment) -> Result<()> {
    if x.n_modes() != space.n_modes() || h.n_modes() != space.n_modes() || h.m() != space.m() {
        return Err(Error::GridMismatch("state does not match the lifted space".into()));
    }
    Ok(())
}

/// Grid values of φ([x,h]).
pub fn drift_grid(d: &NemytskiiDrift, space: &LiftedSpace, x: &SpectralField, h: &Segment) -> Result<Vec<f64>> {
    check_pair(space, x, h)?;
    let fs = space.field();
    let xg = fs.synthesize(x);
    let mut out = history_integral_grid(space, &d.f2, &d.k1, h);
    for (o, &u) in out.iter_mut().zip(&xg) {
        *o += d.f1.eval(u);
    }
    Ok(out)
}

pub fn drift_apply(d: &NemytskiiDrift, space: &LiftedSpace, x: &SpectralField, h: &Segment) -> Result<SpectralField> {
    Ok(space.field().analyze(&drift_grid(d, space, x, h)?))
}

/// Grid values of the multiplier g1(x) + ∫ k2 g2(h) dθ.
pub fn diffusion_multiplier(
    d: &NemytskiiDiffusion,
    space: &LiftedSpace,
    x: &SpectralField,
    h: &Segment,
) -> Result<Vec<f64>> {
    check_pair(space, x, h)?;
    let xg = space.field().synthesize(x);
    let mut out = history_integral_grid(space, &d.g2, &d.k2, h);
    for (o, &u) in out.iter_mut().zip(&xg) {
        *o += d.g1.eval(u);
    }
    Ok(out)
}

pub fn diffusion_apply(
    d: &NemytskiiDiffusion,
    space: &LiftedSpace,
    x: &SpectralField,
    h: &Segment,
    u: &SpectralField,
) -> Result<SpectralField> {
    let mult = diffusion_multiplier(d, space, x, h)?;
    let fs = space.field();
    let mut ug = fs.synthesize(u);
    for (v, m) in ug.iter_mut().zip(&mult) {
        *v *= m;
    }
    Ok(fs.analyze(&ug))
}

// ---------------------------------------------------------------------------
// growth functions

pub type GrowthFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

pub fn growth_fn(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> GrowthFn {
    Arc::new(f)
}

#[derive(Clone)]
pub struct GrowthFunctions {
    pub a: GrowthFn,
    pub b: GrowthFn,
    pub a_tilde: GrowthFn,
    pub b_tilde: GrowthFn,
}

impl std::fmt::Debug for GrowthFunctions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GrowthFunctions")
            .field("a(1)", &(self.a)(1.0))
            .field("b(1)", &(self.b)(1.0))
            .finish()
    }
}

impl GrowthFunctions {
    pub fn new(a: GrowthFn, b: GrowthFn, total_variation: f64, m_bound: GrowthFn) -> Self {
        Self {
            a_tilde: growth_transfer(a.clone(), total_variation, m_bound.clone()),
            b_tilde: growth_transfer(b.clone(), total_variation, m_bound),
            a,
            b,
        }
    }

    /// ∫_0^T ã^p and ∫_0^T b̃^{p∨2}, both finite for locally integrable inputs.
    pub fn integrability(&self, p: f64, t: f64) -> (f64, f64) {
        let pa = p;
        let pb = p.max(2.0);
        (
            integrate_singular(|s| (self.a_tilde)(s).abs().powf(pa), t),
            integrate_singular(|s| (self.b_tilde)(s).abs().powf(pb), t),
        )
    }
}

/// t ↦ f(t) + M_𝓣(t)·|η|(-1,0)·∫_0^t f(s) ds
pub fn growth_transfer(f: GrowthFn, total_variation: f64, m_bound: GrowthFn) -> GrowthFn {
    if total_variation == 0.0 {
        return f;
    }
    Arc::new(move |t: f64| {
        let integral = if t > 0.0 { integrate_singular(|s| f(s), t) } else { 0.0 };
        f(t) + m_bound(t) * total_variation * integral
    })
}

/// C_q = (q')^{-1/q'} (4π)^{1/(2q') - 1/2}
pub fn ultracontractivity_constant(q: f64) -> f64 {
    let qd = conjugate(q);
    let four_pi = 4.0 * std::f64::consts::PI;
    if qd.is_infinite() {
        return four_pi.powf(-0.5);
    }
    qd.powf(-1.0 / qd) * four_pi.powf(1.0 / (2.0 * qd) - 0.5)
}

/// Exponent 1/(2q') - 1/2 of t in the ultracontractive bound.
pub fn ultracontractivity_exponent(q: f64) -> f64 {
    let qd = conjugate(q);
    if qd.is_infinite() {
        -0.5
    } else {
        1.0 / (2.0 * qd) - 0.5
    }
}

/// Open window (p∨2)/2 < q < 2r/(2+r).
pub fn q_window(p: f64, r: f64) -> (f64, f64) {
    (p.max(2.0) / 2.0, 2.0 * r / (2.0 + r))
}

pub fn check_q_admissible(q: f64, p: f64, r: f64) -> Result<()> {
    let (lo, hi) = q_window(p, r);
    if !(q > lo) {
        return Err(Error::Admissibility(format!(
            "need q > (p∨2)/2: q = {q}, (p∨2)/2 = {lo}"
        )));
    }
    if !(q < hi) {
        return Err(Error::Admissibility(format!(
            "need q < 2r/(2+r): q = {q}, 2r/(2+r) = {hi}"
        )));
    }
    Ok(())
}

/// 2∨p < 4r/(2+r)
pub fn check_exponents(p: f64, r: f64) -> Result<()> {
    let lhs = p.max(2.0);
    let rhs = 4.0 * r / (2.0 + r);
    if lhs < rhs {
        Ok(())
    } else {
        Err(Error::Admissibility(format!(
            "need 2∨p < 4r/(2+r): 2∨p = {lhs}, 4r/(2+r) = {rhs:.6} (p = {p}, r = {r})"
        )))
    }
}

/// Growth of the drift: a ≡ 2^{1/p'}·max(L_{f1}, L_{f2}·ess sup‖k1‖_{L^{p'}}).
pub fn drift_growth(d: &NemytskiiDrift, space: &FieldSpace, p: f64) -> GrowthFn {
    let (l1, l2) = d.lipschitz(space, p);
    let c = 2f64.powf(1.0 / conjugate(p)) * l1.max(l2);
    Arc::new(move |_| c)
}

/// b(t) = 2^{1/p'}·max(L_{g1}, L_{g2}·ess sup‖k2‖_{L^{p'}})·C_q·t^{(q-1)/(2q) - 1/2}
pub fn diffusion_growth(d: &NemytskiiDiffusion, space: &FieldSpace, p: f64, q: f64) -> GrowthFn {
    let (l1, l2) = d.lipschitz(space, p);
    let c = 2f64.powf(1.0 / conjugate(p)) * l1.max(l2) * ultracontractivity_constant(q);
    let e = (q - 1.0) / (2.0 * q) - 0.5;
    Arc::new(move |t: f64| if c == 0.0 { 0.0 } else { c * t.powf(e) })
}

#[derive(Debug, Clone)]
pub struct EnvelopeReport {
    pub bound: f64,
    pub holds: bool,
    /// Smallest value of (b(t)(1+‖𝓧‖) - ‖S(t)ψ(𝓧)‖) / (b(t)(1+‖𝓧‖)) over probes.
    pub margin: f64,
    pub max_ratio: f64,
}

/// Square-function norm ‖(Σ_n |S(t)(G e_n)|²)^{1/2}‖_{L^r} of S(t)ψ for a multiplier G.
pub fn smoothed_noise_norm(space: &FieldSpace, heat: &HeatSemigroup, t: f64, mult: &[f64], n_noise: usize) -> f64 {
    let g = space.n_grid();
    let n = space.n_modes();
    let decay: Vec<f64> = heat.eigenvalues().iter().map(|l| (l * t).exp()).collect();
    let mut col_grid = vec![0.0; g];
    let mut coeffs = vec![0.0; n];
    let mut sq = vec![0.0; g];
    let mut e_n = vec![0.0; n_noise];
    for k in 0..n_noise {
        e_n.iter_mut().for_each(|v| *v = 0.0);
        e_n[k] = 1.0;
        space.synthesize_into(&e_n, &mut col_grid);
        for (v, m) in col_grid.iter_mut().zip(mult) {
            *v *= m;
        }
        space.analyze_into(&col_grid, &mut coeffs);
        for (c, d) in coeffs.iter_mut().zip(&decay) {
            *c *= d;
        }
        space.synthesize_into(&coeffs, &mut col_grid);
        for (s, v) in sq.iter_mut().zip(&col_grid) {
            *s += v * v;
        }
    }
    sq.iter_mut().for_each(|s| *s = s.sqrt());
    space.norm_values(&sq)
}

/// Checks ‖S(t)ψ(𝓧)‖ ≤ b(t)(1+‖𝓧‖) on random lifted states.
#[allow(clippy::too_many_arguments)]
pub fn lipschitz_envelope_check(
    d: &NemytskiiDiffusion,
    space: &LiftedSpace,
    heat: &HeatSemigroup,
    t: f64,
    q: f64,
    n_noise: usize,
    n_probes: usize,
    seed: u64,
) -> Result<EnvelopeReport> {
    let fs = space.field();
    let p = space.p();
    check_q_admissible(q, p, fs.r())?;
    if !(t > 0.0) {
        return Err(invalid("t", "must be positive"));
    }
    let bound = diffusion_growth(d, fs, p, q)(t);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut margin = f64::INFINITY;
    let mut max_ratio: f64 = 0.0;
    for _ in 0..n_probes {
        let y = random_state(space, &mut rng);
        let mult = diffusion_multiplier(d, space, &y.head, &y.tail)?;
        let lhs = smoothed_noise_norm(fs, heat, t, &mult, n_noise);
        let rhs = bound * (1.0 + space.norm(&y)?);
        if rhs > 0.0 {
            margin = margin.min((rhs - lhs) / rhs);
            max_ratio = max_ratio.max(lhs / rhs);
        } else if lhs > 0.0 {
            margin = f64::NEG_INFINITY;
            max_ratio = f64::INFINITY;
        }
    }
    if margin == f64::INFINITY {
        margin = 1.0;
    }
    Ok(EnvelopeReport {
        bound,
        holds: margin >= 0.0,
        margin,
        max_ratio,
    })
}

/// Random lifted state with decaying coefficients and a random overall scale.
pub fn random_state(space: &LiftedSpace, rng: &mut impl Rng) -> crate::segments::LiftedState {
    let n = space.n_modes();
    let scale = 10f64.powf(rng.random_range(-1.0..1.0));
    let field = |rng: &mut dyn rand::RngCore| {
        SpectralField::from_coeffs(
            (1..=n)
                .map(|k| scale * rng.random_range(-1.0..1.0) / k as f64)
                .collect(),
        )
    };
    let head = field(rng);
    let tail = Segment::from_fn(space.m(), n, |_, _| field(rng));
    crate::segments::LiftedState { head, tail }
}
