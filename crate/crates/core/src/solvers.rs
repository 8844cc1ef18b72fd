//! Integrators for the delay equation and its lift: the lifted Euler scheme, a direct
//! Euler scheme on the delay equation, and Picard iteration of the mild-solution map,
//! together with the contraction constants of that map.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::delay_operators::{
    diffusion_growth, drift_growth, AtomOperator, DelayMeasure, GrowthFn, GrowthFunctions, Kernel,
    NemytskiiDiffusion, NemytskiiDrift, NodeSource, SampledKernel, ScalarMap,
};
use crate::error::{invalid, Error, Result};
use crate::field::{FieldSpace, SpectralField};
use crate::noise::{apply_noise_into, NoisePlan, NoiseScratch};
use crate::numerics::{compensated_sum, grid_index, integrate_singular};
use crate::segments::{segment_at, LiftedSpace, LiftedState, Path, Segment};
use crate::semigroup::{DelaySemigroup, HeatSemigroup};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Steps per unit delay; dt = 1/m.
    pub m: usize,
    pub horizon: f64,
    pub p: f64,
    /// Moment exponent of the β-norm.
    pub q: f64,
    pub r: f64,
    pub beta: f64,
    pub n_picard_max: usize,
    pub picard_tol: f64,
    pub n_paths: usize,
}

impl SolverConfig {
    pub fn new(m: usize, horizon: f64) -> Self {
        Self {
            m,
            horizon,
            p: 2.0,
            q: 2.0,
            r: 2.0,
            beta: 0.0,
            n_picard_max: 50,
            picard_tol: 1e-10,
            n_paths: 1,
        }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn n_steps(&self) -> Result<usize> {
        grid_index(self.horizon, self.m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(invalid("dt", "need dt = 1/m with m >= 1"));
        }
        if !(self.horizon > 0.0) {
            return Err(invalid("horizon", format!("must be positive, got {}", self.horizon)));
        }
        self.n_steps()?;
        if !(self.p >= 1.0) {
            return Err(invalid("p", format!("need p >= 1, got {}", self.p)));
        }
        if !(self.q >= 2.0) {
            return Err(invalid("q", format!("need q >= 2, got {}", self.q)));
        }
        if !(self.r >= 1.0) {
            return Err(invalid("r", format!("need r >= 1, got {}", self.r)));
        }
        if !(self.beta >= 0.0) {
            return Err(invalid("beta", format!("need beta >= 0, got {}", self.beta)));
        }
        if !(self.picard_tol > 0.0) {
            return Err(invalid("picard_tol", "must be positive"));
        }
        Ok(())
    }
}

/// Linear part, delay measure and the two Nemytskii operators on a fixed discretization.
#[derive(Debug, Clone)]
pub struct Model {
    semigroup: DelaySemigroup,
    measure: DelayMeasure,
    drift: NemytskiiDrift,
    diffusion: NemytskiiDiffusion,
    k1: SampledKernel,
    k2: SampledKernel,
}

impl Model {
    pub fn new(
        space: LiftedSpace,
        measure: DelayMeasure,
        drift: NemytskiiDrift,
        diffusion: NemytskiiDiffusion,
    ) -> Result<Self> {
        let heat = HeatSemigroup::new(space.n_modes());
        Self::with_heat(space, heat, measure, drift, diffusion)
    }

    pub fn with_heat(
        space: LiftedSpace,
        heat: HeatSemigroup,
        measure: DelayMeasure,
        drift: NemytskiiDrift,
        diffusion: NemytskiiDiffusion,
    ) -> Result<Self> {
        let k1 = drift.k1.sample(&space);
        let k2 = diffusion.k2.sample(&space);
        let semigroup = DelaySemigroup::new(space, heat, &measure)?;
        Ok(Self {
            semigroup,
            measure,
            drift,
            diffusion,
            k1,
            k2,
        })
    }

    pub fn space(&self) -> &LiftedSpace {
        self.semigroup.space()
    }

    pub fn field(&self) -> &FieldSpace {
        self.semigroup.space().field()
    }

    pub fn heat(&self) -> &HeatSemigroup {
        self.semigroup.heat()
    }

    pub fn semigroup(&self) -> &DelaySemigroup {
        &self.semigroup
    }

    pub fn measure(&self) -> &DelayMeasure {
        &self.measure
    }

    pub fn drift(&self) -> &NemytskiiDrift {
        &self.drift
    }

    pub fn diffusion(&self) -> &NemytskiiDiffusion {
        &self.diffusion
    }

    /// a, b and their transfers ã, b̃ with the given bound on ‖𝓣(t)‖.
    pub fn growth_functions(&self, p: f64, q_ultra: f64, m_bound: GrowthFn) -> GrowthFunctions {
        let fs = self.field();
        GrowthFunctions::new(
            drift_growth(&self.drift, fs, p),
            diffusion_growth(&self.diffusion, fs, p, q_ultra),
            self.semigroup.total_variation(),
            m_bound,
        )
    }

    fn check_config(&self, config: &SolverConfig) -> Result<usize> {
        config.validate()?;
        if config.m != self.space().m() {
            return Err(Error::GridMismatch(format!(
                "solver dt = 1/{} but the segment grid has dt = 1/{}",
                config.m,
                self.space().m()
            )));
        }
        config.n_steps()
    }

    fn check_state(&self, state: &LiftedState) -> Result<()> {
        let sp = self.space();
        if state.head.n_modes() != sp.n_modes() || state.tail.n_modes() != sp.n_modes() || state.tail.m() != sp.m() {
            return Err(Error::GridMismatch("initial state does not match the model".into()));
        }
        if !state.is_finite() {
            return Err(invalid("state", "initial state is not finite"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// shared per-step work

struct Work {
    xg: Vec<f64>,
    drift: Vec<f64>,
    mult: Vec<f64>,
    tmp: Vec<f64>,
    dw: Vec<f64>,
    noise: Vec<f64>,
    inj: Vec<f64>,
    phi: Vec<f64>,
    scratch: NoiseScratch,
}

impl Work {
    fn new(fs: &FieldSpace, n_noise: usize) -> Self {
        let g = fs.n_grid();
        let n = fs.n_modes();
        Self {
            xg: vec![0.0; g],
            drift: vec![0.0; g],
            mult: vec![0.0; g],
            tmp: vec![0.0; g],
            dw: vec![0.0; n_noise],
            noise: vec![0.0; n],
            inj: vec![0.0; n],
            phi: vec![0.0; n],
            scratch: NoiseScratch::new(fs),
        }
    }
}

/// inj = dt·φ + ψΔW_k from `work.drift` (grid values of φ) and `work.mult` (grid values of ψ).
fn assemble_injection(
    fs: &FieldSpace,
    drift_zero: bool,
    diffusion_zero: bool,
    plan: &NoisePlan,
    path_id: u64,
    k: usize,
    dt: f64,
    work: &mut Work,
) -> Result<()> {
    work.inj.iter_mut().for_each(|v| *v = 0.0);
    if !drift_zero {
        fs.analyze_into(&work.drift, &mut work.inj);
        work.inj.iter_mut().for_each(|v| *v *= dt);
    }
    if !diffusion_zero {
        plan.increments_into(path_id, k, &mut work.dw);
        apply_noise_into(fs, &work.mult, &work.dw, &mut work.scratch, &mut work.noise)?;
        for (i, v) in work.inj.iter_mut().zip(&work.noise) {
            *i += v;
        }
    }
    Ok(())
}

fn check_finite(c: &[f64], path_id: u64, step: usize) -> Result<()> {
    if c.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { path_id, step })
    }
}

fn check_plan(model: &Model, config: &SolverConfig, plan: &NoisePlan) -> Result<()> {
    if (plan.dt() - config.dt()).abs() > 1e-12 * config.dt() {
        return Err(Error::GridMismatch(format!(
            "noise plan has dt = {} but the solver uses {}",
            plan.dt(),
            config.dt()
        )));
    }
    if plan.n_noise_modes() > model.field().n_table() {
        return Err(invalid(
            "n_noise_modes",
            format!(
                "{} noise modes but the field tabulates {}",
                plan.n_noise_modes(),
                model.field().n_table()
            ),
        ));
    }
    Ok(())
}

struct DequeNodes<'a>(&'a VecDeque<Vec<f64>>);

impl NodeSource for DequeNodes<'_> {
    fn node(&self, j: usize) -> &[f64] {
        &self.0[j]
    }
}

/// f2 and g2 applied to the grid values of every tail node.
struct NodeImages {
    f2: Option<VecDeque<Vec<f64>>>,
    g2: Option<VecDeque<Vec<f64>>>,
}

impl NodeImages {
    fn new(model: &Model, tail: &Segment) -> Self {
        let fs = model.field();
        let g = fs.n_grid();
        let mut grid = vec![0.0; g];
        let mut build = |map: &ScalarMap| {
            (0..tail.n_nodes())
                .map(|j| {
                    fs.synthesize_into(tail.node(j), &mut grid);
                    let mut img = vec![0.0; g];
                    map.apply(&grid, &mut img);
                    img
                })
                .collect::<VecDeque<_>>()
        };
        Self {
            f2: model.drift.has_history().then(|| build(&model.drift.f2)),
            g2: model.diffusion.has_history().then(|| build(&model.diffusion.g2)),
        }
    }

    /// Drop the oldest node, replace node m-1 by the old head, append the new head.
    fn shift(&mut self, model: &Model, old_head_grid: &[f64], new_head_grid: &[f64]) {
        fn roll(q: &mut VecDeque<Vec<f64>>, map: &ScalarMap, old: &[f64], new: &[f64]) {
            let mut front = q.pop_front().expect("nonempty window");
            let last = q.len() - 1;
            map.apply(old, &mut q[last]);
            map.apply(new, &mut front);
            q.push_back(front);
        }
        if let Some(q) = self.f2.as_mut() {
            roll(q, &model.drift.f2, old_head_grid, new_head_grid);
        }
        if let Some(q) = self.g2.as_mut() {
            roll(q, &model.diffusion.g2, old_head_grid, new_head_grid);
        }
    }
}

/// φ and ψ on the grid at a head with grid values `xg` and history images.
fn local_terms(
    model: &Model,
    xg: &[f64],
    f2: Option<&dyn NodeSource>,
    g2: Option<&dyn NodeSource>,
    drift: &mut [f64],
    mult: &mut [f64],
    tmp: &mut [f64],
) {
    model.drift.f1.apply(xg, drift);
    if let Some(nodes) = f2 {
        model.k1.integrate(nodes, tmp);
        for (d, t) in drift.iter_mut().zip(tmp.iter()) {
            *d += t;
        }
    }
    model.diffusion.g1.apply(xg, mult);
    if let Some(nodes) = g2 {
        model.k2.integrate(nodes, tmp);
        for (d, t) in mult.iter_mut().zip(tmp.iter()) {
            *d += t;
        }
    }
}

/// state ← 𝓣(dt)state + [S(dt)inj, node m ← new head].
fn lifted_step(model: &Model, state: &mut LiftedState, inj: &mut [f64], phi_buf: &mut [f64]) {
    let sg = &model.semigroup;
    sg.step_in_place(state, phi_buf);
    sg.heat().apply_in_place(sg.dt(), inj);
    let m = sg.space().m();
    let head = state.head.coeffs_mut();
    for (h, v) in head.iter_mut().zip(inj.iter()) {
        *h += v;
    }
    state.tail.node_mut(m).copy_from_slice(state.head.coeffs());
}

// ---------------------------------------------------------------------------
// lifted Euler scheme

/// Exponential Euler on the lifted problem; returns the head path with history f₀.
pub fn em_lifted(
    config: &SolverConfig,
    model: &Model,
    state0: &LiftedState,
    plan: &NoisePlan,
    path_id: u64,
) -> Result<Path> {
    em_lifted_observed(config, model, state0, plan, path_id, |_, _| {})
}

/// As [`em_lifted`], handing every lifted state Y(t_k), k = 0..=K, to `observe`.
pub fn em_lifted_observed(
    config: &SolverConfig,
    model: &Model,
    state0: &LiftedState,
    plan: &NoisePlan,
    path_id: u64,
    mut observe: impl FnMut(usize, &LiftedState),
) -> Result<Path> {
    let kk = model.check_config(config)?;
    model.check_state(state0)?;
    check_plan(model, config, plan)?;
    let fs = model.field();
    let dt = config.dt();
    let drift_zero = model.drift.is_zero();
    let diffusion_zero = model.diffusion.is_zero();
    let mut work = Work::new(fs, plan.n_noise_modes());
    let mut images = NodeImages::new(model, &state0.tail);
    let mut state = state0.clone();
    let mut values = Vec::with_capacity(kk + 1);
    values.push(state.head.clone());
    observe(0, &state);
    let mut new_grid = vec![0.0; fs.n_grid()];
    for k in 0..kk {
        fs.synthesize_into(state.head.coeffs(), &mut work.xg);
        let f2 = images.f2.as_ref().map(DequeNodes);
        let g2 = images.g2.as_ref().map(DequeNodes);
        local_terms(
            model,
            &work.xg,
            f2.as_ref().map(|d| d as &dyn NodeSource),
            g2.as_ref().map(|d| d as &dyn NodeSource),
            &mut work.drift,
            &mut work.mult,
            &mut work.tmp,
        );
        assemble_injection(fs, drift_zero, diffusion_zero, plan, path_id, k, dt, &mut work)?;
        lifted_step(model, &mut state, &mut work.inj, &mut work.phi);
        check_finite(state.head.coeffs(), path_id, k + 1)?;
        if images.f2.is_some() || images.g2.is_some() {
            fs.synthesize_into(state.head.coeffs(), &mut new_grid);
            images.shift(model, &work.xg, &new_grid);
        }
        values.push(state.head.clone());
        observe(k + 1, &state);
    }
    Path::new(state0.tail.clone(), values)
}

// ---------------------------------------------------------------------------
// direct Euler scheme on the delay equation

/// ∫_{-1}^0 κ(θ) v(t+θ) dθ over a sliding window by the trapezoid rule. For exponential
/// profiles κ_j = κ_m ρ^{m-j} the sum is carried by a running accumulator.
struct Sliding {
    weights: Vec<f64>,
    geo: Option<(f64, f64, f64)>,
    acc: Vec<f64>,
    dt: f64,
}

impl Sliding {
    fn new(kernel: &Kernel, space: &LiftedSpace, dim: usize) -> Self {
        let m = space.m();
        let weights = (0..=m)
            .map(|j| space.theta_weight(j) * kernel.theta_profile(space.theta(j)))
            .collect();
        let geo = (kernel.power == 0).then(|| {
            let rho = (-kernel.rate * space.dt()).exp();
            (rho, kernel.theta_profile(-1.0), kernel.theta_profile(0.0))
        });
        Self {
            weights,
            geo,
            acc: vec![0.0; dim],
            dt: space.dt(),
        }
    }

    fn reset(&mut self, window: &VecDeque<Vec<f64>>) {
        let Some(_) = self.geo else { return };
        let m = window.len() - 1;
        self.acc.iter_mut().for_each(|a| *a = 0.0);
        for (j, v) in window.iter().enumerate() {
            let kappa = if j == 0 || j == m { 2.0 } else { 1.0 } * self.weights[j] / self.dt;
            for (a, x) in self.acc.iter_mut().zip(v) {
                *a += kappa * x;
            }
        }
    }

    fn advance(&mut self, exiting: &[f64], entering: &[f64]) {
        let Some((rho, k0, km)) = self.geo else { return };
        for ((a, x0), xn) in self.acc.iter_mut().zip(exiting).zip(entering) {
            *a = rho * (*a - k0 * x0) + km * xn;
        }
    }

    fn value(&self, window: &VecDeque<Vec<f64>>, out: &mut [f64]) {
        match self.geo {
            Some((_, k0, km)) => {
                let first = &window[0];
                let last = &window[window.len() - 1];
                let h = 0.5 * self.dt;
                for (i, o) in out.iter_mut().enumerate() {
                    *o = self.dt * self.acc[i] - h * (k0 * first[i] + km * last[i]);
                }
            }
            None => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for (w, v) in self.weights.iter().zip(window) {
                    for (o, x) in out.iter_mut().zip(v) {
                        *o += w * x;
                    }
                }
            }
        }
    }
}

struct DirectChannel {
    sliding: Sliding,
    window: VecDeque<Vec<f64>>,
    chi: Option<Vec<f64>>,
}

impl DirectChannel {
    fn new(kernel: &Kernel, space: &LiftedSpace, nodes: Vec<Vec<f64>>) -> Self {
        let dim = nodes[0].len();
        let chi = match kernel.xi {
            crate::delay_operators::XiShape::One => None,
            s => Some(space.field().grid().nodes().iter().map(|&x| s.eval(x)).collect()),
        };
        let mut ch = Self {
            sliding: Sliding::new(kernel, space, dim),
            window: nodes.into(),
            chi,
        };
        ch.sliding.reset(&ch.window);
        ch
    }

    /// Window k → k+1. At k = 0 node m-1 becomes x₀ rather than f₀(0), so the sum is rebuilt.
    fn shift(&mut self, k: usize, x0: &[f64], entering: Vec<f64>) {
        let exiting = self.window.pop_front().expect("nonempty window");
        if k == 0 {
            let last = self.window.len() - 1;
            self.window[last].copy_from_slice(x0);
            self.window.push_back(entering);
            self.sliding.reset(&self.window);
        } else {
            self.sliding.advance(&exiting, &entering);
            self.window.push_back(entering);
        }
    }
}

/// Exponential Euler on X directly: X_{k+1} = S(dt)(X_k + dt(ΦX_{t_k} + φ_k) + ψ_kΔW_k),
/// with the history [t_k - 1, t_k] held in sliding windows.
pub fn em_direct(
    config: &SolverConfig,
    model: &Model,
    x0: &SpectralField,
    f0: &Segment,
    plan: &NoisePlan,
    path_id: u64,
) -> Result<Path> {
    let kk = model.check_config(config)?;
    let state0 = LiftedState {
        head: x0.clone(),
        tail: f0.clone(),
    };
    model.check_state(&state0)?;
    check_plan(model, config, plan)?;
    let space = model.space();
    let fs = space.field();
    let heat = model.heat();
    let m = space.m();
    let n = fs.n_modes();
    let g = fs.n_grid();
    let dt = config.dt();
    let measure = &model.measure;
    let drift = &model.drift;
    let diffusion = &model.diffusion;
    let drift_zero = drift.is_zero();
    let diffusion_zero = diffusion.is_zero();

    let node_grid = |c: &[f64]| {
        let mut v = vec![0.0; g];
        fs.synthesize_into(c, &mut v);
        v
    };
    let image = |map: &ScalarMap, grid: &[f64]| {
        let mut v = vec![0.0; g];
        map.apply(grid, &mut v);
        v
    };
    let f0_grids: Vec<Vec<f64>> = (0..=m).map(|j| node_grid(f0.node(j))).collect();

    let mut density = (!measure.density.is_zero()).then(|| {
        DirectChannel::new(&measure.density, space, (0..=m).map(|j| f0.node(j).to_vec()).collect())
    });
    let mut f2_ch = drift
        .has_history()
        .then(|| DirectChannel::new(&drift.k1, space, f0_grids.iter().map(|v| image(&drift.f2, v)).collect()));
    let mut g2_ch = diffusion.has_history().then(|| {
        DirectChannel::new(&diffusion.k2, space, f0_grids.iter().map(|v| image(&diffusion.g2, v)).collect())
    });
    // point delays read raw history nodes
    let mut atoms = Vec::with_capacity(measure.atoms.len());
    for a in &measure.atoms {
        let j = grid_index(a.theta + 1.0, m).map_err(|_| Error::OffGrid { t: a.theta, dt })?;
        let pointwise = match &a.op {
            AtomOperator::Pointwise { scale, shape } => {
                Some(fs.grid().nodes().iter().map(|&x| scale * shape.eval(x)).collect::<Vec<_>>())
            }
            _ => None,
        };
        atoms.push((j, &a.op, pointwise));
    }
    let mut raw: VecDeque<Vec<f64>> = (0..=m).map(|j| f0.node(j).to_vec()).collect();

    let mut work = Work::new(fs, plan.n_noise_modes());
    let mut x = x0.coeffs().to_vec();
    let mut values = Vec::with_capacity(kk + 1);
    values.push(x0.clone());
    let mut dens = vec![0.0; n];
    let mut grid_buf = vec![0.0; g];
    let mut coeff_buf = vec![0.0; n];
    for k in 0..kk {
        fs.synthesize_into(&x, &mut work.xg);

        // ΦX_{t_k}
        dens.iter_mut().for_each(|v| *v = 0.0);
        if let Some(ch) = &density {
            ch.sliding.value(&ch.window, &mut dens);
            if let Some(chi) = &ch.chi {
                fs.synthesize_into(&dens, &mut grid_buf);
                for (v, c) in grid_buf.iter_mut().zip(chi) {
                    *v *= c;
                }
                fs.analyze_into(&grid_buf, &mut dens);
            }
        }
        for (j, op, pw) in &atoms {
            let h = &raw[*j];
            match op {
                AtomOperator::Scalar(c) => {
                    for (d, v) in dens.iter_mut().zip(h) {
                        *d += c * v;
                    }
                }
                AtomOperator::Diagonal(dg) => {
                    for ((d, v), c) in dens.iter_mut().zip(h).zip(dg) {
                        *d += c * v;
                    }
                }
                AtomOperator::Pointwise { .. } => {
                    let mult = pw.as_ref().expect("built with the atom");
                    fs.synthesize_into(h, &mut grid_buf);
                    for (v, c) in grid_buf.iter_mut().zip(mult) {
                        *v *= c;
                    }
                    fs.analyze_into(&grid_buf, &mut coeff_buf);
                    for (d, c) in dens.iter_mut().zip(&coeff_buf) {
                        *d += c;
                    }
                }
            }
        }

        // φ(X(t_k), X_{t_k}) and ψ(X(t_k), X_{t_k}) on the grid
        drift.f1.apply(&work.xg, &mut work.drift);
        if let Some(ch) = &f2_ch {
            ch.sliding.value(&ch.window, &mut work.tmp);
            if let Some(chi) = &ch.chi {
                work.tmp.iter_mut().zip(chi).for_each(|(v, c)| *v *= c);
            }
            work.drift.iter_mut().zip(&work.tmp).for_each(|(d, v)| *d += v);
        }
        diffusion.g1.apply(&work.xg, &mut work.mult);
        if let Some(ch) = &g2_ch {
            ch.sliding.value(&ch.window, &mut work.tmp);
            if let Some(chi) = &ch.chi {
                work.tmp.iter_mut().zip(chi).for_each(|(v, c)| *v *= c);
            }
            work.mult.iter_mut().zip(&work.tmp).for_each(|(d, v)| *d += v);
        }
        assemble_injection(fs, drift_zero, diffusion_zero, plan, path_id, k, dt, &mut work)?;

        let x_old = x.clone();
        for ((xi, d), inj) in x.iter_mut().zip(&dens).zip(&work.inj) {
            *xi += dt * d + inj;
        }
        heat.apply_in_place(dt, &mut x);
        check_finite(&x, path_id, k + 1)?;
        values.push(SpectralField::from_coeffs(x.clone()));

        // slide every window to t_{k+1}
        raw.pop_front();
        if k == 0 {
            let last = raw.len() - 1;
            raw[last].copy_from_slice(&x_old);
        }
        raw.push_back(x.clone());
        if let Some(ch) = density.as_mut() {
            ch.shift(k, &x_old, x.clone());
        }
        if f2_ch.is_some() || g2_ch.is_some() {
            let new_grid = node_grid(&x);
            if let Some(ch) = f2_ch.as_mut() {
                let old = image(&drift.f2, &work.xg);
                ch.shift(k, &old, image(&drift.f2, &new_grid));
            }
            if let Some(ch) = g2_ch.as_mut() {
                let old = image(&diffusion.g2, &work.xg);
                ch.shift(k, &old, image(&diffusion.g2, &new_grid));
            }
        }
    }
    Path::new(f0.clone(), values)
}

// ---------------------------------------------------------------------------
// Picard iteration of the mild-solution map

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// sup_k e^{-βt_k}‖Z_{n+1}(t_k) - Z_n(t_k)‖
    pub weighted_norm_diff: f64,
    /// Natural log of the same, finite even when the weighted value underflows.
    pub log_weighted_norm_diff: f64,
    pub quotient: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardReport {
    pub beta: f64,
    /// Number n of map applications after which ‖Z_{n+1} - Z_n‖_β < tol.
    pub iterations: usize,
    pub converged: bool,
    pub records: Vec<IterationRecord>,
}

impl PicardReport {
    pub fn quotients(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.quotient).collect()
    }

    pub fn max_quotient(&self) -> Option<f64> {
        self.quotients().into_iter().reduce(f64::max)
    }
}

/// Per-iterate images f2(Z(t_i)), g2(Z(t_i)) on the grid, with the history images.
struct PathImages {
    hist: Vec<Vec<f64>>,
    vals: Vec<Vec<f64>>,
    m: usize,
}

struct PathImageWindow<'a> {
    imgs: &'a PathImages,
    k: usize,
}

impl NodeSource for PathImageWindow<'_> {
    fn node(&self, j: usize) -> &[f64] {
        let m = self.imgs.m;
        if self.k == 0 {
            return &self.imgs.hist[j];
        }
        let idx = self.k as isize + j as isize - m as isize;
        if idx < 0 {
            &self.imgs.hist[(idx + m as isize) as usize]
        } else {
            &self.imgs.vals[idx as usize]
        }
    }
}

fn path_images(map: &ScalarMap, hist_grids: &[Vec<f64>], val_grids: &[Vec<f64>], m: usize) -> PathImages {
    let apply = |v: &Vec<f64>| {
        let mut o = vec![0.0; v.len()];
        map.apply(v, &mut o);
        o
    };
    PathImages {
        hist: hist_grids.iter().map(apply).collect(),
        vals: val_grids.iter().map(apply).collect(),
        m,
    }
}

/// One application of the discrete mild-solution map to the head path `z`.
fn apply_mild_map(
    model: &Model,
    state0: &LiftedState,
    z: &Path,
    hist_grids: &[Vec<f64>],
    plan: &NoisePlan,
    path_id: u64,
    dt: f64,
) -> Result<Vec<SpectralField>> {
    let fs = model.field();
    let m = model.space().m();
    let kk = z.n_steps();
    let val_grids: Vec<Vec<f64>> = z.values().iter().map(|v| fs.synthesize(v)).collect();
    let f2 = model
        .drift
        .has_history()
        .then(|| path_images(&model.drift.f2, hist_grids, &val_grids, m));
    let g2 = model
        .diffusion
        .has_history()
        .then(|| path_images(&model.diffusion.g2, hist_grids, &val_grids, m));
    let drift_zero = model.drift.is_zero();
    let diffusion_zero = model.diffusion.is_zero();
    let mut work = Work::new(fs, plan.n_noise_modes());
    let mut w = state0.clone();
    let mut out = Vec::with_capacity(kk + 1);
    out.push(w.head.clone());
    for k in 0..kk {
        let f2w = f2.as_ref().map(|imgs| PathImageWindow { imgs, k });
        let g2w = g2.as_ref().map(|imgs| PathImageWindow { imgs, k });
        local_terms(
            model,
            &val_grids[k],
            f2w.as_ref().map(|d| d as &dyn NodeSource),
            g2w.as_ref().map(|d| d as &dyn NodeSource),
            &mut work.drift,
            &mut work.mult,
            &mut work.tmp,
        );
        assemble_injection(fs, drift_zero, diffusion_zero, plan, path_id, k, dt, &mut work)?;
        lifted_step(model, &mut w, &mut work.inj, &mut work.phi);
        check_finite(w.head.coeffs(), path_id, k + 1)?;
        out.push(w.head.clone());
    }
    Ok(out)
}

/// Natural log of sup_k e^{-βt_k}‖[D(t_k), D_{t_k}]‖ for head differences D sharing a history.
fn log_weighted_diff(space: &LiftedSpace, a: &[SpectralField], b: &[SpectralField], beta: f64) -> f64 {
    let fs = space.field();
    let m = space.m();
    let dt = space.dt();
    let head: Vec<f64> = a.iter().zip(b).map(|(x, y)| fs.norm(&x.sub(y))).collect();
    let mut window = vec![0.0; m + 1];
    let mut best = f64::NEG_INFINITY;
    for (k, &h) in head.iter().enumerate() {
        // tail node j holds D(t_k + θ_j); D vanishes on the shared history and at t = 0
        for (j, w) in window.iter_mut().enumerate() {
            let idx = k as isize + j as isize - m as isize;
            *w = if idx <= 0 { 0.0 } else { head[idx as usize] };
        }
        let v = space.combine(h, space.lp_from_node_norms(&window));
        if v > 0.0 {
            best = best.max(v.ln() - beta * k as f64 * dt);
        }
    }
    best
}

/// Fixed-point iteration of 𝓚 with frozen noise, started from Z₀ ≡ Y₀.
pub fn picard_solve(
    config: &SolverConfig,
    model: &Model,
    state0: &LiftedState,
    plan: &NoisePlan,
    path_id: u64,
) -> Result<(Path, PicardReport)> {
    let kk = model.check_config(config)?;
    model.check_state(state0)?;
    check_plan(model, config, plan)?;
    let fs = model.field();
    let dt = config.dt();
    let hist_grids: Vec<Vec<f64>> = (0..=model.space().m())
        .map(|j| {
            let mut v = vec![0.0; fs.n_grid()];
            fs.synthesize_into(state0.tail.node(j), &mut v);
            v
        })
        .collect();
    let mut z = Path::new(state0.tail.clone(), vec![state0.head.clone(); kk + 1])?;
    let log_tol = config.picard_tol.ln();
    let mut records: Vec<IterationRecord> = Vec::new();
    for n in 0..config.n_picard_max {
        let next = apply_mild_map(model, state0, &z, &hist_grids, plan, path_id, dt)?;
        let ld = log_weighted_diff(model.space(), &next, z.values(), config.beta);
        // a difference that vanishes exactly after a nonzero one has quotient 0
        let quotient = records
            .last()
            .filter(|prev| prev.log_weighted_norm_diff.is_finite())
            .map(|prev| (ld - prev.log_weighted_norm_diff).exp());
        records.push(IterationRecord {
            iteration: n,
            weighted_norm_diff: ld.exp(),
            log_weighted_norm_diff: ld,
            quotient,
        });
        z = Path::new(state0.tail.clone(), next)?;
        if ld < log_tol {
            return Ok((
                z,
                PicardReport {
                    beta: config.beta,
                    iterations: n,
                    converged: true,
                    records,
                },
            ));
        }
    }
    Ok((
        z,
        PicardReport {
            beta: config.beta,
            iterations: config.n_picard_max,
            converged: false,
            records,
        },
    ))
}

// ---------------------------------------------------------------------------
// contraction constants

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionConstants {
    pub c_beta_a: f64,
    pub c_beta_b: f64,
    pub k_beta: f64,
}

fn lp_norm_on(f: &dyn Fn(f64) -> f64, p: f64, t: f64) -> f64 {
    integrate_singular(|s| f(s).abs().powf(p), t).powf(1.0 / p)
}

/// (1 - e^{-βt})/β, equal to t at β = 0.
fn damped_length(beta: f64, t: f64) -> f64 {
    if beta == 0.0 {
        t
    } else {
        -(-beta * t).exp_m1() / beta
    }
}

/// C_{β,a} = ∫_0^t ã e^{-βu}du + ‖ã‖_{L^p(0,t)}(1-e^{-βt})/β,
/// C_{β,b} = (∫_0^t b̃² e^{-2βu}du)^{1/2} + ‖b̃‖_{L^{p∨2}(0,t)}((1-e^{-2βt})/(2β))^{1/2}.
pub fn contraction_constants_at(beta: f64, t: f64, p: f64, a_tilde: &GrowthFn, b_tilde: &GrowthFn) -> ContractionConstants {
    let a = |s: f64| a_tilde(s);
    let b = |s: f64| b_tilde(s);
    let c_beta_a = integrate_singular(|u| a(u) * (-beta * u).exp(), t) + lp_norm_on(&a, p, t) * damped_length(beta, t);
    let c_beta_b = integrate_singular(|u| b(u).powi(2) * (-2.0 * beta * u).exp(), t).sqrt()
        + lp_norm_on(&b, p.max(2.0), t) * damped_length(2.0 * beta, t).sqrt();
    ContractionConstants {
        c_beta_a,
        c_beta_b,
        k_beta: c_beta_a + c_beta_b,
    }
}

pub fn contraction_constants(config: &SolverConfig, a_tilde: &GrowthFn, b_tilde: &GrowthFn) -> ContractionConstants {
    contraction_constants_at(config.beta, config.horizon, config.p, a_tilde, b_tilde)
}

/// Largest exponent of the doubling grid searched for β.
pub const MAX_BETA_EXPONENT: i32 = 40;

/// Smallest β ∈ {0, 1, 2, 4, …} with c_eq·K_β < 1/2.
pub fn find_contraction_beta(config: &SolverConfig, a_tilde: &GrowthFn, b_tilde: &GrowthFn, c_eq: f64) -> Result<f64> {
    if !(c_eq > 0.0) {
        return Err(invalid("c_eq", "must be positive"));
    }
    let at = |beta| contraction_constants_at(beta, config.horizon, config.p, a_tilde, b_tilde).k_beta;
    let mut grid = vec![0.0];
    grid.extend((0..=MAX_BETA_EXPONENT).map(|j| 2f64.powi(j)));
    for &beta in &grid {
        if c_eq * at(beta) < 0.5 {
            return Ok(beta);
        }
    }
    let last = *grid.last().expect("nonempty grid");
    Err(Error::Admissibility(format!(
        "no β ≤ {last} gives C·K_β < 1/2 (C = {c_eq}, K_β = {:.6e} at β = {last})",
        at(last)
    )))
}

/// Empirical ratio (E sup_k ‖Σ_{j<k} S(t_k - t_j)ΔW_j‖^q)^{1/q} / (∫_0^T ‖S(s)‖²_HS ds)^{1/2} for
/// unit additive noise: a calibration of the stochastic-convolution constant.
pub fn estimate_c_eq(fs: &FieldSpace, heat: &HeatSemigroup, plan: &NoisePlan, horizon: f64, q: f64, n_paths: u64) -> Result<f64> {
    let m = (1.0 / plan.dt()).round() as usize;
    let kk = grid_index(horizon, m)?;
    let dt = plan.dt();
    let ones = vec![1.0; fs.n_grid()];
    let moments: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|path| -> Result<f64> {
            let mut x = vec![0.0; fs.n_modes()];
            let mut noise = vec![0.0; fs.n_modes()];
            let mut dw = vec![0.0; plan.n_noise_modes()];
            let mut scratch = NoiseScratch::new(fs);
            let mut sup: f64 = 0.0;
            for k in 0..kk {
                plan.increments_into(path, k, &mut dw);
                apply_noise_into(fs, &ones, &dw, &mut scratch, &mut noise)?;
                for (a, b) in x.iter_mut().zip(&noise) {
                    *a += b;
                }
                heat.apply_in_place(dt, &mut x);
                sup = sup.max(x.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
            Ok(sup.powf(q))
        })
        .collect::<Result<_>>()?;
    let lhs = (compensated_sum(moments.iter().copied()) / n_paths as f64).powf(1.0 / q);
    let hs: f64 = heat
        .eigenvalues()
        .iter()
        .take(plan.n_noise_modes())
        .map(|&l| if l == 0.0 { horizon } else { (2.0 * l * horizon).exp_m1() / (2.0 * l) })
        .sum();
    Ok(lhs / hs.sqrt())
}

// ---------------------------------------------------------------------------
// ensembles

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverKind {
    EmLifted,
    EmDirect,
    Picard,
}

impl SolverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SolverKind::EmLifted => "em_lifted",
            SolverKind::EmDirect => "em_direct",
            SolverKind::Picard => "picard",
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "em_lifted" => Ok(SolverKind::EmLifted),
            "em_direct" => Ok(SolverKind::EmDirect),
            "picard" => Ok(SolverKind::Picard),
            other => Err(Error::Config(format!("unknown solver `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub solver: SolverKind,
    pub config_hash: String,
    pub seed: u64,
}

/// Head paths on the grid; the lifted state at t_k is [X(t_k), X_{t_k}] read off the path.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub provenance: Provenance,
    pub dt: f64,
    paths: Vec<Path>,
}

impl PathEnsemble {
    pub fn new(provenance: Provenance, dt: f64, paths: Vec<Path>) -> Self {
        Self { provenance, dt, paths }
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn n_steps(&self) -> usize {
        self.paths.first().map_or(0, |p| p.n_steps())
    }

    /// Y(t_k) on path i, tail taken as the window of the head path.
    pub fn state(&self, i: usize, k: usize) -> Result<LiftedState> {
        let p = &self.paths[i];
        Ok(LiftedState {
            head: p.value(k).clone(),
            tail: segment_at(p, k as f64 * self.dt)?,
        })
    }
}

/// Runs paths 0..n_paths in parallel; results come back in path order.
pub fn run_paths<T: Send>(n_paths: usize, f: impl Fn(u64) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..n_paths as u64).into_par_iter().map(f).collect()
}

/// One path with the chosen integrator.
pub fn solve_path(
    kind: SolverKind,
    config: &SolverConfig,
    model: &Model,
    state0: &LiftedState,
    plan: &NoisePlan,
    path_id: u64,
) -> Result<Path> {
    match kind {
        SolverKind::EmLifted => em_lifted(config, model, state0, plan, path_id),
        SolverKind::EmDirect => em_direct(config, model, &state0.head, &state0.tail, plan, path_id),
        SolverKind::Picard => picard_solve(config, model, state0, plan, path_id).map(|(p, _)| p),
    }
}

pub fn run_ensemble(
    kind: SolverKind,
    config: &SolverConfig,
    model: &Model,
    state0: &LiftedState,
    plan: &NoisePlan,
    config_hash: &str,
) -> Result<PathEnsemble> {
    let paths = run_paths(config.n_paths, |id| solve_path(kind, config, model, state0, plan, id))?;
    Ok(PathEnsemble::new(
        Provenance {
            solver: kind,
            config_hash: config_hash.to_string(),
            seed: plan.seed(),
        },
        config.dt(),
        paths,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay_operators::{growth_fn, BaseMap, XiShape};
    use crate::semigroup::heat_apply;

    fn space(n: usize, m: usize) -> LiftedSpace {
        LiftedSpace::new(FieldSpace::new(n, 2.0).unwrap(), m, 2.0).unwrap()
    }

    fn nonlinear_model(n: usize, m: usize) -> Model {
        let measure = DelayMeasure::density(Kernel::exp(1.0, 1.0)).with_atom(-0.5, AtomOperator::Scalar(0.3));
        let drift = NemytskiiDrift {
            f1: ScalarMap::tanh(),
            f2: ScalarMap::tanh(),
            k1: Kernel::constant(1.0),
        };
        let diffusion = NemytskiiDiffusion {
            g1: ScalarMap::new(1.0, 1.0, BaseMap::Tanh),
            g2: ScalarMap::tanh(),
            k2: Kernel::constant(1.0),
        };
        Model::new(space(n, m), measure, drift, diffusion).unwrap()
    }

    fn initial(sp: &LiftedSpace) -> LiftedState {
        let fs = sp.field();
        let x0 = fs.project(|x| (std::f64::consts::PI * x).sin() + 0.3 * x);
        let f0 = Segment::from_fn(sp.m(), sp.n_modes(), |_, th| fs.project(|x| (1.0 + th) * x * (1.0 - x)));
        LiftedState { head: x0, tail: f0 }
    }

    #[test]
    fn config_validation() {
        let mut c = SolverConfig::new(64, 1.0);
        assert!(c.validate().is_ok());
        c.q = 1.5;
        assert!(c.validate().is_err());
        let c = SolverConfig::new(64, 1.0 + 1.0 / 256.0);
        assert!(matches!(c.validate(), Err(Error::OffGrid { .. })));
    }

    #[test]
    fn pure_heat_flow_in_all_solvers() {
        let sp = space(8, 16);
        let model = Model::new(sp.clone(), DelayMeasure::zero(), NemytskiiDrift::zero(), NemytskiiDiffusion::zero()).unwrap();
        let y0 = initial(&sp);
        let config = SolverConfig::new(16, 1.0);
        let plan = NoisePlan::new(8, config.dt(), 1).unwrap();
        let lifted = em_lifted(&config, &model, &y0, &plan, 0).unwrap();
        let direct = em_direct(&config, &model, &y0.head, &y0.tail, &plan, 0).unwrap();
        let (picard, report) = picard_solve(&config, &model, &y0, &plan, 0).unwrap();
        assert_eq!(report.iterations, 1);
        assert!(report.converged);
        for k in 0..=16 {
            let exact = heat_apply(model.heat(), k as f64 / 16.0, &y0.head).unwrap();
            for path in [&lifted, &direct, &picard] {
                for (a, b) in path.value(k).coeffs().iter().zip(exact.coeffs()) {
                    assert!((a - b).abs() <= 1e-13 * (1.0 + b.abs()), "k={k}");
                }
            }
        }
    }

    #[test]
    fn linear_delay_reproduces_method_of_steps() {
        let sp = space(6, 32);
        let measure = DelayMeasure::density(Kernel::exp(1.0, 1.0))
            .with_atom(-1.0, AtomOperator::Scalar(-1.0))
            .with_atom(-0.25, AtomOperator::Pointwise { scale: 0.5, shape: XiShape::SinPi });
        let model = Model::new(sp.clone(), measure, NemytskiiDrift::zero(), NemytskiiDiffusion::zero()).unwrap();
        let y0 = initial(&sp);
        let config = SolverConfig::new(32, 2.0);
        let plan = NoisePlan::new(6, config.dt(), 1).unwrap();
        let heads = model.semigroup().delay_heads(2.0, &y0).unwrap();
        let lifted = em_lifted(&config, &model, &y0, &plan, 0).unwrap();
        let direct = em_direct(&config, &model, &y0.head, &y0.tail, &plan, 0).unwrap();
        for k in 0..heads.len() {
            assert_eq!(lifted.value(k), &heads[k]);
            for (a, b) in direct.value(k).coeffs().iter().zip(heads[k].coeffs()) {
                assert!((a - b).abs() < 1e-12, "k={k}: {a} {b}");
            }
        }
    }

    #[test]
    fn scalar_delay_gives_one_minus_t() {
        let fs = FieldSpace::new(1, 2.0).unwrap();
        let sp = LiftedSpace::new(fs, 32, 2.0).unwrap();
        let heat = HeatSemigroup::from_eigenvalues(vec![0.0]);
        let measure = DelayMeasure::zero().with_atom(-1.0, AtomOperator::Scalar(-1.0));
        let model = Model::with_heat(sp.clone(), heat, measure, NemytskiiDrift::zero(), NemytskiiDiffusion::zero()).unwrap();
        let one = SpectralField::from_coeffs(vec![1.0]);
        let f0 = Segment::constant(32, &one);
        let config = SolverConfig::new(32, 1.0);
        let plan = NoisePlan::new(1, config.dt(), 1).unwrap();
        let x = em_direct(&config, &model, &one, &f0, &plan, 0).unwrap();
        for k in 0..=32 {
            let t = k as f64 / 32.0;
            assert!((x.value(k).coeffs()[0] - (1.0 - t)).abs() < 1e-14);
        }
    }

    #[test]
    fn lifted_tails_are_windows_of_the_head_path() {
        let sp = space(6, 16);
        let model = nonlinear_model(6, 16);
        let y0 = initial(&sp);
        let config = SolverConfig::new(16, 2.5);
        let plan = NoisePlan::new(6, config.dt(), 3).unwrap();
        let mut states = Vec::new();
        let path = em_lifted_observed(&config, &model, &y0, &plan, 5, |_, y| states.push(y.clone())).unwrap();
        for (k, y) in states.iter().enumerate() {
            let window = segment_at(&path, k as f64 / 16.0).unwrap();
            assert_eq!(y.tail.values(), window.values(), "k={k}");
            assert_eq!(&y.head, path.value(k));
        }
    }

    #[test]
    fn direct_and_lifted_agree_with_shared_noise() {
        for theta_power in [false, true] {
            let sp = space(8, 16);
            let mut model = nonlinear_model(8, 16);
            if theta_power {
                // a non-exponential profile exercises the direct window sums
                let mut k = Kernel::exp(-1.5, 0.5);
                k.power = 1;
                k.xi = XiShape::SinPi;
                let drift = NemytskiiDrift { k1: k, ..*model.drift() };
                let measure = DelayMeasure::density(k).with_atom(0.0, AtomOperator::Diagonal(vec![0.1; 8]));
                model = Model::new(sp.clone(), measure, drift, *model.diffusion()).unwrap();
            }
            let y0 = initial(&sp);
            let config = SolverConfig::new(16, 2.0);
            let plan = NoisePlan::new(8, config.dt(), 17).unwrap();
            for id in 0..3 {
                let a = em_lifted(&config, &model, &y0, &plan, id).unwrap();
                let b = em_direct(&config, &model, &y0.head, &y0.tail, &plan, id).unwrap();
                for k in 0..=32 {
                    let d = a.value(k).sub(b.value(k)).l2_norm();
                    assert!(d < 1e-12 * (1.0 + a.value(k).l2_norm()), "k={k} d={d}");
                }
            }
        }
    }

    #[test]
    fn ornstein_uhlenbeck_stationary_variance() {
        let c = 0.8;
        let m = 1024;
        let fs = FieldSpace::new(1, 2.0).unwrap();
        let sp = LiftedSpace::new(fs, m, 2.0).unwrap();
        let model = Model::new(sp.clone(), DelayMeasure::zero(), NemytskiiDrift::zero(), NemytskiiDiffusion::additive(c)).unwrap();
        let mut config = SolverConfig::new(m, 0.5);
        config.n_paths = 10_000;
        let plan = NoisePlan::new(1, config.dt(), 2718).unwrap();
        let y0 = sp.zero_state();
        let ens = run_ensemble(SolverKind::EmLifted, &config, &model, &y0, &plan, "ou").unwrap();
        let kk = ens.n_steps();
        let xs: Vec<f64> = ens.paths().iter().map(|p| p.value(kk).coeffs()[0]).collect();
        let nf = xs.len() as f64;
        let var = compensated_sum(xs.iter().map(|x| x * x)) / nf;
        let m4 = compensated_sum(xs.iter().map(|x| x.powi(4))) / nf;
        let se = ((m4 - var * var) / nf).sqrt();
        let pi2 = std::f64::consts::PI.powi(2);
        let target = c * c / (2.0 * pi2);
        assert!((var - target).abs() < 3.0 * se, "var {var} target {target} se {se}");
    }

    #[test]
    fn picard_converges_in_one_iteration_for_additive_noise() {
        let sp = space(6, 16);
        let model = Model::new(
            sp.clone(),
            DelayMeasure::density(Kernel::exp(1.0, 1.0)),
            NemytskiiDrift::zero(),
            NemytskiiDiffusion::additive(0.5),
        )
        .unwrap();
        let y0 = initial(&sp);
        let config = SolverConfig::new(16, 1.0);
        let plan = NoisePlan::new(6, config.dt(), 4).unwrap();
        let (path, report) = picard_solve(&config, &model, &y0, &plan, 2).unwrap();
        assert_eq!(report.iterations, 1);
        let lifted = em_lifted(&config, &model, &y0, &plan, 2).unwrap();
        assert_eq!(path.values(), lifted.values());
    }

    #[test]
    fn picard_fixed_point_is_the_lifted_scheme() {
        let sp = space(8, 16);
        let model = nonlinear_model(8, 16);
        let y0 = initial(&sp);
        let mut config = SolverConfig::new(16, 1.0);
        config.beta = 8.0;
        // the stopping rule is weighted, so the unweighted error carries e^{βT}
        config.picard_tol = 1e-13;
        let plan = NoisePlan::new(8, config.dt(), 9).unwrap();
        let (path, report) = picard_solve(&config, &model, &y0, &plan, 1).unwrap();
        assert!(report.converged, "{report:?}");
        assert!(report.iterations <= 17);
        assert!(report.quotients().iter().all(|q| *q < 1.0), "{report:?}");
        let lifted = em_lifted(&config, &model, &y0, &plan, 1).unwrap();
        for k in 0..=16 {
            let d = path.value(k).sub(lifted.value(k)).l2_norm();
            assert!(d < 1e-9, "k={k} d={d} {report:?}");
        }
    }

    #[test]
    fn picard_reports_non_convergence() {
        let sp = space(4, 16);
        let model = nonlinear_model(4, 16);
        let mut config = SolverConfig::new(16, 1.0);
        config.n_picard_max = 2;
        let plan = NoisePlan::new(4, config.dt(), 9).unwrap();
        let (_, report) = picard_solve(&config, &model, &initial(&sp), &plan, 0).unwrap();
        assert!(!report.converged);
        assert_eq!(report.records.len(), 2);
        assert!(report.records[1].quotient.is_some());
    }

    #[test]
    fn non_finite_state_aborts_the_path() {
        let sp = space(4, 8);
        let drift = NemytskiiDrift {
            f1: ScalarMap::new(0.0, 1e300, BaseMap::Id),
            ..NemytskiiDrift::zero()
        };
        let model = Model::new(sp.clone(), DelayMeasure::zero(), drift, NemytskiiDiffusion::zero()).unwrap();
        let mut y0 = sp.zero_state();
        y0.head = sp.field().project(|_| 1e10);
        let config = SolverConfig::new(8, 1.0);
        let plan = NoisePlan::new(4, config.dt(), 1).unwrap();
        let err = em_lifted(&config, &model, &y0, &plan, 42).unwrap_err();
        assert!(matches!(err, Error::NonFinite { path_id: 42, .. }), "{err}");
        let err = em_direct(&config, &model, &y0.head, &y0.tail, &plan, 42).unwrap_err();
        assert!(matches!(err, Error::NonFinite { path_id: 42, .. }));
    }

    #[test]
    fn contraction_constant_examples() {
        let zero = growth_fn(|_| 0.0);
        let one = growth_fn(|_| 1.0);
        let mut config = SolverConfig::new(64, 1.0);
        for beta in [0.0, 1.0, 7.0] {
            config.beta = beta;
            assert_eq!(contraction_constants(&config, &zero, &zero).k_beta, 0.0);
            let c = contraction_constants(&config, &one, &zero);
            let closed = if beta == 0.0 { 2.0 } else { 2.0 * (1.0 - (-beta).exp()) / beta };
            assert!((c.c_beta_a - closed).abs() < 1e-12, "β={beta}: {} vs {closed}", c.c_beta_a);
        }
        // doubling b̃ doubles C_{β,b}
        let b = growth_fn(|t: f64| 0.4 * t.powf(-0.3));
        let b2 = growth_fn(|t: f64| 0.8 * t.powf(-0.3));
        config.beta = 3.0;
        let c1 = contraction_constants(&config, &one, &b).c_beta_b;
        let c2 = contraction_constants(&config, &one, &b2).c_beta_b;
        assert!((c2 - 2.0 * c1).abs() < 1e-12 * c2);
        // K_β decreases to 0 along β = 2^j
        let mut prev = f64::INFINITY;
        for j in 0..64 {
            config.beta = 2f64.powi(j);
            let k = contraction_constants(&config, &one, &b).k_beta;
            assert!(k < prev);
            prev = k;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn beta_search() {
        let zero = growth_fn(|_| 0.0);
        let config = SolverConfig::new(64, 1.0);
        assert_eq!(find_contraction_beta(&config, &zero, &zero, 1.0).unwrap(), 0.0);
        let a = growth_fn(|_| 2.0);
        let b = growth_fn(|t: f64| 0.5 * t.powf(-0.25));
        let beta = find_contraction_beta(&config, &a, &b, 1.0).unwrap();
        let at = |beta| contraction_constants_at(beta, 1.0, 2.0, &a, &b).k_beta;
        assert!(at(beta) < 0.5);
        assert!(beta > 0.0 && at(beta / 2.0) >= 0.5);
        assert!(find_contraction_beta(&config, &a, &b, 0.0).is_err());
    }

    #[test]
    fn c_eq_estimate_is_order_one() {
        let fs = FieldSpace::new(8, 2.0).unwrap();
        let heat = HeatSemigroup::new(8);
        let plan = NoisePlan::new(8, 1.0 / 64.0, 5).unwrap();
        let c = estimate_c_eq(&fs, &heat, &plan, 1.0, 2.0, 2000).unwrap();
        assert!(c > 0.5 && c < 5.0, "{c}");
    }

    #[test]
    fn ensembles_are_ordered_and_reproducible() {
        let sp = space(4, 8);
        let model = nonlinear_model(4, 8);
        let mut config = SolverConfig::new(8, 1.0);
        config.n_paths = 12;
        let plan = NoisePlan::new(4, config.dt(), 77).unwrap();
        let y0 = initial(&sp);
        let e = run_ensemble(SolverKind::EmDirect, &config, &model, &y0, &plan, "h").unwrap();
        let single = em_direct(&config, &model, &y0.head, &y0.tail, &plan, 7).unwrap();
        assert_eq!(e.paths()[7], single);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let e1 = pool.install(|| run_ensemble(SolverKind::EmDirect, &config, &model, &y0, &plan, "h").unwrap());
        assert_eq!(e.paths(), e1.paths());
        assert_eq!(e.provenance.solver.as_str(), "em_direct");
        let y = e.state(3, 8).unwrap();
        assert_eq!(y.tail, segment_at(&e.paths()[3], 1.0).unwrap());
    }
}
