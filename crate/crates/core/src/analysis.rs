//! Executable checks on solutions and operators: weak and generalised-strong residuals,
//! Hilbert–Schmidt norms of the heat semigroup, ultracontractivity, the regularity
//! integral, refinement studies and moment/Lipschitz ladders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::delay_operators::{random_state, ultracontractivity_constant, ultracontractivity_exponent, GrowthFn};
use crate::error::{invalid, Error, Result};
use crate::field::{FieldSpace, SpectralField};
use crate::noise::{apply_noise_into, NoisePlan, NoiseScratch};
use crate::numerics::{compensated_sum, conjugate, integrate_cutoff, integrate_singular, theta_tail_sum, NeumaierSum};
use crate::segments::{LiftedSpace, LiftedState, Path, Segment};
use crate::semigroup::{DelaySemigroup, HeatSemigroup};
use crate::solvers::{em_lifted_observed, picard_solve, solve_path, Model, PathEnsemble, SolverConfig, SolverKind};

const PI: f64 = std::f64::consts::PI;

/// One row of a verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub check: String,
    pub parameters: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

impl CheckRow {
    pub fn new(check: &str, parameters: impl Into<String>, value: f64, bound: f64, pass: bool) -> Self {
        Self {
            check: check.to_string(),
            parameters: parameters.into(),
            value,
            bound,
            pass,
        }
    }

    /// Passes iff value ≤ bound.
    pub fn at_most(check: &str, parameters: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(check, parameters, value, bound, value <= bound)
    }
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = compensated_sum(xs.iter().copied()) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = compensated_sum(xs.iter().map(|x| (x - mean).powi(2))) / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ---------------------------------------------------------------------------
// residuals

/// Absolute slack added to the 3σ band; it only matters for deterministic ensembles,
/// whose residuals are pure round-off.
pub const RESIDUAL_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    /// Eigenindex n of the test functional eₙ.
    pub n_eig: usize,
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub pass: bool,
}

impl ResidualReport {
    fn from_samples(n_eig: usize, dt: f64, per_path: &[Vec<f64>]) -> Self {
        let kk = per_path.first().map_or(0, Vec::len);
        let mut times = Vec::with_capacity(kk);
        let mut mean = Vec::with_capacity(kk);
        let mut stderr = Vec::with_capacity(kk);
        let mut col = vec![0.0; per_path.len()];
        for k in 0..kk {
            for (c, r) in col.iter_mut().zip(per_path) {
                *c = r[k];
            }
            let (m, s) = mean_stderr(&col);
            times.push((k + 1) as f64 * dt);
            mean.push(m);
            stderr.push(s);
        }
        let pass = mean
            .iter()
            .zip(&stderr)
            .all(|(m, s)| m.abs() <= 3.0 * s + RESIDUAL_FLOOR);
        Self {
            n_eig,
            times,
            mean,
            stderr,
            pass,
        }
    }

    /// max_t |mean| / (3·stderr + floor); at most 1 iff the report passes.
    pub fn worst_ratio(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.stderr)
            .map(|(m, s)| m.abs() / (3.0 * s + RESIDUAL_FLOOR))
            .fold(0.0, f64::max)
    }

    pub fn max_abs_mean(&self) -> f64 {
        self.mean.iter().fold(0.0, |a, m| a.max(m.abs()))
    }
}

/// Per-step terms recomputed from a stored path: dt·φ, ψΔW and the running Φ∫X_s ds.
struct Replay {
    drift: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
    /// Φ(Σ_{k<K} dt·X_{t_k}) for K = 0..=n_steps.
    phi_integral: Vec<Vec<f64>>,
}

fn grid_images(fs: &FieldSpace, map: &crate::delay_operators::ScalarMap, nodes: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut grid = vec![0.0; fs.n_grid()];
    nodes
        .iter()
        .map(|c| {
            fs.synthesize_into(c, &mut grid);
            let mut img = vec![0.0; grid.len()];
            map.apply(&grid, &mut img);
            img
        })
        .collect()
}

fn replay(model: &Model, plan: &NoisePlan, path: &Path, path_id: u64) -> Result<Replay> {
    let space = model.space();
    let fs = model.field();
    let m = space.m();
    let n = fs.n_modes();
    let g = fs.n_grid();
    let kk = path.n_steps();
    let dt = path.dt();
    let drift = model.drift();
    let diffusion = model.diffusion();
    let k1 = drift.k1.sample(space);
    let k2 = diffusion.k2.sample(space);
    let measure = model.semigroup().measure();

    // every history node and path value, in time order, for the k ≥ 1 windows
    let ordered: Vec<&[f64]> = (-(m as isize)..=kk as isize).map(|i| path.at_index(i)).collect();
    let hist: Vec<&[f64]> = (0..=m).map(|j| path.history().node(j)).collect();
    let images = |map| (grid_images(fs, map, &ordered), grid_images(fs, map, &hist));
    let f2 = drift.has_history().then(|| images(&drift.f2));
    let g2 = diffusion.has_history().then(|| images(&diffusion.g2));

    let mut out = Replay {
        drift: Vec::with_capacity(kk),
        noise: Vec::with_capacity(kk),
        phi_integral: vec![vec![0.0; n]],
    };
    let mut xg = vec![0.0; g];
    let mut fgrid = vec![0.0; g];
    let mut mult = vec![0.0; g];
    let mut tmp = vec![0.0; g];
    let mut dw = vec![0.0; plan.n_noise_modes()];
    let mut scratch = NoiseScratch::new(fs);
    let mut running = Segment::zeros(m, n);
    for k in 0..kk {
        let x = path.value(k).coeffs();
        fs.synthesize_into(x, &mut xg);

        let window = |imgs: &(Vec<Vec<f64>>, Vec<Vec<f64>>), kernel: &crate::delay_operators::SampledKernel, out: &mut [f64]| {
            if k == 0 {
                kernel.integrate(imgs.1.as_slice(), out);
            } else {
                kernel.integrate(&imgs.0[k..=k + m], out);
            }
        };

        let mut d = vec![0.0; n];
        if !drift.is_zero() {
            drift.f1.apply(&xg, &mut fgrid);
            if let Some(imgs) = &f2 {
                window(imgs, &k1, &mut tmp);
                fgrid.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            }
            fs.analyze_into(&fgrid, &mut d);
            d.iter_mut().for_each(|v| *v *= dt);
        }
        out.drift.push(d);

        let mut w = vec![0.0; n];
        if !diffusion.is_zero() {
            diffusion.g1.apply(&xg, &mut mult);
            if let Some(imgs) = &g2 {
                window(imgs, &k2, &mut tmp);
                mult.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            }
            plan.increments_into(path_id, k, &mut dw);
            apply_noise_into(fs, &mult, &dw, &mut scratch, &mut w)?;
        }
        out.noise.push(w);

        for j in 0..=m {
            let src = path.window_node(k, j);
            for (o, v) in running.node_mut(j).iter_mut().zip(src) {
                *o += dt * v;
            }
        }
        let mut phi = vec![0.0; n];
        measure.apply(fs, &running, &mut phi);
        out.phi_integral.push(phi);
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Pairing {
    Weak,
    Strong,
}

fn check_residual_inputs(ensemble: &PathEnsemble, model: &Model, plan: &NoisePlan, n_eig: usize) -> Result<()> {
    let n = model.field().n_modes();
    if n_eig == 0 || n_eig > n {
        return Err(invalid("n_eig", format!("need 1 ≤ n_eig ≤ {n}, got {n_eig}")));
    }
    if ensemble.n_paths() == 0 {
        return Err(invalid("ensemble", "no paths"));
    }
    if ensemble.provenance.seed != plan.seed() || (ensemble.dt - plan.dt()).abs() > 1e-12 * plan.dt() {
        return Err(Error::GridMismatch("noise plan does not match the ensemble".into()));
    }
    if (ensemble.dt - model.space().dt()).abs() > 1e-12 * ensemble.dt {
        return Err(Error::GridMismatch("ensemble dt differs from the model grid".into()));
    }
    Ok(())
}

/// The scheme holds X on (t_k, t_{k+1}] at e^{B(s-t_k)}(X_k + a_k), a_k the injected
/// increment; ∫X ds is taken exactly along that interpolant.
fn path_residual(model: &Model, plan: &NoisePlan, path: &Path, path_id: u64, n_eig: usize, pairing: Pairing) -> Result<Vec<f64>> {
    let rep = replay(model, plan, path, path_id)?;
    let dt = path.dt();
    let lambdas = model.heat().eigenvalues();
    let i = n_eig - 1;
    let kk = path.n_steps();
    let x0 = path.value(0).coeffs();
    let mut out = Vec::with_capacity(kk);
    match pairing {
        Pairing::Weak => {
            let l = lambdas[i];
            let jump = (l * dt).exp_m1();
            let mut b_int = NeumaierSum::default();
            let mut drift = NeumaierSum::default();
            let mut noise = NeumaierSum::default();
            for k in 0..kk {
                let a = rep.phi_integral[k + 1][i] - rep.phi_integral[k][i] + rep.drift[k][i] + rep.noise[k][i];
                b_int.add(jump * (path.value(k).coeffs()[i] + a));
                drift.add(rep.drift[k][i]);
                noise.add(rep.noise[k][i]);
                let r = (path.value(k + 1).coeffs()[i] - x0[i])
                    - rep.phi_integral[k + 1][i]
                    - b_int.value()
                    - drift.value()
                    - noise.value();
                out.push(r);
            }
        }
        Pairing::Strong => {
            let n = lambdas.len();
            let weight: Vec<f64> = lambdas
                .iter()
                .map(|&l| if l == 0.0 { dt } else { (l * dt).exp_m1() / l })
                .collect();
            let mut time_integral = vec![NeumaierSum::default(); n];
            let mut drift = vec![NeumaierSum::default(); n];
            let mut noise = vec![NeumaierSum::default(); n];
            let mut resid = vec![0.0; n];
            for k in 0..kk {
                let x = path.value(k).coeffs();
                for c in 0..n {
                    let a = rep.phi_integral[k + 1][c] - rep.phi_integral[k][c] + rep.drift[k][c] + rep.noise[k][c];
                    time_integral[c].add(weight[c] * (x[c] + a));
                    drift[c].add(rep.drift[k][c]);
                    noise[c].add(rep.noise[k][c]);
                }
                let xk = path.value(k + 1).coeffs();
                for c in 0..n {
                    let b_applied = lambdas[c] * time_integral[c].value();
                    resid[c] = (xk[c] - x0[c]) - rep.phi_integral[k + 1][c] - b_applied - drift[c].value() - noise[c].value();
                }
                out.push(resid[i]);
            }
        }
    }
    Ok(out)
}

fn residual(ensemble: &PathEnsemble, model: &Model, plan: &NoisePlan, n_eig: usize, pairing: Pairing) -> Result<ResidualReport> {
    check_residual_inputs(ensemble, model, plan, n_eig)?;
    let per_path: Vec<Vec<f64>> = ensemble
        .paths()
        .par_iter()
        .enumerate()
        .map(|(id, p)| path_residual(model, plan, p, id as u64, n_eig, pairing))
        .collect::<Result<_>>()?;
    Ok(ResidualReport::from_samples(n_eig, ensemble.dt, &per_path))
}

/// R(t) = ⟨X(t)-x₀,eₙ⟩ - ⟨Φ∫X_s ds,eₙ⟩ - λₙ∫⟨X,eₙ⟩ds - ∫⟨φ,eₙ⟩ds - Σ⟨ψΔW_k,eₙ⟩ over the ensemble.
/// Path i is assumed to use noise stream i of `plan`.
pub fn weak_residual(ensemble: &PathEnsemble, model: &Model, plan: &NoisePlan, n_eig: usize) -> Result<ResidualReport> {
    residual(ensemble, model, plan, n_eig, Pairing::Weak)
}

/// As [`weak_residual`] but forming X(t)-x₀-Φ∫X_s-B∫X-… as a field and pairing it with eₙ.
pub fn generalized_strong_residual(
    ensemble: &PathEnsemble,
    model: &Model,
    plan: &NoisePlan,
    n_eig: usize,
) -> Result<ResidualReport> {
    residual(ensemble, model, plan, n_eig, Pairing::Strong)
}

// ---------------------------------------------------------------------------
// Hilbert–Schmidt norms of the heat semigroup

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsNorm {
    /// (Σ_{n≤N} e^{-2tπ²n²})^{1/2}
    pub value: f64,
    pub partial_sum: f64,
    /// Upper bound on Σ_{n>N} e^{-2tπ²n²}.
    pub tail_bound: f64,
}

pub fn hs_norm_heat(t: f64, n_terms: usize) -> Result<HsNorm> {
    if !(t > 0.0) {
        return Err(invalid("t", format!("must be positive, got {t}")));
    }
    if n_terms == 0 {
        return Err(invalid("n_terms", "need at least one term"));
    }
    let a = 2.0 * PI * PI * t;
    let partial_sum = compensated_sum((1..=n_terms).map(|n| (-a * (n * n) as f64).exp()));
    let n1 = (n_terms + 1) as f64;
    // (N+1+j)² ≥ (N+1)² + j(2N+3)
    let tail_bound = (-a * n1 * n1).exp() / -(-a * (2.0 * n_terms as f64 + 3.0)).exp_m1();
    Ok(HsNorm {
        value: partial_sum.sqrt(),
        partial_sum,
        tail_bound,
    })
}

/// ‖S(s)‖²_HS summed over all modes.
pub fn hs_norm_squared(s: f64) -> f64 {
    theta_tail_sum(2.0 * PI * PI * s)
}

/// ∫_0^t ‖S(s)‖²_HS ds by graded quadrature.
pub fn hs_square_integral(t: f64) -> f64 {
    integrate_singular(hs_norm_squared, t)
}

/// Σ_n (1-e^{-2π²n²t})/(2π²n²), with the Σ_{n>N} 1/n² tail from Euler–Maclaurin.
pub fn hs_square_integral_series(t: f64) -> f64 {
    let n_terms = 10_000usize;
    let two_pi2 = 2.0 * PI * PI;
    let head = compensated_sum((1..=n_terms).rev().map(|n| {
        let n2 = (n * n) as f64;
        -(-two_pi2 * n2 * t).exp_m1() / (two_pi2 * n2)
    }));
    let nf = n_terms as f64;
    let zeta_tail = 1.0 / nf - 0.5 / (nf * nf) + 1.0 / (6.0 * nf.powi(3)) - 1.0 / (30.0 * nf.powi(5));
    head + zeta_tail / two_pi2
}

/// Values of ∫_ε^T f along ε_j = T·16^{-j}.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementTrend {
    pub cutoffs: Vec<f64>,
    pub values: Vec<f64>,
    /// Relative growth between the last two levels.
    pub last_increase: f64,
    pub finite: bool,
}

pub const REFINEMENT_LEVELS: usize = 48;
/// Growth above this between consecutive levels marks divergence.
pub const DIVERGENCE_GROWTH: f64 = 0.1;

pub fn refinement_trend(f: impl Fn(f64) -> f64, t: f64) -> RefinementTrend {
    let mut cutoffs = Vec::with_capacity(REFINEMENT_LEVELS);
    let mut values = Vec::with_capacity(REFINEMENT_LEVELS);
    let mut acc = NeumaierSum::default();
    let mut hi = t;
    for j in 1..=REFINEMENT_LEVELS {
        let lo = t * 16f64.powi(-(j as i32));
        acc.add(integrate_cutoff(&f, lo, hi));
        cutoffs.push(lo);
        values.push(acc.value());
        hi = lo;
    }
    let n = values.len();
    let last_increase = (values[n - 1] - values[n - 2]) / values[n - 2].abs().max(f64::MIN_POSITIVE);
    let all_finite = values.iter().all(|v| v.is_finite());
    let last_increase = if all_finite { last_increase } else { f64::INFINITY };
    RefinementTrend {
        cutoffs,
        values,
        last_increase,
        finite: all_finite && last_increase <= DIVERGENCE_GROWTH,
    }
}

impl RefinementTrend {
    pub fn value(&self) -> f64 {
        *self.values.last().expect("levels")
    }
}

/// ∫_0^T ‖S(s)‖_HS^{p∨2} ds with a finite/divergent verdict.
pub fn hs_integrability_check(p: f64, t: f64) -> Result<RefinementTrend> {
    if !(p >= 1.0) || !(t > 0.0) {
        return Err(invalid("p", format!("need p ≥ 1 and T > 0, got p = {p}, T = {t}")));
    }
    let e = p.max(2.0) / 2.0;
    Ok(refinement_trend(|s| hs_norm_squared(s).powf(e), t))
}

/// ∫_0^T (a(s)s^{-α} + b(s)^{2∨p}s^{-(2∨p)α}) ds with a finite/divergent verdict.
pub fn regularity_condition_check(a: &GrowthFn, b: &GrowthFn, alpha: f64, p: f64, q: f64, t: f64) -> Result<RefinementTrend> {
    let lo = 1.0 / q.max(p);
    if !(alpha > lo && alpha < 0.5) {
        return Err(invalid(
            "alpha",
            format!("need 1/(q∨p) < α < 1/2, i.e. {lo} < α < 0.5, got {alpha}"),
        ));
    }
    if !(t > 0.0) {
        return Err(invalid("T", "must be positive"));
    }
    let e = p.max(2.0);
    Ok(refinement_trend(
        |s| {
            let bs = b(s);
            let bt = if bs == 0.0 { 0.0 } else { bs.abs().powf(e) * s.powf(-e * alpha) };
            a(s) * s.powf(-alpha) + bt
        },
        t,
    ))
}

// ---------------------------------------------------------------------------
// ultracontractivity

/// Constant from Hölder's inequality against the Gaussian majorant of the heat kernel:
/// ‖(4πt)^{-1/2}e^{-|·|²/4t}‖_{L^{q'}} = (q')^{-1/(2q')}(4π)^{1/(2q')-1/2}t^{1/(2q')-1/2}.
pub fn sharp_ultracontractivity_constant(q: f64) -> f64 {
    let qd = conjugate(q);
    let four_pi = 4.0 * PI;
    if qd.is_infinite() {
        return four_pi.powf(-0.5);
    }
    qd.powf(-0.5 / qd) * four_pi.powf(0.5 / qd - 0.5)
}

/// max over the grid of |S(t)x| divided by ‖x‖_{L^q}.
pub fn sup_to_lq_ratio(space: &FieldSpace, heat: &HeatSemigroup, x: &SpectralField, q: f64, t: f64) -> f64 {
    let mut c = x.coeffs().to_vec();
    heat.apply_in_place(t, &mut c);
    let smoothed = space.synthesize(&SpectralField::from_coeffs(c));
    let sup = smoothed.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    sup / space.lr_norm_values(&space.synthesize(x), q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UltraReport {
    pub q: f64,
    pub t: f64,
    /// C_q t^{1/(2q')-1/2}
    pub bound: f64,
    /// Largest (sup|S(t)x| / ‖x‖_q) / bound over the probes.
    pub max_ratio: f64,
    pub pass: bool,
}

pub const ULTRA_MARGIN: f64 = 1.001;

/// Which constant multiplies t^{1/(2q')-1/2}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UltraConstant {
    /// (q')^{-1/q'}(4π)^{1/(2q')-1/2}
    Stated,
    /// (q')^{-1/(2q')}(4π)^{1/(2q')-1/2}, the Gaussian Hölder constant.
    Gaussian,
}

impl UltraConstant {
    pub fn value(self, q: f64) -> f64 {
        match self {
            Self::Stated => ultracontractivity_constant(q),
            Self::Gaussian => sharp_ultracontractivity_constant(q),
        }
    }
}

/// Random probes with coefficients U(-1,1)/k against C_q t^{1/(2q')-1/2}.
pub fn ultracontractivity_check(
    space: &FieldSpace,
    q: f64,
    t: f64,
    n_probes: usize,
    seed: u64,
    constant: UltraConstant,
) -> Result<UltraReport> {
    if !(q >= 1.0) || !(t > 0.0) {
        return Err(invalid("q", format!("need q ≥ 1 and t > 0, got q = {q}, t = {t}")));
    }
    let bound = constant.value(q) * t.powf(ultracontractivity_exponent(q));
    let heat = HeatSemigroup::new(space.n_modes());
    let n = space.n_modes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes: Vec<SpectralField> = (0..n_probes)
        .map(|_| SpectralField::from_coeffs((1..=n).map(|k| rng.random_range(-1.0..1.0) / k as f64).collect()))
        .collect();
    let max_ratio = probes
        .par_iter()
        .map(|x| sup_to_lq_ratio(space, &heat, x, q, t) / bound)
        .reduce(|| 0.0, f64::max);
    Ok(UltraReport {
        q,
        t,
        bound,
        max_ratio,
        pass: max_ratio <= ULTRA_MARGIN,
    })
}

// ---------------------------------------------------------------------------
// coupled refinement

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub dt: f64,
    pub dt_fine: f64,
    /// E sup_k ‖X_dt(t_k) - X_{dt_fine}(t_k)‖ over the coarse grid.
    pub strong_error: f64,
    pub stderr: f64,
    /// Error at this level over the error at the next finer level.
    pub ratio: Option<f64>,
    pub order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of log error against log dt; NaN when every error is round-off.
    pub order: f64,
}

/// Coupled refinement over `ladder` (steps per unit time, each dividing the next).
/// `build(m)` returns the model and initial state on the grid dt = 1/m; the finest
/// level draws the noise and coarser levels sum its increments.
pub fn convergence_study(
    base: &SolverConfig,
    ladder: &[usize],
    build: impl Fn(usize) -> Result<(Model, LiftedState)>,
    n_noise_modes: usize,
    seed: u64,
    kind: SolverKind,
) -> Result<ConvergenceTable> {
    if ladder.len() < 2 {
        return Err(invalid("dt", format!("ladder needs at least two levels, got {}", ladder.len())));
    }
    let mut ms = ladder.to_vec();
    ms.sort_unstable();
    ms.dedup();
    if ms.len() < 2 || ms[0] == 0 {
        return Err(invalid("dt", "ladder needs two distinct positive levels"));
    }
    for w in ms.windows(2) {
        if w[1] % w[0] != 0 {
            return Err(invalid("dt", format!("1/{} does not refine 1/{}", w[1], w[0])));
        }
    }
    let finest = *ms.last().expect("levels");
    let fine_plan = NoisePlan::new(n_noise_modes, 1.0 / finest as f64, seed)?;
    let mut levels = Vec::with_capacity(ms.len());
    for &m in &ms {
        let (model, state0) = build(m)?;
        let mut cfg = base.clone();
        cfg.m = m;
        let plan = fine_plan.coarsened(finest / m)?;
        levels.push((cfg, model, state0, plan));
    }
    let n_pairs = ms.len() - 1;
    let sups: Vec<Vec<f64>> = (0..base.n_paths as u64)
        .into_par_iter()
        .map(|id| -> Result<Vec<f64>> {
            let paths = levels
                .iter()
                .map(|(cfg, model, s0, plan)| solve_path(kind, cfg, model, s0, plan, id))
                .collect::<Result<Vec<_>>>()?;
            let fs = levels[0].1.field();
            Ok((0..n_pairs)
                .map(|i| {
                    let r = ms[i + 1] / ms[i];
                    let (c, f) = (&paths[i], &paths[i + 1]);
                    (0..=c.n_steps())
                        .map(|k| fs.norm(&c.value(k).sub(f.value(k * r))))
                        .fold(0.0, f64::max)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let col: Vec<f64> = sups.iter().map(|s| s[i]).collect();
        let (e, se) = mean_stderr(&col);
        rows.push(ConvergenceRow {
            dt: 1.0 / ms[i] as f64,
            dt_fine: 1.0 / ms[i + 1] as f64,
            strong_error: e,
            stderr: se,
            ratio: None,
            order: None,
        });
    }
    for i in 0..n_pairs.saturating_sub(1) {
        let ratio = rows[i].strong_error / rows[i + 1].strong_error;
        let refine = rows[i].dt / rows[i + 1].dt;
        rows[i].ratio = Some(ratio);
        rows[i].order = Some(ratio.ln() / refine.ln());
    }
    Ok(ConvergenceTable {
        order: least_squares_order(&rows),
        rows,
    })
}

fn least_squares_order(rows: &[ConvergenceRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.strong_error > 0.0)
        .map(|r| (r.dt.ln(), r.strong_error.ln()))
        .collect();
    let scale = rows.iter().fold(0.0f64, |a, r| a.max(r.strong_error));
    if pts.len() < 2 || scale < 1e-13 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

// ---------------------------------------------------------------------------
// moment and Lipschitz ladders

/// ‖[X(t_k), X_{t_k}]‖ for k = 0..=K from the head norms along the path.
pub fn lifted_norms(space: &LiftedSpace, path: &Path) -> Vec<f64> {
    lifted_norms_from(space, path, None)
}

/// ‖Y_a(t_k) - Y_b(t_k)‖ for two paths on the same grid.
pub fn lifted_diff_norms(space: &LiftedSpace, a: &Path, b: &Path) -> Vec<f64> {
    lifted_norms_from(space, a, Some(b))
}

fn lifted_norms_from(space: &LiftedSpace, a: &Path, b: Option<&Path>) -> Vec<f64> {
    let fs = space.field();
    let m = space.m();
    let kk = a.n_steps();
    let norm_of = |x: &[f64], y: Option<&[f64]>| match y {
        None => fs.norm(&SpectralField::from_coeffs(x.to_vec())),
        Some(y) => fs.norm(&SpectralField::from_coeffs(x.iter().zip(y).map(|(u, v)| u - v).collect())),
    };
    let hist: Vec<f64> = (0..=m)
        .map(|j| norm_of(a.history().node(j), b.map(|p| p.history().node(j))))
        .collect();
    let ordered: Vec<f64> = (-(m as isize)..=kk as isize)
        .map(|i| norm_of(a.at_index(i), b.map(|p| p.at_index(i))))
        .collect();
    (0..=kk)
        .map(|k| {
            let tail = if k == 0 {
                space.lp_from_node_norms(&hist)
            } else {
                space.lp_from_node_norms(&ordered[k..=k + m])
            };
            space.combine(ordered[k + m], tail)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentLadder {
    pub scales: Vec<f64>,
    /// ‖Y₀‖^q at each scale.
    pub initial: Vec<f64>,
    /// sup_k E‖Y(t_k)‖^q at each scale.
    pub moments: Vec<f64>,
    /// moments / (1 + initial)
    pub ratios: Vec<f64>,
    /// The ratio has levelled off: max over the upper half of the scales is at most
    /// 1.1 × the ratio at the first scale of that half.
    pub affine: bool,
}

pub const MOMENT_GROWTH_SLACK: f64 = 1.1;

/// E‖Y(t)‖^q for initial data s·Y₀ over the given scales, all sharing noise.
pub fn moment_ladder(
    config: &SolverConfig,
    model: &Model,
    state0: &LiftedState,
    plan: &NoisePlan,
    scales: &[f64],
    kind: SolverKind,
) -> Result<MomentLadder> {
    if scales.len() < 2 {
        return Err(invalid("scales", "need at least two scales"));
    }
    let space = model.space();
    let q = config.q;
    let mut initial = Vec::with_capacity(scales.len());
    let mut moments = Vec::with_capacity(scales.len());
    for &s in scales {
        let y0 = state0.scaled(s);
        initial.push(space.norm(&y0)?.powf(q));
        let per_path: Vec<Vec<f64>> = (0..config.n_paths as u64)
            .into_par_iter()
            .map(|id| {
                let p = solve_path(kind, config, model, &y0, plan, id)?;
                Ok(lifted_norms(space, &p).into_iter().map(|v| v.powf(q)).collect())
            })
            .collect::<Result<_>>()?;
        let kk = per_path[0].len();
        let sup = (0..kk)
            .map(|k| compensated_sum(per_path.iter().map(|r| r[k])) / per_path.len() as f64)
            .fold(0.0, f64::max);
        moments.push(sup);
    }
    let ratios: Vec<f64> = moments.iter().zip(&initial).map(|(m, i)| m / (1.0 + i)).collect();
    let half = ratios.len() / 2;
    let pivot = ratios[half];
    let upper = ratios[half..].iter().cloned().fold(0.0, f64::max);
    Ok(MomentLadder {
        scales: scales.to_vec(),
        initial,
        moments,
        affine: upper <= MOMENT_GROWTH_SLACK * pivot,
        ratios,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzLadder {
    pub eps: Vec<f64>,
    /// sup_k E‖Y^ε(t_k) - Y(t_k)‖^q / ‖εD‖^q
    pub ratios: Vec<f64>,
    /// (max - min)/min over the ladder.
    pub variation: f64,
    pub stable: bool,
}

pub const LIPSCHITZ_VARIATION: f64 = 0.5;

/// Initial-data Lipschitz quotients for perturbations ε_j D, ε_j = eps0·2^{-j}, j = 0..=halvings,
/// each perturbed path sharing noise with the unperturbed one.
#[allow(clippy::too_many_arguments)]
pub fn lipschitz_ladder(
    config: &SolverConfig,
    model: &Model,
    state0: &LiftedState,
    direction: &LiftedState,
    plan: &NoisePlan,
    eps0: f64,
    halvings: usize,
    kind: SolverKind,
) -> Result<LipschitzLadder> {
    let space = model.space();
    let q = config.q;
    let dnorm = space.norm(direction)?;
    if !(dnorm > 0.0) || !(eps0 > 0.0) {
        return Err(invalid("direction", "need a nonzero perturbation"));
    }
    let eps: Vec<f64> = (0..=halvings).map(|j| eps0 * 0.5f64.powi(j as i32)).collect();
    let starts: Vec<LiftedState> = eps.iter().map(|&e| state0.add(&direction.scaled(e))).collect();
    let per_path: Vec<Vec<Vec<f64>>> = (0..config.n_paths as u64)
        .into_par_iter()
        .map(|id| -> Result<Vec<Vec<f64>>> {
            let base = solve_path(kind, config, model, state0, plan, id)?;
            starts
                .iter()
                .map(|y| {
                    let p = solve_path(kind, config, model, y, plan, id)?;
                    Ok(lifted_diff_norms(space, &p, &base).into_iter().map(|v| v.powf(q)).collect())
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = per_path.len() as f64;
    let ratios: Vec<f64> = eps
        .iter()
        .enumerate()
        .map(|(j, &e)| {
            let kk = per_path[0][j].len();
            let sup = (0..kk)
                .map(|k| compensated_sum(per_path.iter().map(|r| r[j][k])) / n)
                .fold(0.0, f64::max);
            sup / (e * dnorm).powf(q)
        })
        .collect();
    let max = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let variation = (max - min) / min;
    Ok(LipschitzLadder {
        eps,
        ratios,
        variation,
        stable: variation <= LIPSCHITZ_VARIATION,
    })
}

// ---------------------------------------------------------------------------
// structural checks on the semigroups and the lift

/// S(s)S(t)x = S(s+t)x on random (s, t, x); value is the worst relative coefficient error.
pub fn check_heat_semigroup_law(n_modes: usize, n_triples: usize, seed: u64) -> CheckRow {
    let heat = HeatSemigroup::new(n_modes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_triples {
        let s: f64 = rng.random_range(0.0..1.0);
        let t: f64 = rng.random_range(0.0..1.0);
        let mut a: Vec<f64> = (0..n_modes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut b = a.clone();
        heat.apply_in_place(t, &mut a);
        heat.apply_in_place(s, &mut a);
        heat.apply_in_place(s + t, &mut b);
        for (u, v) in a.iter().zip(&b) {
            // coefficients below the normal range carry no relative precision
            if v.abs() >= f64::MIN_POSITIVE {
                worst = worst.max((u - v).abs() / v.abs());
            }
        }
    }
    CheckRow::at_most(
        "heat_semigroup_law",
        format!("modes={n_modes} triples={n_triples} seed={seed}"),
        worst,
        1e-13,
    )
}

/// Tail of 𝓣(t)Y at node θ equals the head of 𝓣(t+θ)Y (or f(t+θ) before time zero).
/// Returns the bitwise check (value: number of differing coefficients) and the
/// norm round-trip check (value: worst relative norm difference).
pub fn check_prop_t(sg: &DelaySemigroup, n_states: usize, t_max: f64, seed: u64) -> Result<Vec<CheckRow>> {
    let space = sg.space();
    let m = space.m();
    let fs = space.field();
    let k_max = crate::numerics::grid_index(t_max, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatched = 0usize;
    let mut worst_norm: f64 = 0.0;
    for _ in 0..n_states {
        let y = random_state(space, &mut rng);
        let k = rng.random_range(1..=k_max);
        let yt = sg.delay_apply(k as f64 / m as f64, &y)?;
        let heads = sg.delay_heads(k as f64 / m as f64, &y)?;
        for j in 0..=m {
            let idx = k as isize + j as isize - m as isize;
            let expect: &[f64] = if idx < 0 { y.tail.node((idx + m as isize) as usize) } else { heads[idx as usize].coeffs() };
            let got = yt.tail.node(j);
            mismatched += got.iter().zip(expect).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
            let na = fs.norm(&SpectralField::from_coeffs(got.to_vec()));
            let nb = fs.norm(&SpectralField::from_coeffs(expect.to_vec()));
            if nb > 0.0 {
                worst_norm = worst_norm.max((na - nb).abs() / nb);
            }
        }
    }
    let params = format!("states={n_states} t_max={t_max} dt=1/{m} seed={seed}");
    Ok(vec![
        CheckRow::at_most("prop_t_exact", params.clone(), mismatched as f64, 0.0),
        CheckRow::at_most("prop_t_norm", params, worst_norm, 1e-12),
    ])
}

/// Lifted tails produced by the solver equal the windows of its own head path.
pub fn check_pi2y(config: &SolverConfig, model: &Model, state0: &LiftedState, plan: &NoisePlan, n_paths: usize) -> Result<CheckRow> {
    let worst = (0..n_paths as u64)
        .into_par_iter()
        .map(|id| -> Result<usize> {
            let mut tails: Vec<Segment> = Vec::new();
            let path = em_lifted_observed(config, model, state0, plan, id, |_, y| tails.push(y.tail.clone()))?;
            let m = path.m();
            let mut bad = 0;
            for (k, tail) in tails.iter().enumerate() {
                for j in 0..=m {
                    bad += tail
                        .node(j)
                        .iter()
                        .zip(path.window_node(k, j))
                        .filter(|(a, b)| a.to_bits() != b.to_bits())
                        .count();
                }
            }
            Ok(bad)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(CheckRow::at_most(
        "pi2y_windows",
        format!("paths={n_paths} dt=1/{} seed={}", config.m, plan.seed()),
        worst as f64,
        0.0,
    ))
}

/// ‖𝓣(t)Y - MV_n(t)Y‖ for n = 1..=n_max; decreasing in n and below `tol` at n_max.
pub fn check_miyadera_voigt(sg: &DelaySemigroup, state: &LiftedState, t: f64, n_max: usize, tol: f64) -> Result<(Vec<f64>, CheckRow)> {
    let exact = sg.delay_apply(t, state)?;
    let scale = sg.space().norm(state)?.max(f64::MIN_POSITIVE);
    let errors = (1..=n_max)
        .map(|n| {
            let mv = sg.miyadera_voigt_apply(t, state, n)?;
            Ok(sg.space().norm(&mv.sub(&exact))? / scale)
        })
        .collect::<Result<Vec<f64>>>()?;
    let decreasing = errors.windows(2).all(|w| w[1] < w[0] || w[1] == 0.0);
    let last = *errors.last().ok_or_else(|| invalid("n_picard", "need n ≥ 1"))?;
    let row = CheckRow::new(
        "miyadera_voigt",
        format!("t={t} n_picard={n_max} variation={}", sg.total_variation()),
        last,
        tol,
        decreasing && last <= tol,
    );
    Ok((errors, row))
}

/// Picard quotients against the cap c_eq·K_β, and the fixed point against em_lifted on
/// the same noise. Rows: the fraction of paths whose largest quotient stays under the
/// cap (needs ≥ 95%), and the worst sup-norm distance to em_lifted (needs ≤ 5·dt).
pub fn check_contraction(
    config: &SolverConfig,
    model: &Model,
    state0: &LiftedState,
    plan: &NoisePlan,
    cap: f64,
) -> Result<Vec<CheckRow>> {
    let fs = model.field();
    let per_path = (0..config.n_paths as u64)
        .into_par_iter()
        .map(|id| -> Result<(bool, bool, f64)> {
            let (fixed, report) = picard_solve(config, model, state0, plan, id)?;
            let em = solve_path(SolverKind::EmLifted, config, model, state0, plan, id)?;
            let gap = (0..=fixed.n_steps())
                .map(|k| fs.norm(&fixed.value(k).sub(em.value(k))))
                .fold(0.0, f64::max);
            let under = report.max_quotient().is_none_or(|q| q <= cap);
            Ok((under, report.converged, gap))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_path.len().max(1) as f64;
    let frac = per_path.iter().filter(|r| r.0).count() as f64 / n;
    let converged = per_path.iter().filter(|r| r.1).count();
    let gap = per_path.iter().fold(0.0f64, |a, r| a.max(r.2));
    let params = format!(
        "beta={} cap={cap:.6} paths={} converged={converged} dt={}",
        config.beta,
        config.n_paths,
        config.dt()
    );
    Ok(vec![
        CheckRow::new("picard_quotient_under_cap", params.clone(), frac, 0.95, frac >= 0.95),
        CheckRow::at_most("picard_vs_em_lifted", params, gap, 5.0 * config.dt()),
    ])
}
