//! Named configurations: the bounded-delay reaction–diffusion equation, its variant
//! with point delays, and calibration cases. Scenario files are flat TOML.

use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::hs_norm_squared;
use crate::delay_operators::{
    check_exponents, check_q_admissible, growth_fn, q_window, AtomOperator, DelayMeasure,
    GrowthFn, GrowthFunctions, Kernel, NemytskiiDiffusion, NemytskiiDrift, ScalarMap,
};
use crate::error::{invalid, Error, Result};
use crate::field::{FieldSpace, QuadratureRule, SpectralField};
use crate::noise::NoisePlan;
use crate::numerics::conjugate;
use crate::segments::{LiftedSpace, LiftedState, Segment};
use crate::semigroup::HeatSemigroup;
use crate::solvers::{find_contraction_beta, Model, SolverConfig, SolverKind};

/// Which exponent condition is enforced at load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Admissibility {
    /// 2∨p < 4r/(2+r) and (p∨2)/2 < q_ultra < 2r/(2+r).
    Ultracontractive,
    /// p∨2 < 4, so that ∫‖S(s)‖_HS^{p∨2} ds < ∞.
    HilbertSchmidt,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub n_modes: usize,
    /// Defaults to `n_modes` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_modes: Option<usize>,
    /// dt = 1/steps_per_unit
    pub steps_per_unit: usize,
    pub horizon: f64,
    pub p: f64,
    pub r: f64,
    /// Moment exponent.
    pub q: f64,
    /// Exponent in the smoothing bound for the diffusion growth b(t).
    pub q_ultra: f64,
    pub admissibility: Admissibility,
    /// Density φ(θ,ξ), in kernel syntax (`exp`, `one`, `theta*sin_xi`, `zero`, …).
    pub density: String,
    pub atom_thetas: Vec<f64>,
    pub atom_scales: Vec<f64>,
    pub f1: String,
    pub f2: String,
    pub k1: String,
    pub g1: String,
    pub g2: String,
    pub k2: String,
    /// Initial head: `zero`, `sine`, `parabola`, `mode(n)`, optionally `c*name`.
    pub x0: String,
    /// Initial tail: `constant` (f ≡ x₀), `zero` or `decay` (θ ↦ e^θ x₀).
    pub f0: String,
    pub solver: String,
    pub paths: usize,
    pub seed: u64,
    /// Weight of the β-norm for Picard; searched for when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub picard_max: usize,
    pub picard_tol: f64,
}

/// Partial scenario: any subset of fields on top of `base`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    base: Option<String>,
    name: Option<String>,
    description: Option<String>,
    n_modes: Option<usize>,
    noise_modes: Option<usize>,
    steps_per_unit: Option<usize>,
    dt: Option<f64>,
    horizon: Option<f64>,
    p: Option<f64>,
    r: Option<f64>,
    q: Option<f64>,
    q_ultra: Option<f64>,
    admissibility: Option<Admissibility>,
    density: Option<String>,
    atom_thetas: Option<Vec<f64>>,
    atom_scales: Option<Vec<f64>>,
    f1: Option<String>,
    f2: Option<String>,
    k1: Option<String>,
    g1: Option<String>,
    g2: Option<String>,
    k2: Option<String>,
    x0: Option<String>,
    f0: Option<String>,
    solver: Option<String>,
    paths: Option<usize>,
    seed: Option<u64>,
    beta: Option<f64>,
    picard_max: Option<usize>,
    picard_tol: Option<f64>,
}

/// Command-line style overrides applied after loading.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub dt: Option<f64>,
    pub n_modes: Option<usize>,
    pub noise_modes: Option<usize>,
    pub beta: Option<f64>,
    pub p: Option<f64>,
    pub horizon: Option<f64>,
}

pub const REGISTRY: [&str; 6] = ["rd-bounded", "rd-points", "heat-only", "heat-delay", "additive", "ou-scalar"];

fn base(name: &str, description: &str) -> Scenario {
    Scenario {
        name: name.into(),
        description: description.into(),
        n_modes: 16,
        noise_modes: None,
        steps_per_unit: 64,
        horizon: 1.0,
        p: 2.0,
        r: 2.0,
        q: 2.0,
        q_ultra: 1.3,
        admissibility: Admissibility::None,
        density: "zero".into(),
        atom_thetas: vec![],
        atom_scales: vec![],
        f1: "zero".into(),
        f2: "zero".into(),
        k1: "zero".into(),
        g1: "zero".into(),
        g2: "zero".into(),
        k2: "zero".into(),
        x0: "parabola".into(),
        f0: "constant".into(),
        solver: SolverKind::EmLifted.as_str().into(),
        paths: 100,
        seed: 0,
        beta: None,
        picard_max: 50,
        picard_tol: 1e-10,
    }
}

/// Built-in scenario by name.
pub fn builtin(name: &str) -> Result<Scenario> {
    let s = match name {
        "rd-bounded" => Scenario {
            r: 4.0,
            admissibility: Admissibility::Ultracontractive,
            density: "exp".into(),
            f1: "tanh".into(),
            f2: "tanh".into(),
            k1: "one".into(),
            g1: "one_plus_tanh".into(),
            g2: "tanh".into(),
            k2: "one".into(),
            ..base("rd-bounded", "reaction-diffusion with bounded distributed delay, multiplicative noise")
        },
        "rd-points" => Scenario {
            admissibility: Admissibility::HilbertSchmidt,
            density: "exp".into(),
            atom_thetas: vec![-1.0, -0.5, 0.0],
            atom_scales: vec![0.5, 0.5, 0.5],
            f1: "tanh".into(),
            f2: "tanh".into(),
            k1: "one".into(),
            g1: "one_plus_tanh".into(),
            g2: "tanh".into(),
            k2: "one".into(),
            ..base("rd-points", "reaction-diffusion with distributed and point delays on L^2")
        },
        "heat-only" => base("heat-only", "heat flow, no delay, no noise"),
        "heat-delay" => Scenario {
            density: "exp".into(),
            atom_thetas: vec![-1.0],
            atom_scales: vec![-1.0],
            ..base("heat-delay", "deterministic heat flow with distributed and point delay")
        },
        "additive" => Scenario {
            density: "exp".into(),
            g1: "const(0.5)".into(),
            noise_modes: Some(2),
            ..base("additive", "linear delay equation driven by additive noise in the two lowest modes")
        },
        "ou-scalar" => Scenario {
            n_modes: 1,
            g1: "const(1)".into(),
            x0: "zero".into(),
            f0: "zero".into(),
            ..base("ou-scalar", "single-mode Ornstein-Uhlenbeck process")
        },
        other => return Err(Error::UnknownScenario(other.into())),
    };
    Ok(s)
}

/// A registry name, or a path to a scenario file.
pub fn load_scenario(name_or_path: &str) -> Result<Scenario> {
    let s = if REGISTRY.contains(&name_or_path) {
        builtin(name_or_path)?
    } else if name_or_path.ends_with(".toml") || FsPath::new(name_or_path).exists() {
        from_toml(&std::fs::read_to_string(name_or_path)?)?
    } else {
        return Err(Error::UnknownScenario(name_or_path.into()));
    };
    s.validate()?;
    Ok(s)
}

/// Parses a (possibly partial) scenario file; missing fields come from `base`
/// (default `heat-only`).
pub fn from_toml(text: &str) -> Result<Scenario> {
    let f: ScenarioFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let base_name = f.base.as_deref().or(f.name.as_deref().filter(|n| REGISTRY.contains(n)));
    let mut s = builtin(base_name.unwrap_or("heat-only"))?;
    macro_rules! take {
        ($($field:ident),*) => { $( if let Some(v) = f.$field { s.$field = v; } )* };
    }
    take!(
        name, description, n_modes, steps_per_unit, horizon, p, r, q, q_ultra, admissibility, density,
        atom_thetas, atom_scales, f1, f2, k1, g1, g2, k2, x0, f0, solver, paths, seed, picard_max, picard_tol
    );
    if f.noise_modes.is_some() {
        s.noise_modes = f.noise_modes;
    }
    if f.beta.is_some() {
        s.beta = f.beta;
    }
    if let Some(dt) = f.dt {
        s.steps_per_unit = steps_from_dt(dt)?;
    }
    s.validate()?;
    Ok(s)
}

fn steps_from_dt(dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt <= 1.0) {
        return Err(invalid("dt", format!("need 0 < dt ≤ 1, got {dt}")));
    }
    let m = (1.0 / dt).round();
    if (m * dt - 1.0).abs() > 1e-9 {
        return Err(invalid("dt", format!("dt = {dt} does not divide the unit delay")));
    }
    Ok(m as usize)
}

fn parse_initial(spec: &str, fs: &FieldSpace) -> Result<SpectralField> {
    let s: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
    let (scale, name) = match s.split_once('*') {
        Some((c, n)) => (
            c.parse::<f64>()
                .map_err(|_| Error::Config(format!("cannot read `{c}` in initial datum `{spec}`")))?,
            n,
        ),
        None => (1.0, s.as_str()),
    };
    let pi = std::f64::consts::PI;
    let x = match name {
        "zero" => fs.zero(),
        "sine" => fs.project(|xi| (pi * xi).sin()),
        "parabola" => fs.project(|xi| 4.0 * xi * (1.0 - xi)),
        other => {
            let n = other
                .strip_prefix("mode(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|n| n.parse::<usize>().ok())
                .ok_or_else(|| Error::Config(format!("unknown initial datum `{spec}`")))?;
            if n == 0 || n > fs.n_modes() {
                return Err(invalid("x0", format!("mode {n} outside 1..={}", fs.n_modes())));
            }
            SpectralField::mode(n, fs.n_modes())
        }
    };
    Ok(x.scaled(scale))
}

impl Scenario {
    pub fn noise_modes(&self) -> usize {
        self.noise_modes.unwrap_or(self.n_modes)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps_per_unit as f64
    }

    pub fn solver_kind(&self) -> Result<SolverKind> {
        self.solver.parse()
    }

    /// Canonical TOML of the resolved scenario.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML.
    pub fn config_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.paths {
            self.paths = v;
        }
        if let Some(v) = o.dt {
            self.steps_per_unit = steps_from_dt(v)?;
        }
        if let Some(v) = o.n_modes {
            self.n_modes = v;
        }
        if let Some(v) = o.noise_modes {
            self.noise_modes = Some(v);
        }
        if let Some(v) = o.beta {
            self.beta = Some(v);
        }
        if let Some(v) = o.p {
            self.p = v;
        }
        if let Some(v) = o.horizon {
            self.horizon = v;
        }
        self.validate()
    }

    /// Structural checks plus the exponent condition selected by `admissibility`.
    pub fn validate(&self) -> Result<()> {
        if self.n_modes == 0 {
            return Err(invalid("n_modes", "must be at least 1"));
        }
        if self.noise_modes() == 0 {
            return Err(invalid("noise_modes", "must be at least 1"));
        }
        if self.steps_per_unit == 0 {
            return Err(invalid("dt", "need dt = 1/m with m ≥ 1"));
        }
        if self.paths == 0 {
            return Err(invalid("paths", "must be at least 1"));
        }
        if self.atom_thetas.len() != self.atom_scales.len() {
            return Err(invalid(
                "atom_scales",
                format!("{} atoms but {} scales", self.atom_thetas.len(), self.atom_scales.len()),
            ));
        }
        if let Some(b) = self.beta {
            if !(b >= 0.0) {
                return Err(invalid("beta", format!("need β ≥ 0, got {b}")));
            }
        }
        self.solver_kind()?;
        for (name, spec) in [("density", &self.density), ("k1", &self.k1), ("k2", &self.k2)] {
            Kernel::parse(spec).map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        for (name, spec) in [("f1", &self.f1), ("f2", &self.f2), ("g1", &self.g1), ("g2", &self.g2)] {
            ScalarMap::parse(spec).map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if !matches!(self.f0.as_str(), "constant" | "zero" | "decay") {
            return Err(Error::Config(format!("unknown initial tail `{}`", self.f0)));
        }
        self.config()?.validate()?;
        match self.admissibility {
            Admissibility::Ultracontractive => {
                check_exponents(self.p, self.r)?;
                check_q_admissible(self.q_ultra, self.p, self.r)?;
            }
            Admissibility::HilbertSchmidt => {
                let e = self.p.max(2.0);
                if !(e < 4.0) {
                    return Err(Error::Admissibility(format!(
                        "need p∨2 < 4 for ∫‖S(s)‖_HS^(p∨2) ds < ∞: p∨2 = {e}"
                    )));
                }
            }
            Admissibility::None => {}
        }
        let fs = self.field_space()?;
        parse_initial(&self.x0, &fs)?;
        Ok(())
    }

    pub fn config(&self) -> Result<SolverConfig> {
        let mut c = SolverConfig::new(self.steps_per_unit, self.horizon);
        c.p = self.p;
        c.q = self.q;
        c.r = self.r;
        c.beta = self.beta.unwrap_or(0.0);
        c.n_picard_max = self.picard_max;
        c.picard_tol = self.picard_tol;
        c.n_paths = self.paths;
        Ok(c)
    }

    pub fn field_space(&self) -> Result<FieldSpace> {
        let table = self.n_modes.max(self.noise_modes());
        FieldSpace::with_grid(self.n_modes, 16 * table, QuadratureRule::Midpoint, self.r, table)
    }

    pub fn measure(&self) -> Result<DelayMeasure> {
        let mut m = DelayMeasure::density(Kernel::parse(&self.density)?);
        for (&theta, &c) in self.atom_thetas.iter().zip(&self.atom_scales) {
            m = m.with_atom(theta, AtomOperator::Scalar(c));
        }
        Ok(m)
    }

    pub fn drift(&self) -> Result<NemytskiiDrift> {
        Ok(NemytskiiDrift {
            f1: ScalarMap::parse(&self.f1)?,
            f2: ScalarMap::parse(&self.f2)?,
            k1: Kernel::parse(&self.k1)?,
        })
    }

    pub fn diffusion(&self) -> Result<NemytskiiDiffusion> {
        Ok(NemytskiiDiffusion {
            g1: ScalarMap::parse(&self.g1)?,
            g2: ScalarMap::parse(&self.g2)?,
            k2: Kernel::parse(&self.k2)?,
        })
    }

    /// The model on the grid dt = 1/m.
    pub fn model_at(&self, m: usize) -> Result<Model> {
        let space = LiftedSpace::new(self.field_space()?, m, self.p)?;
        let heat = HeatSemigroup::new(self.n_modes);
        Model::with_heat(space, heat, self.measure()?, self.drift()?, self.diffusion()?)
    }

    pub fn model(&self) -> Result<Model> {
        self.model_at(self.steps_per_unit)
    }

    /// [x₀, f₀] on the grid of `model`.
    pub fn initial_state(&self, model: &Model) -> Result<LiftedState> {
        let space = model.space();
        let x0 = parse_initial(&self.x0, space.field())?;
        let tail = match self.f0.as_str() {
            "constant" => Segment::constant(space.m(), &x0),
            "zero" => space.zero_segment(),
            "decay" => Segment::from_fn(space.m(), space.n_modes(), |_, theta| x0.scaled(theta.exp())),
            other => return Err(Error::Config(format!("unknown initial tail `{other}`"))),
        };
        LiftedState::new(x0, tail)
    }

    pub fn noise_plan(&self) -> Result<NoisePlan> {
        NoisePlan::new(self.noise_modes(), self.dt(), self.seed)
    }

    /// a, b and ã, b̃ for the model. b uses the smoothing bound when q_ultra is admissible
    /// for (p, r), else b(t) = 2^{1/p'}·max(L_{g1}, L_{g2}‖k2‖)·‖S(t)‖_HS.
    pub fn growth_functions(&self, model: &Model, m_bound: GrowthFn) -> Result<GrowthFunctions> {
        let (lo, hi) = q_window(self.p, self.r);
        if self.q_ultra > lo && self.q_ultra < hi {
            return Ok(model.growth_functions(self.p, self.q_ultra, m_bound));
        }
        let fs = model.field();
        let (l1, l2) = model.diffusion().lipschitz(fs, self.p);
        let c = 2f64.powf(1.0 / conjugate(self.p)) * l1.max(l2);
        let a = crate::delay_operators::drift_growth(model.drift(), fs, self.p);
        let b = growth_fn(move |t| if c == 0.0 { 0.0 } else { c * hs_norm_squared(t).sqrt() });
        let tv = model.semigroup().total_variation();
        Ok(GrowthFunctions::new(a, b, tv, m_bound))
    }

    /// β from the doubling search with M_𝓣 estimated on random probes, unless pinned.
    pub fn contraction_beta(&self, model: &Model, c_eq: f64) -> Result<f64> {
        if let Some(b) = self.beta {
            return Ok(b);
        }
        let bound = model.semigroup().estimate_growth_bound(self.horizon, 16, self.seed)?;
        let g = self.growth_functions(model, bound.as_fn())?;
        find_contraction_beta(&self.config()?, &g.a_tilde, &g.b_tilde, c_eq)
    }
}
