//! Command-line front end: `simulate`, `verify`, `converge`, `scenario-list`.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails, 2 on a configuration
//! or runtime error. Outputs are CSV with a one-line header and floats written with
//! 17 significant digits.

use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{
    check_contraction, check_heat_semigroup_law, check_miyadera_voigt, check_pi2y, check_prop_t,
    convergence_study, generalized_strong_residual, hs_integrability_check, hs_square_integral,
    hs_square_integral_series, refinement_trend, regularity_condition_check, ultracontractivity_check,
    weak_residual, CheckRow, ConvergenceTable, UltraConstant, DIVERGENCE_GROWTH, RESIDUAL_FLOOR,
};
use crate::error::{Error, Result};
use crate::field::FieldSpace;
use crate::scenarios::{builtin, load_scenario, Overrides, Scenario, REGISTRY};
use crate::solvers::{contraction_constants_at, run_ensemble, Model, PathEnsemble, SolverKind};

pub const OUT_DIR_ENV: &str = "SDELIFT_OUT_DIR";

/// Weight c_eq in the contraction condition c_eq·K_β < 1/2.
pub const DEFAULT_C_EQ: f64 = 1.0;

#[derive(Debug, Parser)]
#[command(name = "sdelift", version, about = "Markovian lift of stochastic delay equations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an ensemble and write head trajectories.
    Simulate(RunArgs),
    /// Run a verification suite and write a report.
    Verify {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
    },
    /// Coupled refinement over a dt ladder.
    Converge {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated step sizes, e.g. `1/32,1/64,1/128`.
        #[arg(long, default_value = "1/32,1/64,1/128")]
        ladder: String,
    },
    /// List built-in scenarios.
    ScenarioList,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Semigroup,
    Residuals,
    Hs,
    Ultra,
    Regularity,
    Contraction,
    All,
}

impl Suite {
    fn parts(self) -> Vec<Suite> {
        use Suite::*;
        match self {
            All => vec![Semigroup, Residuals, Hs, Ultra, Regularity, Contraction],
            s => vec![s],
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Built-in scenario name.
    #[arg(long, default_value = "rd-bounded")]
    pub scenario: String,
    /// Scenario file (TOML); takes precedence over --scenario.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paths: Option<usize>,
    /// Step size; must be 1/m.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub modes: Option<usize>,
    #[arg(long)]
    pub noise_modes: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Integrability exponent. For `verify` it is the exponent the regularity and
    /// Hilbert–Schmidt checks are evaluated at; otherwise it overrides the scenario.
    #[arg(long)]
    pub p: Option<f64>,
    /// Defaults to $SDELIFT_OUT_DIR, then `out`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
    pub timestamp: u64,
    pub outputs: Vec<String>,
}

/// Parses arguments, runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Ok(true) when every check passed.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::ScenarioList => {
            for name in REGISTRY {
                let s = builtin(name)?;
                println!("{:<12} {}", s.name, s.description);
            }
            Ok(true)
        }
        Command::Simulate(args) => with_pool(args.workers, || simulate(&args)),
        Command::Verify { run, suite } => with_pool(run.workers, || verify(&run, suite)),
        Command::Converge { run, ladder } => with_pool(run.workers, || converge(&run, &ladder)),
    }
}

fn with_pool(workers: Option<usize>, f: impl FnOnce() -> Result<bool> + Send) -> Result<bool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(crate::error::invalid("workers", "must be at least 1"));
        }
        b = b.num_threads(w);
    }
    let pool = b.build().map_err(|e| Error::Config(e.to_string()))?;
    pool.install(f)
}

fn resolve(args: &RunArgs, with_p: bool) -> Result<Scenario> {
    let mut s = match &args.config {
        Some(path) => load_scenario(&path.to_string_lossy())?,
        None => load_scenario(&args.scenario)?,
    };
    s.apply(&Overrides {
        seed: args.seed,
        paths: args.paths,
        dt: args.dt,
        n_modes: args.modes,
        noise_modes: args.noise_modes,
        beta: args.beta,
        p: if with_p { args.p } else { None },
        horizon: None,
    })?;
    Ok(s)
}

fn out_dir(args: &RunArgs) -> Result<PathBuf> {
    let dir = args
        .out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_csv(path: &FsPath, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

fn write_manifest(dir: &FsPath, command: &str, s: &Scenario, outputs: &[PathBuf]) -> Result<()> {
    let resolved = dir.join(format!("{command}_scenario.toml"));
    fs::write(&resolved, s.to_toml()?)?;
    let mut names: Vec<String> = outputs.iter().map(|p| p.display().to_string()).collect();
    names.push(resolved.display().to_string());
    let m = RunManifest {
        command: command.into(),
        scenario: s.name.clone(),
        config_hash: s.config_hash()?,
        seed: s.seed,
        timestamp: timestamp(),
        outputs: names,
    };
    let text = toml::to_string(&m).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(format!("{command}_manifest.toml")), text)?;
    Ok(())
}

/// Model, initial state and the solver config with β filled in for Picard.
fn prepare(s: &Scenario) -> Result<(Model, crate::segments::LiftedState, crate::solvers::SolverConfig)> {
    let model = s.model()?;
    let y0 = s.initial_state(&model)?;
    let mut cfg = s.config()?;
    if s.solver_kind()? == SolverKind::Picard {
        cfg.beta = s.contraction_beta(&model, DEFAULT_C_EQ)?;
    }
    Ok((model, y0, cfg))
}

fn ensemble(s: &Scenario) -> Result<(Model, PathEnsemble, crate::noise::NoisePlan)> {
    let (model, y0, cfg) = prepare(s)?;
    let plan = s.noise_plan()?;
    let ens = run_ensemble(s.solver_kind()?, &cfg, &model, &y0, &plan, &s.config_hash()?)?;
    Ok((model, ens, plan))
}

fn simulate(args: &RunArgs) -> Result<bool> {
    let s = resolve(args, true)?;
    let dir = out_dir(args)?;
    let (model, ens, _) = ensemble(&s)?;
    let fs_ = model.field();
    let n = fs_.n_modes();
    let mut header = vec!["path".to_string(), "step".into(), "t".into(), "l2_norm".into()];
    header.extend((1..=n).map(|k| format!("a{k}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = ens.paths().iter().enumerate().flat_map(|(i, p)| {
        (0..=p.n_steps()).map(move |k| {
            let x = p.value(k);
            let mut r = vec![i.to_string(), k.to_string(), fmt(k as f64 * ens.dt), fmt(fs_.norm(x))];
            r.extend(x.coeffs().iter().map(|&c| fmt(c)));
            r
        })
    });
    let out = dir.join("trajectory.csv");
    write_csv(&out, &header, rows)?;
    write_manifest(&dir, "simulate", &s, &[out])?;
    Ok(true)
}

fn verify(args: &RunArgs, suite: Suite) -> Result<bool> {
    let s = resolve(args, false)?;
    let p_check = args.p.unwrap_or(s.p);
    let dir = out_dir(args)?;
    let mut rows = Vec::new();
    for part in suite.parts() {
        rows.extend(match part {
            Suite::Semigroup => semigroup_suite(&s)?,
            Suite::Residuals => residual_suite(&s)?,
            Suite::Hs => hs_suite(p_check, s.horizon)?,
            Suite::Ultra => ultra_suite(&s)?,
            Suite::Regularity => regularity_suite(&s, p_check)?,
            Suite::Contraction => contraction_suite(&s)?,
            Suite::All => unreachable!("expanded by parts()"),
        });
    }
    let all_pass = rows.iter().all(|r| r.pass);
    for r in &rows {
        println!("{} {:<32} {:>24} {:>24}  {}", if r.pass { "PASS" } else { "FAIL" }, r.check, fmt(r.value), fmt(r.bound), r.parameters);
    }
    let out = dir.join("report.csv");
    write_report(&out, &rows)?;
    write_manifest(&dir, "verify", &s, &[out])?;
    Ok(all_pass)
}

pub fn write_report(path: &FsPath, rows: &[CheckRow]) -> Result<()> {
    write_csv(
        path,
        &["check", "parameters", "value", "bound", "verdict"],
        rows.iter().map(|r| {
            vec![
                r.check.clone(),
                r.parameters.clone(),
                fmt(r.value),
                fmt(r.bound),
                if r.pass { "pass" } else { "fail" }.to_string(),
            ]
        }),
    )
}

fn semigroup_suite(s: &Scenario) -> Result<Vec<CheckRow>> {
    let (model, y0, cfg) = prepare(s)?;
    let mut rows = vec![check_heat_semigroup_law(s.n_modes, 100, s.seed)];
    rows.extend(check_prop_t(model.semigroup(), 50, 3.0, s.seed)?);
    rows.push(check_miyadera_voigt(model.semigroup(), &y0, 1.0, 8, 1e-6)?.1);
    rows.push(check_pi2y(&cfg, &model, &y0, &s.noise_plan()?, s.paths.min(10))?);
    Ok(rows)
}

fn residual_suite(s: &Scenario) -> Result<Vec<CheckRow>> {
    let (model, ens, plan) = ensemble(s)?;
    let mut rows = Vec::new();
    for n in 1..=2.min(s.n_modes) {
        let weak = weak_residual(&ens, &model, &plan, n)?;
        let strong = generalized_strong_residual(&ens, &model, &plan, n)?;
        let params = format!("e{n} paths={} dt={}", ens.n_paths(), ens.dt);
        rows.push(CheckRow::new("weak_residual", params.clone(), weak.worst_ratio(), 1.0, weak.pass));
        rows.push(CheckRow::new("strong_residual", params.clone(), strong.worst_ratio(), 1.0, strong.pass));
        let gap = weak
            .mean
            .iter()
            .zip(&strong.mean)
            .fold(0.0f64, |a, (u, v)| a.max((u - v).abs()));
        rows.push(CheckRow::new("residual_agreement", params, gap, RESIDUAL_FLOOR, weak.pass == strong.pass));
    }
    Ok(rows)
}

fn hs_suite(p: f64, t: f64) -> Result<Vec<CheckRow>> {
    let v = hs_square_integral(1.0);
    let series = hs_square_integral_series(1.0);
    let rel = (v - series).abs() / series;
    let mut rows = vec![
        CheckRow::at_most("hs_square_integral", "T=1", v, 1.0 / 12.0),
        CheckRow::at_most("hs_series_agreement", format!("series={}", fmt(series)), rel, 0.01),
    ];
    let fin = hs_integrability_check(3.9, t)?;
    rows.push(CheckRow::new("hs_integrable_below_4", format!("p=3.9 T={t}"), fin.last_increase, DIVERGENCE_GROWTH, fin.finite));
    let div = hs_integrability_check(4.5, t)?;
    rows.push(CheckRow::new(
        "hs_divergence_detected",
        format!("p=4.5 T={t}"),
        div.last_increase,
        DIVERGENCE_GROWTH,
        !div.finite,
    ));
    if p != 3.9 && p != 4.5 {
        let tr = hs_integrability_check(p, t)?;
        rows.push(CheckRow::new("hs_integrability", format!("p={p} T={t}"), tr.last_increase, DIVERGENCE_GROWTH, tr.finite));
    }
    Ok(rows)
}

fn ultra_suite(s: &Scenario) -> Result<Vec<CheckRow>> {
    let fs_ = FieldSpace::new(64, s.r.max(2.0))?;
    let mut rows = Vec::new();
    for (name, c) in [("ultracontractivity", UltraConstant::Stated), ("ultracontractivity_gaussian", UltraConstant::Gaussian)] {
        for q in [2.0, 3.0] {
            for t in [0.01, 0.1, 1.0] {
                let r = ultracontractivity_check(&fs_, q, t, 1000, s.seed, c)?;
                rows.push(CheckRow::new(
                    name,
                    format!("q={q} t={t} modes=64 probes=1000 bound={}", fmt(r.bound)),
                    r.max_ratio,
                    crate::analysis::ULTRA_MARGIN,
                    r.pass,
                ));
            }
        }
    }
    Ok(rows)
}

fn regularity_suite(s: &Scenario, p: f64) -> Result<Vec<CheckRow>> {
    let t = s.horizon;
    let mut rows = Vec::new();
    let hs = hs_integrability_check(p, t)?;
    rows.push(CheckRow::new("hs_integrability", format!("p={p} T={t}"), hs.last_increase, DIVERGENCE_GROWTH, hs.finite));
    let mut at_p = s.clone();
    at_p.p = p;
    let model = s.model()?;
    let bound = model.semigroup().estimate_growth_bound(t, 16, s.seed)?;
    let g = at_p.growth_functions(&model, bound.as_fn())?;
    let e = p.max(2.0);
    let (a, b) = (g.a_tilde.clone(), g.b_tilde.clone());
    let tr = refinement_trend(move |x| a(x).abs().powf(p) + b(x).abs().powf(e), t);
    rows.push(CheckRow::new(
        "growth_integrability",
        format!("p={p} q_ultra={} T={t} value={}", s.q_ultra, fmt(tr.value())),
        tr.last_increase,
        DIVERGENCE_GROWTH,
        tr.finite,
    ));
    let lo = 1.0 / s.q.max(p);
    if lo < 0.5 {
        let alpha = 0.5 * (lo + 0.5);
        let tr = regularity_condition_check(&g.a, &g.b, alpha, p, s.q, t)?;
        rows.push(CheckRow::new(
            "regularity_condition",
            format!("p={p} q={} alpha={alpha} T={t}", s.q),
            tr.last_increase,
            DIVERGENCE_GROWTH,
            tr.finite,
        ));
    }
    Ok(rows)
}

fn contraction_suite(s: &Scenario) -> Result<Vec<CheckRow>> {
    let model = s.model()?;
    let y0 = s.initial_state(&model)?;
    let mut cfg = s.config()?;
    let bound = model.semigroup().estimate_growth_bound(s.horizon, 16, s.seed)?;
    let g = s.growth_functions(&model, bound.as_fn())?;
    cfg.beta = match s.beta {
        Some(b) => b,
        None => crate::solvers::find_contraction_beta(&cfg, &g.a_tilde, &g.b_tilde, DEFAULT_C_EQ)?,
    };
    let k = contraction_constants_at(cfg.beta, cfg.horizon, cfg.p, &g.a_tilde, &g.b_tilde).k_beta;
    let cap = DEFAULT_C_EQ * k;
    let mut rows = vec![CheckRow::new(
        "contraction_constant",
        format!("beta={} c_eq={DEFAULT_C_EQ}", cfg.beta),
        cap,
        0.5,
        cap < 0.5,
    )];
    rows.extend(check_contraction(&cfg, &model, &y0, &s.noise_plan()?, cap)?);
    Ok(rows)
}

/// Parses `1/32,1/64` or `0.03125,0.015625` into steps per unit.
pub fn parse_ladder(text: &str) -> Result<Vec<usize>> {
    let mut ms = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let dt = match item.split_once('/') {
            Some((a, b)) => {
                let a: f64 = a.trim().parse().map_err(|_| Error::Config(format!("bad step `{item}`")))?;
                let b: f64 = b.trim().parse().map_err(|_| Error::Config(format!("bad step `{item}`")))?;
                a / b
            }
            None => item.parse().map_err(|_| Error::Config(format!("bad step `{item}`")))?,
        };
        let mut probe = builtin("heat-only")?;
        probe.apply(&Overrides {
            dt: Some(dt),
            ..Default::default()
        })?;
        ms.push(probe.steps_per_unit);
    }
    if ms.len() < 2 {
        return Err(crate::error::invalid("ladder", format!("need at least two step sizes, got {}", ms.len())));
    }
    Ok(ms)
}

fn converge(args: &RunArgs, ladder: &str) -> Result<bool> {
    let s = resolve(args, true)?;
    let ms = parse_ladder(ladder)?;
    let dir = out_dir(args)?;
    let table = convergence_table(&s, &ms)?;
    let out = dir.join("convergence.csv");
    write_csv(
        &out,
        &["dt", "dt_fine", "strong_error", "stderr", "ratio", "order", "fitted_order"],
        table.rows.iter().map(|r| {
            vec![
                fmt(r.dt),
                fmt(r.dt_fine),
                fmt(r.strong_error),
                fmt(r.stderr),
                r.ratio.map_or(String::new(), fmt),
                r.order.map_or(String::new(), fmt),
                fmt(table.order),
            ]
        }),
    )?;
    println!("fitted order {}", fmt(table.order));
    write_manifest(&dir, "converge", &s, &[out])?;
    Ok(true)
}

pub fn convergence_table(s: &Scenario, ms: &[usize]) -> Result<ConvergenceTable> {
    let mut cfg = s.config()?;
    let kind = s.solver_kind()?;
    if kind == SolverKind::Picard {
        cfg.beta = s.contraction_beta(&s.model()?, DEFAULT_C_EQ)?;
    }
    convergence_study(
        &cfg,
        ms,
        |m| {
            let model = s.model_at(m)?;
            let y0 = s.initial_state(&model)?;
            Ok((model, y0))
        },
        s.noise_modes(),
        s.seed,
        kind,
    )
}
