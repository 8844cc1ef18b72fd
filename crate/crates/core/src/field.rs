//! Fields on (0,1) stored against the Dirichlet sine basis e_n(ξ) = √2 sin(πnξ),
//! with a grid view for pointwise (Nemytskii) operations and L^r norms.

use crate::error::{invalid, Result};
use std::f64::consts::{PI, SQRT_2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadratureRule {
    /// Nodes (j + 1/2)/G, equal weights.
    Midpoint,
    /// Nodes j/(G-1) including both endpoints, composite trapezoid weights.
    Trapezoid,
}

#[derive(Debug, Clone)]
pub struct GridQuadrature {
    rule: QuadratureRule,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GridQuadrature {
    pub fn new(n_points: usize, rule: QuadratureRule) -> Result<Self> {
        let (nodes, weights) = match rule {
            QuadratureRule::Midpoint => {
                if n_points < 1 {
                    return Err(invalid("n_grid", "midpoint rule needs at least one point"));
                }
                let g = n_points as f64;
                (
                    (0..n_points).map(|j| (j as f64 + 0.5) / g).collect(),
                    vec![1.0 / g; n_points],
                )
            }
            QuadratureRule::Trapezoid => {
                if n_points < 2 {
                    return Err(invalid("n_grid", "trapezoid rule needs at least two points"));
                }
                let h = 1.0 / (n_points - 1) as f64;
                let nodes = (0..n_points).map(|j| j as f64 * h).collect();
                let mut weights = vec![h; n_points];
                weights[0] = 0.5 * h;
                weights[n_points - 1] = 0.5 * h;
                (nodes, weights)
            }
        };
        Ok(Self {
            rule,
            nodes,
            weights,
        })
    }

    pub fn n_points(&self) -> usize {
        self.nodes.len()
    }

    pub fn rule(&self) -> QuadratureRule {
        self.rule
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Largest mode index for which analysis after synthesis is exact.
    pub fn exact_modes(&self) -> usize {
        match self.rule {
            QuadratureRule::Midpoint => self.n_points() - 1,
            QuadratureRule::Trapezoid => self.n_points().saturating_sub(2),
        }
    }
}

#[inline]
pub fn basis_value(n: usize, xi: f64) -> f64 {
    SQRT_2 * (PI * n as f64 * xi).sin()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    coeffs: Vec<f64>,
    grid_cache: Option<Vec<f64>>,
}

impl SpectralField {
    pub fn zeros(n_modes: usize) -> Self {
        Self::from_coeffs(vec![0.0; n_modes])
    }

    pub fn from_coeffs(coeffs: Vec<f64>) -> Self {
        Self {
            coeffs,
            grid_cache: None,
        }
    }

    /// The n-th basis function (1-based), truncated to `n_modes`.
    pub fn mode(n: usize, n_modes: usize) -> Self {
        let mut c = vec![0.0; n_modes];
        c[n - 1] = 1.0;
        Self::from_coeffs(c)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        self.grid_cache = None;
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn n_modes(&self) -> usize {
        self.coeffs.len()
    }

    /// Grid values this field was built from, if any.
    pub fn grid_cache(&self) -> Option<&[f64]> {
        self.grid_cache.as_deref()
    }

    /// ‖x‖_{L²} from coefficients (orthonormal basis).
    pub fn l2_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|c| a * c).collect(),
            grid_cache: self.grid_cache.as_ref().map(|g| g.iter().map(|v| a * v).collect()),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.n_modes(), other.n_modes());
        Self::from_coeffs(
            self.coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scaled(-1.0))
    }

    /// self += a · other
    pub fn axpy(&mut self, a: f64, other: &Self) {
        self.grid_cache = None;
        for (x, y) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *x += a * y;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }
}

/// Discretization of E = L^r(0,1): mode count, grid, basis table and exponent.
#[derive(Debug, Clone)]
pub struct FieldSpace {
    n_modes: usize,
    n_table: usize,
    grid: GridQuadrature,
    /// table[j * n_table + (n-1)] = e_n(ξ_j)
    table: Vec<f64>,
    r: f64,
}

impl FieldSpace {
    /// Default grid: midpoint rule with 16·N points.
    pub fn new(n_modes: usize, r: f64) -> Result<Self> {
        Self::with_grid(n_modes, 16 * n_modes, QuadratureRule::Midpoint, r, n_modes)
    }

    /// `n_table` ≥ n_modes basis functions are tabulated (extra ones serve noise modes).
    pub fn with_grid(
        n_modes: usize,
        n_grid: usize,
        rule: QuadratureRule,
        r: f64,
        n_table: usize,
    ) -> Result<Self> {
        if n_modes < 1 {
            return Err(invalid("n_modes", "must be at least 1"));
        }
        if !(r >= 1.0) {
            return Err(invalid("r", format!("need r >= 1, got {r}")));
        }
        let n_table = n_table.max(n_modes);
        let grid = GridQuadrature::new(n_grid, rule)?;
        if grid.exact_modes() < n_table {
            return Err(invalid(
                "n_grid",
                format!("{n_grid} points cannot resolve {n_table} modes"),
            ));
        }
        let mut table = vec![0.0; n_grid * n_table];
        for (j, &xi) in grid.nodes().iter().enumerate() {
            for n in 1..=n_table {
                table[j * n_table + n - 1] = basis_value(n, xi);
            }
        }
        Ok(Self {
            n_modes,
            n_table,
            grid,
            table,
            r,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_table(&self) -> usize {
        self.n_table
    }

    pub fn n_grid(&self) -> usize {
        self.grid.n_points()
    }

    pub fn grid(&self) -> &GridQuadrature {
        &self.grid
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn zero(&self) -> SpectralField {
        SpectralField::zeros(self.n_modes)
    }

    /// Σ_n c_n e_n(ξ_j) for the first `coeffs.len()` modes.
    pub fn synthesize_into(&self, coeffs: &[f64], out: &mut [f64]) {
        let k = coeffs.len();
        debug_assert!(k <= self.n_table);
        debug_assert_eq!(out.len(), self.n_grid());
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.table[j * self.n_table..j * self.n_table + k];
            *o = row.iter().zip(coeffs).map(|(e, c)| e * c).sum();
        }
    }

    pub fn synthesize(&self, x: &SpectralField) -> Vec<f64> {
        let mut out = vec![0.0; self.n_grid()];
        self.synthesize_into(x.coeffs(), &mut out);
        out
    }

    /// c_n = Σ_j w_j v_j e_n(ξ_j) for n ≤ out.len().
    pub fn analyze_into(&self, values: &[f64], out: &mut [f64]) {
        let k = out.len();
        debug_assert!(k <= self.n_table);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, (&v, &w)) in values.iter().zip(self.grid.weights()).enumerate() {
            let a = v * w;
            if a == 0.0 {
                continue;
            }
            let row = &self.table[j * self.n_table..j * self.n_table + k];
            for (o, e) in out.iter_mut().zip(row) {
                *o += a * e;
            }
        }
    }

    pub fn analyze(&self, values: &[f64]) -> SpectralField {
        let mut c = vec![0.0; self.n_modes];
        self.analyze_into(values, &mut c);
        SpectralField::from_coeffs(c)
    }

    /// Projects grid values and keeps them as the field's grid view.
    pub fn from_grid_values(&self, values: Vec<f64>) -> Result<SpectralField> {
        if values.len() != self.n_grid() {
            return Err(crate::error::Error::GridMismatch(format!(
                "{} values for a {}-point grid",
                values.len(),
                self.n_grid()
            )));
        }
        let mut f = self.analyze(&values);
        f.grid_cache = Some(values);
        Ok(f)
    }

    /// Projection of ξ ↦ g(ξ) sampled on the grid.
    pub fn project(&self, g: impl Fn(f64) -> f64) -> SpectralField {
        let vals: Vec<f64> = self.grid.nodes().iter().map(|&x| g(x)).collect();
        self.analyze(&vals)
    }

    /// Point evaluation of the coefficient series.
    pub fn eval(&self, x: &SpectralField, xi: f64) -> f64 {
        x.coeffs()
            .iter()
            .enumerate()
            .map(|(i, c)| c * basis_value(i + 1, xi))
            .sum()
    }

    /// Quadrature L^r norm of grid values.
    pub fn lr_norm_values(&self, values: &[f64], r: f64) -> f64 {
        let w = self.grid.weights();
        if r == 2.0 {
            values.iter().zip(w).map(|(v, w)| w * v * v).sum::<f64>().sqrt()
        } else if r.is_infinite() {
            values.iter().fold(0.0, |m, v| m.max(v.abs()))
        } else {
            values
                .iter()
                .zip(w)
                .map(|(v, w)| w * v.abs().powf(r))
                .sum::<f64>()
                .powf(1.0 / r)
        }
    }

    /// (∫|x|^r)^{1/r} on the grid view; a cached grid view takes precedence.
    pub fn lr_norm(&self, x: &SpectralField, r: f64) -> Result<f64> {
        if !(r >= 1.0) {
            return Err(invalid("r", format!("norm exponent must be >= 1, got {r}")));
        }
        if let Some(g) = x.grid_cache() {
            if g.len() == self.n_grid() {
                return Ok(self.lr_norm_values(g, r));
            }
        }
        Ok(self.lr_norm_values(&self.synthesize(x), r))
    }

    /// Norm of E = L^r(0,1).
    pub fn norm(&self, x: &SpectralField) -> f64 {
        if self.r == 2.0 && x.grid_cache().is_none() {
            return x.l2_norm();
        }
        self.lr_norm(x, self.r).expect("r validated at construction")
    }

    /// Norm of E evaluated on grid values.
    pub fn norm_values(&self, values: &[f64]) -> f64 {
        self.lr_norm_values(values, self.r)
    }

    pub fn inner(&self, x: &SpectralField, y: &SpectralField) -> f64 {
        x.coeffs().iter().zip(y.coeffs()).map(|(a, b)| a * b).sum()
    }
}
