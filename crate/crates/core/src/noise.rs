//! Truncated cylindrical Wiener process on L²(0,1) with counter-based increments.
//!
//! The increment of mode n at fine step s on path p is a pure function of
//! (seed, p, s, n): a ChaCha8 stream keyed by the seed, selected by the path id and
//! positioned at the fine step, so paths and steps can be generated in any order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::field::{FieldSpace, SpectralField};

/// Words of the ChaCha stream reserved for each fine step.
const STEP_STRIDE_LOG2: u32 = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePlan {
    n_noise_modes: usize,
    dt: f64,
    seed: u64,
    fine_factor: usize,
    key: [u8; 32],
}

impl NoisePlan {
    pub fn new(n_noise_modes: usize, dt: f64, seed: u64) -> Result<Self> {
        if n_noise_modes < 1 {
            return Err(invalid("n_noise_modes", "must be at least 1"));
        }
        if !(dt > 0.0) {
            return Err(invalid("dt", format!("must be positive, got {dt}")));
        }
        let key: [u8; 32] = Sha256::digest(seed.to_le_bytes()).into();
        Ok(Self {
            n_noise_modes,
            dt,
            seed,
            fine_factor: 1,
            key,
        })
    }

    /// A plan whose step is `factor` fine steps; its increments are sums of the fine ones.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor < 1 {
            return Err(invalid("factor", "must be at least 1"));
        }
        Ok(Self {
            dt: self.dt * factor as f64,
            fine_factor: self.fine_factor * factor,
            ..self.clone()
        })
    }

    pub fn n_noise_modes(&self) -> usize {
        self.n_noise_modes
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fine_factor(&self) -> usize {
        self.fine_factor
    }

    pub fn fine_dt(&self) -> f64 {
        self.dt / self.fine_factor as f64
    }

    fn fine_into(&self, path_id: u64, fine_step: u64, out: &mut [f64]) {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(path_id);
        rng.set_word_pos((fine_step as u128) << STEP_STRIDE_LOG2);
        let sd = self.fine_dt().sqrt();
        for o in out.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *o += sd * z;
        }
    }

    /// ΔW_n(k) for n = 1..=M, written into `out`.
    pub fn increments_into(&self, path_id: u64, step: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_noise_modes);
        out.iter_mut().for_each(|o| *o = 0.0);
        let f = self.fine_factor as u64;
        for i in 0..f {
            self.fine_into(path_id, step as u64 * f + i, out);
        }
    }

    pub fn increments(&self, path_id: u64, step: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_noise_modes];
        self.increments_into(path_id, step, &mut out);
        out
    }
}

/// Grid buffers for assembling ψ(·)ΔW.
#[derive(Debug, Clone)]
pub struct NoiseScratch {
    grid: Vec<f64>,
}

impl NoiseScratch {
    pub fn new(space: &FieldSpace) -> Self {
        Self {
            grid: vec![0.0; space.n_grid()],
        }
    }
}

/// Grid values of Σ_n e_n ΔW_n.
pub fn noise_grid_into(space: &FieldSpace, dw: &[f64], out: &mut [f64]) -> Result<()> {
    if dw.len() > space.n_table() {
        return Err(invalid(
            "n_noise_modes",
            format!("{} noise modes but only {} tabulated", dw.len(), space.n_table()),
        ));
    }
    space.synthesize_into(dw, out);
    Ok(())
}

/// Coefficients of G·Σ_n e_n ΔW_n for a multiplier G given on the grid.
pub fn apply_noise_into(
    space: &FieldSpace,
    multiplier: &[f64],
    dw: &[f64],
    scratch: &mut NoiseScratch,
    out: &mut [f64],
) -> Result<()> {
    if multiplier.len() != space.n_grid() {
        return Err(crate::error::Error::GridMismatch(format!(
            "multiplier has {} values on a {}-point grid",
            multiplier.len(),
            space.n_grid()
        )));
    }
    noise_grid_into(space, dw, &mut scratch.grid)?;
    for (v, m) in scratch.grid.iter_mut().zip(multiplier) {
        *v *= m;
    }
    space.analyze_into(&scratch.grid, out);
    Ok(())
}

pub fn apply_noise(space: &FieldSpace, multiplier: &[f64], dw: &[f64]) -> Result<SpectralField> {
    let mut out = vec![0.0; space.n_modes()];
    apply_noise_into(space, multiplier, dw, &mut NoiseScratch::new(space), &mut out)?;
    Ok(SpectralField::from_coeffs(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{basis_value, QuadratureRule};

    #[test]
    fn same_key_same_output() {
        let plan = NoisePlan::new(8, 1.0 / 64.0, 42).unwrap();
        let a = plan.increments(3, 17);
        let b = plan.increments(3, 17);
        assert_eq!(a, b);
        assert_ne!(a, plan.increments(4, 17));
        assert_ne!(a, plan.increments(3, 18));
        let other = NoisePlan::new(8, 1.0 / 64.0, 43).unwrap();
        assert_ne!(a, other.increments(3, 17));
        // the first modes do not depend on how many modes are drawn
        let small = NoisePlan::new(3, 1.0 / 64.0, 42).unwrap();
        assert_eq!(&a[..3], small.increments(3, 17).as_slice());
    }

    #[test]
    fn coarse_is_sum_of_fine() {
        let fine = NoisePlan::new(4, 1.0 / 128.0, 7).unwrap();
        let coarse = fine.coarsened(4).unwrap();
        assert_eq!(coarse.dt(), 1.0 / 32.0);
        for k in [0usize, 5, 31] {
            let c = coarse.increments(9, k);
            let mut s = vec![0.0; 4];
            for i in 0..4 {
                for (a, b) in s.iter_mut().zip(fine.increments(9, 4 * k + i)) {
                    *a += b;
                }
            }
            for (a, b) in c.iter().zip(&s) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn moments_at_one_million_samples() {
        let dt = 0.01;
        let plan = NoisePlan::new(10, dt, 2024).unwrap();
        let n_steps = 100_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let mut sum4 = 0.0;
        for k in 0..n_steps {
            for v in plan.increments(0, k) {
                sum += v;
                sum2 += v * v;
                sum4 += v.powi(4);
            }
        }
        let n = (n_steps * 10) as f64;
        let mean = sum / n;
        let var = sum2 / n - mean * mean;
        let mean_sd = (dt / n).sqrt();
        // Var(ΔW²) = 2dt²
        let var_sd = (2.0 * dt * dt / n).sqrt();
        println!("mean {mean:.3e} (σ {mean_sd:.1e}), var {var:.6e} (σ {var_sd:.1e}), kurtosis {:.4}", sum4 / n / (dt * dt));
        assert!(mean.abs() < 5.0 * mean_sd);
        assert!((var - dt).abs() < 5.0 * var_sd);
    }

    #[test]
    fn empirical_variance_and_cross_path_correlation() {
        let dt = 1.0 / 64.0;
        let plan = NoisePlan::new(1, dt, 99).unwrap();
        let n = 100_000;
        let a: Vec<f64> = (0..n).map(|k| plan.increments(1, k)[0]).collect();
        let b: Vec<f64> = (0..n).map(|k| plan.increments(2, k)[0]).collect();
        let var = a.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var / dt - 1.0).abs() < 0.03, "{var}");
        let corr = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n as f64 / dt;
        assert!(corr.abs() < 5.0 / (n as f64).sqrt(), "{corr}");
    }

    #[test]
    fn apply_noise_examples() {
        let fs = FieldSpace::with_grid(8, 128, QuadratureRule::Midpoint, 2.0, 8).unwrap();
        let ones = vec![1.0; 128];
        let z = apply_noise(&fs, &ones, &[0.0; 8]).unwrap();
        assert!(z.coeffs().iter().all(|&c| c == 0.0));

        let v = apply_noise(&fs, &ones, &[0.3]).unwrap();
        assert!((v.coeffs()[0] - 0.3).abs() < 1e-15);
        assert!(v.coeffs()[1..].iter().all(|c| c.abs() < 1e-15));

        // multiplier e₁, M = 2: e₁·(e₁ΔW₁ + e₂ΔW₂) on the grid
        let e1: Vec<f64> = fs.grid().nodes().iter().map(|&x| basis_value(1, x)).collect();
        let dw = [0.4, -0.7];
        let got = apply_noise(&fs, &e1, &dw).unwrap();
        let oracle: Vec<f64> = fs
            .grid()
            .nodes()
            .iter()
            .map(|&x| basis_value(1, x) * (basis_value(1, x) * dw[0] + basis_value(2, x) * dw[1]))
            .collect();
        let expect = fs.analyze(&oracle);
        for (a, b) in got.coeffs().iter().zip(expect.coeffs()) {
            assert!((a - b).abs() < 1e-14);
        }
        // closed forms: ⟨e₁², e_k⟩ = -8√2/(πk(k²-4)) for odd k, ⟨e₁e₂, e_k⟩ = -16√2k/(π(k²-1)(k²-9)) for even k
        // the grid projection carries an O(h²) midpoint error, so use a fine grid here
        let fine = FieldSpace::with_grid(8, 4096, QuadratureRule::Midpoint, 2.0, 8).unwrap();
        let e1: Vec<f64> = fine.grid().nodes().iter().map(|&x| basis_value(1, x)).collect();
        let got = apply_noise(&fine, &e1, &dw).unwrap();
        let pi = std::f64::consts::PI;
        let s2 = 2f64.sqrt();
        for k in 1..=8usize {
            let kf = k as f64;
            let c = if k % 2 == 1 {
                dw[0] * (-8.0 * s2 / (pi * kf * (kf * kf - 4.0)))
            } else {
                dw[1] * (-16.0 * s2 * kf / (pi * (kf * kf - 1.0) * (kf * kf - 9.0)))
            };
            assert!((got.coeffs()[k - 1] - c).abs() < 1e-11, "k={k} {} {c}", got.coeffs()[k - 1]);
        }
    }

    #[test]
    fn noise_modes_beyond_table_rejected() {
        let fs = FieldSpace::new(4, 2.0).unwrap();
        assert!(apply_noise(&fs, &vec![1.0; fs.n_grid()], &[0.1; 5]).is_err());
    }

    #[test]
    fn ito_isometry_for_frozen_multiplier() {
        use crate::semigroup::HeatSemigroup;
        let n = 8;
        let fs = FieldSpace::new(n, 2.0).unwrap();
        let heat = HeatSemigroup::new(n);
        let mult: Vec<f64> = fs.grid().nodes().iter().map(|&x| 0.7 + 0.5 * (3.0 * x).sin()).collect();
        let dt = 1.0 / 32.0;
        let steps = 16;
        let t = steps as f64 * dt;
        let plan = NoisePlan::new(n, dt, 11).unwrap();

        // oracle: Σ_k dt Σ_m ‖S(t - t_k) G e_m‖², columns built independently of apply_noise
        let mut hs = 0.0;
        for k in 0..steps {
            let tau = t - k as f64 * dt;
            for m in 1..=n {
                let col: Vec<f64> = fs
                    .grid()
                    .nodes()
                    .iter()
                    .zip(&mult)
                    .map(|(&x, g)| g * basis_value(m, x))
                    .collect();
                let c = heat.apply(tau, &fs.analyze(&col)).unwrap();
                hs += dt * c.coeffs().iter().map(|v| v * v).sum::<f64>();
            }
        }

        let n_paths = 10_000u64;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let mut scratch = NoiseScratch::new(&fs);
        let mut inc = vec![0.0; n];
        let mut dw = vec![0.0; n];
        for path in 0..n_paths {
            let mut acc = vec![0.0; n];
            for k in 0..steps {
                plan.increments_into(path, k, &mut dw);
                apply_noise_into(&fs, &mult, &dw, &mut scratch, &mut inc).unwrap();
                heat.apply_in_place(t - k as f64 * dt, &mut inc);
                for (a, b) in acc.iter_mut().zip(&inc) {
                    *a += b;
                }
            }
            let v: f64 = acc.iter().map(|x| x * x).sum();
            sum += v;
            sum2 += v * v;
        }
        let nf = n_paths as f64;
        let mean = sum / nf;
        let se = ((sum2 / nf - mean * mean) / nf).sqrt();
        assert!((mean - hs).abs() < 3.0 * se, "mean {mean} oracle {hs} se {se}");
    }
}
