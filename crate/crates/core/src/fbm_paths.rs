//! Wiener and fractional Brownian paths on a grid, and integrals against them.
//!
//! `W` is primitive and `W^H` is derived through the kernel matrix, so every
//! integral on a path sees the same increments. Path `p` of seed `s` draws
//! from ChaCha8 stream `p` of key `s`: any subset of paths can be replayed.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::core_model::TimeGrid;
use crate::error::{invalid, Error, Result};
use crate::frac_ops::{GridFunction, KernelMatrix};

pub const RNG_ALGORITHM: &str = "ChaCha8 (seed_from_u64 key, stream = path index), ziggurat normals";

/// Exponents above this are treated as overflow.
pub const EXP_GUARD: f64 = 700.0;

/// Replayable source of paths: a kernel and a seed.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    kernel: Arc<KernelMatrix>,
    seed: u64,
}

impl NoiseSource {
    pub fn new(grid: TimeGrid, hurst: f64, seed: u64) -> Result<Self> {
        Ok(Self { kernel: Arc::new(KernelMatrix::new(grid, hurst)?), seed })
    }

    pub fn with_kernel(kernel: Arc<KernelMatrix>, seed: u64) -> Self {
        Self { kernel, seed }
    }

    pub fn kernel(&self) -> &Arc<KernelMatrix> {
        &self.kernel
    }

    pub fn grid(&self) -> &TimeGrid {
        self.kernel.grid()
    }

    pub fn hurst(&self) -> f64 {
        self.kernel.hurst()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dw(&self, index: usize) -> Vec<f64> {
        let grid = self.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let sd = grid.step().sqrt();
        (0..grid.n()).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    pub fn path(&self, index: usize) -> PathBundle {
        PathBundle::from_increments(self.kernel.clone(), index, self.dw(index))
    }
}

#[derive(Debug, Clone)]
pub struct PathBundle {
    kernel: Arc<KernelMatrix>,
    pub index: usize,
    pub dw: Vec<f64>,
    pub w: Vec<f64>,
    pub dwh: Vec<f64>,
    pub wh: Vec<f64>,
}

fn cumulative(incr: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(incr.len() + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for d in incr {
        acc += d;
        out.push(acc);
    }
    out
}

impl PathBundle {
    pub fn from_increments(kernel: Arc<KernelMatrix>, index: usize, dw: Vec<f64>) -> Self {
        let dwh = kernel.increments(&dw);
        let w = cumulative(&dw);
        let wh = cumulative(&dwh);
        Self { kernel, index, dw, w, dwh, wh }
    }

    pub fn grid(&self) -> &TimeGrid {
        self.kernel.grid()
    }

    pub fn kernel(&self) -> &Arc<KernelMatrix> {
        &self.kernel
    }

    pub fn hurst(&self) -> f64 {
        self.kernel.hurst()
    }
}

pub fn sample_paths(grid: TimeGrid, hurst: f64, count: usize, seed: u64) -> Result<Vec<PathBundle>> {
    if count == 0 {
        return Err(invalid("path count must be at least 1"));
    }
    let source = NoiseSource::new(grid, hurst, seed)?;
    Ok((0..count).into_par_iter().map(|p| source.path(p)).collect())
}

/// Left-point sum `sum_j f(s_j) dW_j`; cells past the support of `f` contribute nothing.
pub fn ito_integral(f: &GridFunction, path: &PathBundle) -> f64 {
    f.values()
        .iter()
        .zip(&path.dw)
        .take(f.support())
        .map(|(v, d)| v * d)
        .sum()
}

/// Cell averages of a grid function, zero past its support.
pub fn cell_values(f: &GridFunction) -> Vec<f64> {
    f.values()
        .windows(2)
        .enumerate()
        .map(|(i, w)| if i < f.support() { 0.5 * (w[0] + w[1]) } else { 0.0 })
        .collect()
}

/// `int_0^{t_m} gamma dW^H` as the Wiener integral of the discrete `K_H^*(gamma 1_[0,t_m])`.
///
/// The adjoint row is built from the path's own kernel, so `gamma = 1` returns `W^H(t_m)`.
pub fn fbm_integral_det(gamma: &GridFunction, path: &PathBundle, m: usize) -> f64 {
    let kappa = path.kernel.adjoint(&cell_values(gamma), m);
    kappa.iter().zip(&path.dw).map(|(k, d)| k * d).sum()
}

/// `||K_H^*(gamma 1_[0,t_m])||^2` for every `m`, from the kernel's adjoint rows.
pub fn compensator(kernel: &KernelMatrix, gamma_cells: &[f64]) -> Vec<f64> {
    let dt = kernel.grid().step();
    kernel
        .adjoint_rows(gamma_cells)
        .iter()
        .map(|row| row.iter().map(|v| v * v).sum::<f64>() * dt)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpPath {
    pub values: Vec<f64>,
    pub log_values: Vec<f64>,
}

/// `log E_t(gamma)` from `W^H` increments, cell values of gamma and the compensator.
pub(crate) fn log_exponential(dwh: &[f64], gamma_cells: &[f64], comp: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(comp.len());
    out.push(0.0);
    let mut xi = 0.0;
    for (i, (g, d)) in gamma_cells.iter().zip(dwh).enumerate() {
        xi += g * d;
        out.push(xi - 0.5 * comp[i + 1]);
    }
    out
}

/// `E_t(gamma) = exp{int_0^t gamma dW^H - 1/2 ||K_H^*(gamma 1_[0,t])||^2}` at every node.
pub fn stoch_exponential(gamma: &GridFunction, path: &PathBundle) -> Result<ExpPath> {
    let cells = cell_values(gamma);
    let comp = compensator(&path.kernel, &cells);
    let log_values = log_exponential(&path.dwh, &cells, &comp);
    if let Some(node) = log_values.iter().position(|l| !l.is_finite() || l.abs() > EXP_GUARD) {
        return Err(Error::NonFinite { path: path.index, node });
    }
    let values = log_values.iter().map(|l| l.exp()).collect();
    Ok(ExpPath { values, log_values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_model::build_grid;

    fn small() -> NoiseSource {
        NoiseSource::new(build_grid(32, 1.0).unwrap(), 0.7, 11).unwrap()
    }

    #[test]
    fn paths_start_at_zero_and_replay() {
        let src = small();
        let p = src.path(5);
        assert_eq!(p.w[0], 0.0);
        assert_eq!(p.wh[0], 0.0);
        let q = src.path(5);
        assert_eq!(p.dw, q.dw);
        assert_eq!(p.wh, q.wh);
        assert_ne!(src.path(6).dw, p.dw);
    }

    #[test]
    fn batch_matches_single_paths() {
        let grid = build_grid(16, 1.0).unwrap();
        let batch = sample_paths(grid, 0.8, 7, 3).unwrap();
        let src = NoiseSource::new(grid, 0.8, 3).unwrap();
        assert_eq!(batch[4].dw, src.path(4).dw);
        assert!(sample_paths(grid, 0.8, 0, 3).is_err());
    }

    #[test]
    fn unit_integrand_gives_terminal_values() {
        let src = small();
        let p = src.path(0);
        let grid = *src.grid();
        let one = GridFunction::from_fn(grid, |_| 1.0);
        assert!((ito_integral(&one, &p) - p.w[32]).abs() < 1e-14);
        for m in [1, 10, 32] {
            assert!((fbm_integral_det(&one, &p, m) - p.wh[m]).abs() < 1e-12);
        }
        let zero = GridFunction::zeros(grid);
        assert_eq!(ito_integral(&zero, &p), 0.0);
        assert_eq!(fbm_integral_det(&zero, &p, 20), 0.0);
    }

    #[test]
    fn constant_exponential_is_closed_form() {
        let src = small();
        let grid = *src.grid();
        let c = 0.45;
        let gamma = GridFunction::from_fn(grid, |_| c);
        for idx in 0..5 {
            let p = src.path(idx);
            let e = stoch_exponential(&gamma, &p).unwrap();
            assert_eq!(e.values[0], 1.0);
            for m in 0..=32 {
                let t = grid.t(m);
                let exact = (c * p.wh[m] - 0.5 * c * c * t.powf(1.4)).exp();
                assert!((e.values[m] - exact).abs() < 1e-12 * exact);
            }
        }
        let zero = stoch_exponential(&GridFunction::zeros(grid), &src.path(1)).unwrap();
        assert!(zero.values.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn overflow_is_reported() {
        let src = small();
        let gamma = GridFunction::from_fn(*src.grid(), |_| 1e4);
        assert!(matches!(stoch_exponential(&gamma, &src.path(0)), Err(Error::NonFinite { .. })));
    }
}
