//! Picard iteration on the law curves of the mean-field equation
//! `dX = (b(t, rho) X + beta(t, rho)) dt + (C X + a(t, Gamma)) dW^H`.
//!
//! With `K = X + a/C`, each path is `e_t K_t = E_t V_t` where `E = E(C)` is the
//! stochastic exponential and `V_t = K_0 + int_0^t e_s beta_K(s) E_s^-1 ds`.
//! Given the curves `rho`, `Gamma`, every path is explicit, so the iteration
//! alternates between evaluating paths and averaging them.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core_model::{ModelSpec, TimeGrid};
use crate::error::{invalid, Error, Result};
use crate::fbm_paths::{compensator, log_exponential, NoiseSource, PathBundle, EXP_GUARD};
use crate::frac_ops::{inner_h, GridFunction};
use crate::stats::slot_means;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;

/// A fixed path ensemble with `log E_t(C)` stored per path.
///
/// `E(C)` does not depend on the law or on `x`, so one ensemble serves every
/// Picard iteration and every re-solve at a shifted initial value.
#[derive(Debug, Clone)]
pub struct Ensemble {
    source: NoiseSource,
    c_nodes: Vec<f64>,
    c_cells: Vec<f64>,
    log_e: Vec<f64>,
    count: usize,
}

impl Ensemble {
    pub fn new(spec: &ModelSpec, source: NoiseSource, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(invalid("path count must be at least 1"));
        }
        if (source.hurst() - spec.hurst()).abs() > 0.0 {
            return Err(invalid("noise source and model disagree on the Hurst index"));
        }
        let grid = *source.grid();
        let c_nodes: Vec<f64> = (0..=grid.n()).map(|i| spec.c_at(grid.t(i))).collect();
        let c_cells: Vec<f64> = c_nodes.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let comp = compensator(source.kernel(), &c_cells);
        let rows: Vec<Vec<f64>> = (0..count)
            .into_par_iter()
            .map(|p| {
                let dwh = source.kernel().increments(&source.dw(p));
                log_exponential(&dwh, &c_cells, &comp)
            })
            .collect();
        for (p, row) in rows.iter().enumerate() {
            if let Some(node) = row.iter().position(|l| !l.is_finite() || l.abs() > EXP_GUARD) {
                return Err(Error::NonFinite { path: p, node });
            }
        }
        Ok(Self { source, c_nodes, c_cells, log_e: rows.concat(), count })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn grid(&self) -> &TimeGrid {
        self.source.grid()
    }

    pub fn source(&self) -> &NoiseSource {
        &self.source
    }

    pub fn path(&self, p: usize) -> PathBundle {
        self.source.path(p)
    }

    pub fn log_exp(&self, p: usize) -> &[f64] {
        let w = self.grid().n() + 1;
        &self.log_e[p * w..(p + 1) * w]
    }

    pub fn c_nodes(&self) -> &[f64] {
        &self.c_nodes
    }

    pub fn c_cells(&self) -> &[f64] {
        &self.c_cells
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LawCurves {
    pub rho: GridFunction,
    pub gamma: GridFunction,
    pub e: GridFunction,
    pub beta_k: GridFunction,
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
}

impl LawCurves {
    pub fn grid(&self) -> &TimeGrid {
        self.rho.grid()
    }

    /// `a(t, Gamma_t) / C_t` at the nodes.
    pub fn shift(&self, spec: &ModelSpec) -> Vec<f64> {
        shift_curve(spec, self.grid(), self.gamma.values())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionPath {
    pub index: usize,
    pub exp: Vec<f64>,
    pub v: Vec<f64>,
    pub k: Vec<f64>,
    pub x: Vec<f64>,
    pub k0: f64,
}

fn shift_curve(spec: &ModelSpec, grid: &TimeGrid, gamma: &[f64]) -> Vec<f64> {
    gamma
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let t = grid.t(i);
            let a = spec.a.eval(t, *g);
            // no additive noise means no shift, even where C vanishes
            if a == 0.0 {
                0.0
            } else {
                a / spec.c_at(t)
            }
        })
        .collect()
}

/// Second-order finite-difference time derivative of nodal values.
pub(crate) fn time_derivative(values: &[f64], dt: f64) -> Vec<f64> {
    let n = values.len() - 1;
    let mut d = vec![0.0; n + 1];
    if n == 1 {
        let s = (values[1] - values[0]) / dt;
        return vec![s, s];
    }
    for i in 1..n {
        d[i] = (values[i + 1] - values[i - 1]) / (2.0 * dt);
    }
    d[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * dt);
    d[n] = (3.0 * values[n] - 4.0 * values[n - 1] + values[n - 2]) / (2.0 * dt);
    d
}

/// Running trapezoidal integral of nodal values.
pub(crate) fn running_trapezoid(values: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    out.push(0.0);
    let mut acc = 0.0;
    for w in values.windows(2) {
        acc += 0.5 * (w[0] + w[1]) * dt;
        out.push(acc);
    }
    out
}

/// `beta_K(t) = d/dt (a(t, Gamma_t) / C_t) - b(t, rho_t) a(t, Gamma_t) / C_t + beta(t, rho_t)`.
pub fn assemble_beta_k(spec: &ModelSpec, grid: &TimeGrid, rho: &[f64], gamma: &[f64]) -> Vec<f64> {
    let shift = shift_curve(spec, grid, gamma);
    let ds = time_derivative(&shift, grid.step());
    (0..=grid.n())
        .map(|i| {
            let t = grid.t(i);
            ds[i] - spec.b.eval(t, rho[i]) * shift[i] + spec.beta.eval(t, rho[i])
        })
        .collect()
}

/// Deterministic curves needed to evaluate a path for given `rho`, `Gamma`.
#[derive(Debug, Clone)]
pub(crate) struct PathCoefficients {
    pub e: Vec<f64>,
    pub beta_k: Vec<f64>,
    pub shift: Vec<f64>,
    pub k0: f64,
    pub dt: f64,
}

impl PathCoefficients {
    pub fn new(spec: &ModelSpec, grid: &TimeGrid, rho: &[f64], gamma: &[f64]) -> Self {
        let b: Vec<f64> = (0..=grid.n()).map(|i| spec.b.eval(grid.t(i), rho[i])).collect();
        let e = running_trapezoid(&b, grid.step()).iter().map(|v| (-v).exp()).collect();
        Self {
            e,
            beta_k: assemble_beta_k(spec, grid, rho, gamma),
            shift: shift_curve(spec, grid, gamma),
            k0: spec.k0(),
            dt: grid.step(),
        }
    }

    /// `(E, V, K, X)` of one path from its `log E`.
    pub fn evaluate(&self, log_e: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let exp: Vec<f64> = log_e.iter().map(|l| l.exp()).collect();
        let c: Vec<f64> = (0..exp.len()).map(|k| self.e[k] * self.beta_k[k] / exp[k]).collect();
        let v: Vec<f64> = running_trapezoid(&c, self.dt).iter().map(|i| self.k0 + i).collect();
        let k: Vec<f64> = (0..exp.len()).map(|m| exp[m] * v[m] / self.e[m]).collect();
        let x = k.iter().zip(&self.shift).map(|(k, s)| k - s).collect();
        (exp, v, k, x)
    }
}

fn first_bad(p: usize, x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(node) => Err(Error::NonFinite { path: p, node }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub spec: ModelSpec,
    pub law: LawCurves,
    pub ensemble: Arc<Ensemble>,
}

impl Solution {
    pub(crate) fn coefficients(&self) -> PathCoefficients {
        PathCoefficients::new(&self.spec, self.ensemble.grid(), self.law.rho.values(), self.law.gamma.values())
    }

    pub fn path(&self, p: usize) -> SolutionPath {
        let co = self.coefficients();
        let (exp, v, k, x) = co.evaluate(self.ensemble.log_exp(p));
        SolutionPath { index: p, exp, v, k, x, k0: co.k0 }
    }
}

/// Fixed-point solve for `rho_t = E phi(X_t)`, `Gamma_t = E psi(X_t)` over the ensemble.
pub fn solve_mean_field(spec: &ModelSpec, ensemble: Arc<Ensemble>, tol: f64, max_iter: usize) -> Result<Solution> {
    let grid = *ensemble.grid();
    let n = grid.n();
    if n < 2 {
        return Err(invalid("the solver needs at least two grid steps"));
    }
    let x = spec.x();
    let mut rho = vec![spec.phi.eval(x); n + 1];
    let mut gamma = vec![spec.psi.eval(x); n + 1];
    let mut history = Vec::new();
    for it in 1..=max_iter {
        let co = PathCoefficients::new(spec, &grid, &rho, &gamma);
        check_paths(&co, &ensemble)?;
        let means = slot_means(ensemble.count(), 2 * (n + 1), |p, buf| {
            let (_, _, _, xs) = co.evaluate(ensemble.log_exp(p));
            for (k, xk) in xs.iter().enumerate() {
                buf[k] = spec.phi.eval(*xk);
                buf[n + 1 + k] = spec.psi.eval(*xk);
            }
        });
        let (new_rho, new_gamma) = means.split_at(n + 1);
        let residual = new_rho
            .iter()
            .zip(&rho)
            .chain(new_gamma.iter().zip(&gamma))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        rho = new_rho.to_vec();
        gamma = new_gamma.to_vec();
        history.push(residual);
        if !residual.is_finite() {
            break;
        }
        if residual <= tol {
            let co = PathCoefficients::new(spec, &grid, &rho, &gamma);
            let law = LawCurves {
                rho: GridFunction::new(grid, rho)?,
                gamma: GridFunction::new(grid, gamma)?,
                e: GridFunction::new(grid, co.e)?,
                beta_k: GridFunction::new(grid, co.beta_k)?,
                iterations: it,
                residual,
                history,
            };
            return Ok(Solution { spec: spec.clone(), law, ensemble });
        }
    }
    Err(Error::NonConvergence { iterations: history.len(), residual: *history.last().unwrap_or(&f64::NAN), history })
}

fn check_paths(co: &PathCoefficients, ensemble: &Ensemble) -> Result<()> {
    let bad = (0..ensemble.count()).into_par_iter().find_first(|&p| {
        let (_, _, _, x) = co.evaluate(ensemble.log_exp(p));
        x.iter().any(|v| !v.is_finite())
    });
    match bad {
        Some(p) => first_bad(p, &co.evaluate(ensemble.log_exp(p)).3),
        None => Ok(()),
    }
}

/// Closed form of the linear equation `dY = b(t, rho) Y dt + C Y dW^H`, evaluated
/// independently of the Picard representation: left-point fBm sum, quadratic
/// term from the `H` inner product, trapezoidal drift.
#[derive(Debug, Clone)]
pub struct LinearClosedForm {
    x: f64,
    c_nodes: Vec<f64>,
    drift: Vec<f64>,
    quad: Vec<f64>,
}

impl LinearClosedForm {
    pub fn new(spec: &ModelSpec, law: &LawCurves) -> Result<Self> {
        let grid = *law.grid();
        for i in 0..=grid.n() {
            let t = grid.t(i);
            for l in crate::core_model::law_lattice(spec.x()) {
                if spec.beta.eval(t, l) != 0.0 || spec.a.eval(t, l) != 0.0 {
                    return Err(invalid("linear closed form needs beta = 0 and a = 0"));
                }
            }
        }
        let c = GridFunction::from_fn(grid, |t| spec.c_at(t));
        let quad = (0..=grid.n())
            .map(|m| inner_h(&c.truncated(m), &c.truncated(m), spec.hurst()))
            .collect::<Result<Vec<_>>>()?;
        let b: Vec<f64> = (0..=grid.n()).map(|i| spec.b.eval(grid.t(i), law.rho.values()[i])).collect();
        Ok(Self {
            x: spec.x(),
            c_nodes: c.values().to_vec(),
            drift: running_trapezoid(&b, grid.step()),
            quad,
        })
    }

    pub fn eval(&self, path: &PathBundle) -> Vec<f64> {
        let mut stoch = 0.0;
        (0..self.quad.len())
            .map(|m| {
                if m > 0 {
                    stoch += self.c_nodes[m - 1] * path.dwh[m - 1];
                }
                self.x * (stoch - 0.5 * self.quad[m] + self.drift[m]).exp()
            })
            .collect()
    }
}

pub fn linear_closed_form(spec: &ModelSpec, law: &LawCurves, path: &PathBundle) -> Result<Vec<f64>> {
    Ok(LinearClosedForm::new(spec, law)?.eval(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    KToX,
    XToK,
}

/// `X = K - a(t, Gamma_t)/C_t` and its inverse, nodewise.
pub fn transform_k_x(direction: Direction, values: &[f64], spec: &ModelSpec, law: &LawCurves) -> Vec<f64> {
    let shift = law.shift(spec);
    let sign = match direction {
        Direction::KToX => -1.0,
        Direction::XToK => 1.0,
    };
    values.iter().zip(&shift).map(|(v, s)| v + sign * s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_model::{build_grid, geometric, riccati, LawCoefficient};

    fn ensemble(spec: &ModelSpec, n: usize, count: usize, seed: u64) -> Arc<Ensemble> {
        let src = NoiseSource::new(build_grid(n, 1.0).unwrap(), spec.hurst(), seed).unwrap();
        Arc::new(Ensemble::new(spec, src, count).unwrap())
    }

    #[test]
    fn pure_exponential_is_exact() {
        let spec = ModelSpec::builder("exp", 0.7, 1.3, 0.4).build().unwrap();
        let ens = ensemble(&spec, 64, 40, 2);
        let sol = solve_mean_field(&spec, ens.clone(), 1e-12, 10).unwrap();
        let grid = *ens.grid();
        for p in 0..40 {
            let path = ens.path(p);
            let s = sol.path(p);
            for m in 0..=64 {
                let exact = 1.3 * (0.4 * path.wh[m] - 0.5 * 0.16 * grid.t(m).powf(1.4)).exp();
                assert!((s.x[m] - exact).abs() <= 1e-10 * exact);
            }
        }
    }

    #[test]
    fn law_free_model_needs_one_update() {
        let spec = geometric(0.7, 1.0, 0.3, 0.2).unwrap();
        let sol = solve_mean_field(&spec, ensemble(&spec, 32, 50, 1), 1e-12, 10).unwrap();
        assert_eq!(sol.law.iterations, 2);
        assert_eq!(sol.law.history[1], 0.0);
    }

    #[test]
    fn representation_identity_holds() {
        let spec = riccati(0.7, 0.2, 0.5, 1.0, 0.3).unwrap();
        let sol = solve_mean_field(&spec, ensemble(&spec, 32, 64, 9), 1e-10, 100).unwrap();
        let e = sol.law.e.values();
        for p in 0..8 {
            let s = sol.path(p);
            for m in 0..=32 {
                assert!((e[m] * s.k[m] - s.exp[m] * s.v[m]).abs() <= 1e-14 * s.k[m].abs().max(1.0));
            }
        }
        assert_eq!(e[0], 1.0);
    }

    #[test]
    fn beta_k_vanishes_without_additive_terms() {
        let spec = riccati(0.7, 0.2, 0.5, 1.0, 0.3).unwrap();
        let grid = build_grid(16, 1.0).unwrap();
        let rho = vec![0.2; 17];
        assert!(assemble_beta_k(&spec, &grid, &rho, &rho).iter().all(|v| *v == 0.0));
        // a proportional to C with b = 0: derivative of a constant
        let spec = ModelSpec::builder("prop", 0.7, 1.0, 0.5)
            .additive_noise(LawCoefficient::constant(1.5))
            .build()
            .unwrap();
        assert!(assemble_beta_k(&spec, &grid, &rho, &rho).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn transform_is_an_involution() {
        let spec = ModelSpec::builder("shift", 0.7, 1.0, 0.5)
            .additive_noise(LawCoefficient::constant(0.5))
            .build()
            .unwrap();
        let sol = solve_mean_field(&spec, ensemble(&spec, 16, 20, 4), 1e-12, 50).unwrap();
        let xs: Vec<f64> = (0..=16).map(|i| i as f64 * 0.1).collect();
        let k = transform_k_x(Direction::XToK, &xs, &spec, &sol.law);
        assert!(k.iter().zip(&xs).all(|(k, x)| (k - x - 1.0).abs() < 1e-15));
        let back = transform_k_x(Direction::KToX, &k, &spec, &sol.law);
        assert!(back.iter().zip(&xs).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn riccati_without_interaction_is_exponential_growth() {
        let spec = riccati(0.7, 0.2, 0.5, 0.0, 0.3).unwrap();
        let sol = solve_mean_field(&spec, ensemble(&spec, 32, 20000, 5), 1e-10, 50).unwrap();
        let grid = *sol.ensemble.grid();
        for m in [8, 16, 32] {
            let rho = sol.law.rho.values()[m];
            let exact = 0.2 * (0.5 * grid.t(m)).exp();
            assert!((rho - exact).abs() < 0.01 * exact, "{rho} vs {exact}");
        }
    }

    #[test]
    fn linear_closed_form_rejects_additive_terms() {
        let spec = ModelSpec::builder("shift", 0.7, 1.0, 0.5)
            .additive_noise(LawCoefficient::constant(0.5))
            .build()
            .unwrap();
        let sol = solve_mean_field(&spec, ensemble(&spec, 8, 4, 4), 1e-12, 50).unwrap();
        assert!(LinearClosedForm::new(&spec, &sol.law).is_err());
    }

    #[test]
    fn zero_noise_closed_form_is_deterministic() {
        let spec = ModelSpec::builder("flat", 0.7, 2.0, 0.0)
            .drift(LawCoefficient::constant(0.3))
            .build()
            .unwrap();
        let ens = ensemble(&spec, 16, 3, 4);
        let sol = solve_mean_field(&spec, ens.clone(), 1e-12, 5).unwrap();
        let y = linear_closed_form(&spec, &sol.law, &ens.path(1)).unwrap();
        for (m, v) in y.iter().enumerate() {
            let exact = 2.0 * (0.3 * ens.grid().t(m)).exp();
            assert!((v - exact).abs() < 1e-12 * exact);
        }
    }
}
