//! Malliavin derivatives, the first-variation flow and Bismut-Elworthy-Li weights.
//!
//! Everything is expressed in Wiener coordinates. A path is a function of the
//! increments `dW_j`; `D_s F = dF/d(dW_j)` for `s` in cell `j`, and the
//! divergence of a cellwise direction `u` is
//! `delta(u) = sum_j u_j dW_j - dt sum_j du_j/d(dW_j)`,
//! which satisfies `E[F delta(u)] = E[<DF, u>]` exactly under the Gaussian law
//! of the increments. With `W^H` increments `dW^H = M dW`, the derivative of
//! `K_m` along `dW^H_i` is `e_m^-1 E_m C_i V~_i` (cell values), the grid form of
//! `D^H_r K_t = e_t^-1 E_t C_r e_r K_r E_r^-1`.

use serde::{Deserialize, Serialize};

use crate::core_model::TimeGrid;
use crate::error::{invalid, Error, Result};
use crate::fbm_paths::{compensator, log_exponential, PathBundle};
use crate::frac_ops::{alpha_h, inner_h, GridFunction};
use crate::mf_solver::{running_trapezoid, solve_mean_field, time_derivative, Ensemble, PathCoefficients, Solution};
use crate::stats::{collect_samples, slot_means, Estimate};
use std::sync::Arc;

/// Relative floor on `int V~^2` below which a path counts as degenerate.
pub const DEFAULT_FLOOR: f64 = 1e-12;

/// Payoffs offered by the command line; the library also takes closures through [`Payoff::Custom`].
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payoff {
    Constant { value: f64 },
    Linear,
    Power { exponent: f64 },
    /// `w log(1 + exp((y - strike) / w))`.
    SmoothCall { strike: f64, width: f64 },
    #[serde(skip)]
    Custom(std::sync::Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Payoff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Constant { value } => write!(f, "Constant({value})"),
            Self::Linear => write!(f, "Linear"),
            Self::Power { exponent } => write!(f, "Power({exponent})"),
            Self::SmoothCall { strike, width } => write!(f, "SmoothCall({strike}, {width})"),
            Self::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Payoff {
    pub fn eval(&self, y: f64) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::Linear => y,
            Self::Power { exponent } => y.powf(*exponent),
            Self::SmoothCall { strike, width } => {
                let z = (y - strike) / width;
                // softplus without overflow
                width * (z.max(0.0) + (-z.abs()).exp().ln_1p())
            }
            Self::Custom(f) => f(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeCurves {
    /// `d rho_t / dx`.
    pub d: GridFunction,
    /// `d Gamma_t / dx`.
    pub g: GridFunction,
    /// `R(t) = d_2 b(t, rho_t) D(t)`.
    pub r_big: GridFunction,
    /// `r(t) = d beta_K(t) / dx`.
    pub r_small: GridFunction,
    /// `d/dx (a(t, Gamma_t) / C_t)`.
    pub shift_dx: Vec<f64>,
    /// `dK_0 / dx`.
    pub k0: f64,
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
}

struct FlowTerms {
    r_big: Vec<f64>,
    r_cells: Vec<f64>,
    r_small: Vec<f64>,
    shift_dx: Vec<f64>,
}

fn flow_terms(sol: &Solution, co: &PathCoefficients, d: &[f64], g: &[f64]) -> FlowTerms {
    let spec = &sol.spec;
    let grid = sol.ensemble.grid();
    let rho = sol.law.rho.values();
    let gam = sol.law.gamma.values();
    let nodes = 0..=grid.n();
    let r_big: Vec<f64> = nodes.clone().map(|k| spec.b.d(grid.t(k), rho[k]) * d[k]).collect();
    let shift_dx: Vec<f64> = nodes
        .clone()
        .map(|k| {
            let t = grid.t(k);
            let da = spec.a.d(t, gam[k]);
            if da == 0.0 {
                0.0
            } else {
                da * g[k] / spec.c_at(t)
            }
        })
        .collect();
    let dshift = time_derivative(&shift_dx, grid.step());
    let r_small = nodes
        .map(|k| {
            let t = grid.t(k);
            dshift[k] - r_big[k] * co.shift[k] - spec.b.eval(t, rho[k]) * shift_dx[k]
                + spec.beta.d(t, rho[k]) * d[k]
        })
        .collect();
    let r_cells = r_big.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    FlowTerms { r_big, r_cells, r_small, shift_dx }
}

/// Per-path pieces of the solution and its x-derivative.
#[derive(Debug, Clone)]
pub struct FlowPath {
    pub exp: Vec<f64>,
    pub v: Vec<f64>,
    /// `V~_i = K_0 + dt c_0 / 2 + dt sum_{1<=k<=i} c_k`, the value of `V` paired with cell `i`.
    pub v_cell: Vec<f64>,
    pub k: Vec<f64>,
    pub x: Vec<f64>,
    /// `W_HT(t)`.
    pub w_ht: Vec<f64>,
    /// `M^h_t = e_t^-1 E_t W_HT(t)`.
    pub mh: Vec<f64>,
    /// `<D^H K_t, h>` for the direction with `R_H h = int C^-1 R`.
    pub dk_h: Vec<f64>,
    pub dx_k: Vec<f64>,
    pub dx_x: Vec<f64>,
}

fn flow_path(co: &PathCoefficients, ft: &FlowTerms, dk0: f64, log_e: &[f64]) -> FlowPath {
    let (exp, v, k, x) = co.evaluate(log_e);
    let dt = co.dt;
    let n = exp.len() - 1;
    let v_cell: Vec<f64> = (0..n).map(|i| v[i] + 0.5 * dt * co.e[i] * co.beta_k[i] / exp[i]).collect();
    let y: Vec<f64> = (0..=n).map(|m| co.e[m] * ft.r_small[m] / exp[m]).collect();
    let w_ht: Vec<f64> = running_trapezoid(&y, dt).iter().map(|i| dk0 + i).collect();
    let mut mh = Vec::with_capacity(n + 1);
    let mut dk_h = Vec::with_capacity(n + 1);
    let mut dx_k = Vec::with_capacity(n + 1);
    let mut dx_x = Vec::with_capacity(n + 1);
    let mut pair = 0.0;
    for m in 0..=n {
        if m > 0 {
            pair += dt * ft.r_cells[m - 1] * v_cell[m - 1];
        }
        let f = exp[m] / co.e[m];
        mh.push(f * w_ht[m]);
        dk_h.push(f * pair);
        dx_k.push(f * (w_ht[m] + pair));
        dx_x.push(f * (w_ht[m] + pair) - ft.shift_dx[m]);
    }
    FlowPath { exp, v, v_cell, k, x, w_ht, mh, dk_h, dx_k, dx_x }
}

/// Picard loop for `(D, G) = (d rho / dx, d Gamma / dx)` over the solution's ensemble.
pub fn law_derivative_solve(sol: &Solution, tol: f64, max_iter: usize) -> Result<DerivativeCurves> {
    let spec = &sol.spec;
    let grid = *sol.ensemble.grid();
    let n = grid.n();
    let co = sol.coefficients();
    let dk0 = spec.dk0();
    let x = spec.x();
    let mut d = vec![spec.phi.d(x); n + 1];
    let mut g = vec![spec.psi.d(x); n + 1];
    let mut history = Vec::new();
    for it in 1..=max_iter {
        let ft = flow_terms(sol, &co, &d, &g);
        let means = slot_means(sol.ensemble.count(), 2 * (n + 1), |p, buf| {
            let fp = flow_path(&co, &ft, dk0, sol.ensemble.log_exp(p));
            for k in 0..=n {
                buf[k] = spec.phi.d(fp.x[k]) * fp.dx_x[k];
                buf[n + 1 + k] = spec.psi.d(fp.x[k]) * fp.dx_x[k];
            }
        });
        let (nd, ng) = means.split_at(n + 1);
        let residual = nd
            .iter()
            .zip(&d)
            .chain(ng.iter().zip(&g))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        d = nd.to_vec();
        g = ng.to_vec();
        history.push(residual);
        if !residual.is_finite() {
            break;
        }
        if residual <= tol {
            let ft = flow_terms(sol, &co, &d, &g);
            return Ok(DerivativeCurves {
                d: GridFunction::new(grid, d)?,
                g: GridFunction::new(grid, g)?,
                r_big: GridFunction::new(grid, ft.r_big)?,
                r_small: GridFunction::new(grid, ft.r_small)?,
                shift_dx: ft.shift_dx,
                k0: dk0,
                iterations: it,
                residual,
                history,
            });
        }
    }
    Err(Error::NonConvergence { iterations: history.len(), residual: *history.last().unwrap_or(&f64::NAN), history })
}

/// Solution and derivative curves evaluated on one path.
pub fn flow(sol: &Solution, dc: &DerivativeCurves, p: usize) -> FlowPath {
    let co = sol.coefficients();
    let ft = flow_terms(sol, &co, dc.d.values(), dc.g.values());
    flow_path(&co, &ft, dc.k0, sol.ensemble.log_exp(p))
}

/// `M^h_t = e_t^-1 E_t (k_0 + int_0^t r(s) e_s E_s^-1 ds)`.
pub fn flow_mh(sol: &Solution, dc: &DerivativeCurves, p: usize, m: usize) -> f64 {
    flow(sol, dc, p).mh[m]
}

/// `W_HT(t) = k_0 + int_0^t e_s r(s) E_s^-1 ds`.
pub fn w_ht(sol: &Solution, dc: &DerivativeCurves, p: usize, m: usize) -> f64 {
    flow(sol, dc, p).w_ht[m]
}

fn a_coefficient(dc: &DerivativeCurves, m: usize) -> f64 {
    dc.shift_dx[m]
}

/// `U(t) = W_HT(t) - (d_x a(t, Gamma_t) / C_t) e_t E_t^-1`.
pub fn u_t(sol: &Solution, dc: &DerivativeCurves, p: usize, m: usize) -> f64 {
    let fp = flow(sol, dc, p);
    let a = a_coefficient(dc, m);
    fp.w_ht[m] - a * sol.law.e.values()[m] / fp.exp[m]
}

/// `D^H_r K_t` on one path, stored through its rank-one factors.
#[derive(Debug, Clone, PartialEq)]
pub struct MalliavinSlice {
    /// `e_t^-1 E_t` per node.
    pub factor: Vec<f64>,
    pub c_cells: Vec<f64>,
    pub v_cell: Vec<f64>,
}

impl MalliavinSlice {
    /// Value on cell `i` of `D^H K_{t_m}`; zero for `i >= m`.
    pub fn get(&self, i: usize, m: usize) -> f64 {
        if i >= m {
            0.0
        } else {
            self.factor[m] * self.c_cells[i] * self.v_cell[i]
        }
    }

    pub fn row(&self, m: usize) -> Vec<f64> {
        (0..self.c_cells.len()).map(|i| self.get(i, m)).collect()
    }

    /// `sum_i D^H_i K_m l_i`: pairing with cell increments `l` of `R_H h`.
    pub fn directional(&self, m: usize, l: &[f64]) -> f64 {
        (0..m).map(|i| self.get(i, m) * l[i]).sum()
    }
}

pub fn malliavin_dk(sol: &Solution, p: usize) -> MalliavinSlice {
    let co = sol.coefficients();
    let (exp, v, _, _) = co.evaluate(sol.ensemble.log_exp(p));
    let n = exp.len() - 1;
    MalliavinSlice {
        factor: (0..=n).map(|m| exp[m] / co.e[m]).collect(),
        c_cells: sol.ensemble.c_cells().to_vec(),
        v_cell: (0..n).map(|i| v[i] + 0.5 * co.dt * co.e[i] * co.beta_k[i] / exp[i]).collect(),
    }
}

/// `D^phi_s F = alpha_H int D^H_r F |r - s|^(2H-2) dr` at the nodes, for cellwise `D^H F`.
pub fn dphi_from_dh(cells: &[f64], grid: &TimeGrid, hurst: f64) -> Result<GridFunction> {
    if cells.len() != grid.n() {
        return Err(invalid("one value per cell expected"));
    }
    let g1 = 2.0 * hurst - 1.0;
    let dt = grid.step();
    // int over a cell of |r - s|^(2H-2) for s at a node d cells away
    let prim = |z: f64| z.signum() * z.abs().powf(g1) / g1;
    let values = (0..=grid.n())
        .map(|k| {
            cells
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let lo = i as f64 - k as f64;
                    c * (prim(lo + 1.0) - prim(lo))
                })
                .sum::<f64>()
                * alpha_h(hurst)
                * dt.powf(g1)
        })
        .collect();
    GridFunction::new(*grid, values)
}

/// Direction `V_2,t(r) = C_r^-1 1_[0,t](r) V~_r / int_0^t V~^2` as cell values.
pub fn direction_v2(slice: &MalliavinSlice, m: usize, dt: f64, k_floor: f64) -> Result<Vec<f64>> {
    let s: f64 = slice.v_cell[..m].iter().map(|v| v * v * dt).sum();
    let vmax = slice.v_cell[..m].iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = (k_floor * m as f64 * dt * vmax * vmax).max(f64::MIN_POSITIVE);
    if !(s > floor) {
        return Err(Error::DegenerateDirection { value: s, floor });
    }
    Ok((0..slice.c_cells.len())
        .map(|i| if i < m { slice.v_cell[i] / (slice.c_cells[i] * s) } else { 0.0 })
        .collect())
}

/// `int V_2,t(r) D^H_r K_t dr`; equals `e_t^-1 E_t` on every non-degenerate path.
pub fn pairing(slice: &MalliavinSlice, v2: &[f64], m: usize, dt: f64) -> f64 {
    (0..m).map(|i| v2[i] * slice.get(i, m) * dt).sum()
}

/// `F sum_j f(s_j) dW_j - dt sum_j f(s_j) D_j F` with `D_j F = dF/d(dW_j)`.
pub fn skorokhod_delta(f: &GridFunction, big_f: f64, d_f: &[f64], path: &PathBundle) -> f64 {
    let dt = path.grid().step();
    let vals = &f.values()[..f.support()];
    let ito: f64 = vals.iter().zip(&path.dw).map(|(a, b)| a * b).sum();
    let corr: f64 = vals.iter().zip(d_f).map(|(a, b)| a * b).sum();
    big_f * ito - dt * corr
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightBreakdown {
    pub term_h: f64,
    pub term_w: f64,
    pub term_corr: f64,
    pub total: f64,
}

/// Deterministic data shared by all weights at one time node.
#[derive(Debug, Clone)]
pub struct WeightContext<'a> {
    sol: &'a Solution,
    m: usize,
    co: PathCoefficients,
    comp: Vec<f64>,
    r_small: Vec<f64>,
    dk0: f64,
    a_coef: f64,
    u_h: Vec<f64>,
    k_floor: f64,
}

impl<'a> WeightContext<'a> {
    pub fn new(sol: &'a Solution, dc: &DerivativeCurves, m: usize, k_floor: f64) -> Result<Self> {
        let n = sol.ensemble.grid().n();
        if m == 0 || m > n {
            return Err(invalid(format!("weight node must lie in 1..={n}, got {m}")));
        }
        let kernel = sol.ensemble.source().kernel();
        let c = sol.ensemble.c_cells();
        let rb = dc.r_big.values();
        let ell: Vec<f64> = (0..n).map(|i| if i < m { 0.5 * (rb[i] + rb[i + 1]) / c[i] } else { 0.0 }).collect();
        Ok(Self {
            sol,
            m,
            co: sol.coefficients(),
            comp: compensator(kernel, c),
            r_small: dc.r_small.values().to_vec(),
            dk0: dc.k0,
            a_coef: a_coefficient(dc, m),
            u_h: kernel.solve(&ell, m),
            k_floor,
        })
    }

    pub fn node(&self) -> usize {
        self.m
    }

    /// Deterministic part of the direction.
    pub fn u_h(&self) -> &[f64] {
        &self.u_h
    }

    /// `X_m`, the weight, and the full direction `u_h + U g_w` for given increments.
    pub fn evaluate(&self, dw: &[f64]) -> Result<(f64, WeightBreakdown, Vec<f64>)> {
        let m = self.m;
        let co = &self.co;
        let dt = co.dt;
        let kernel = self.sol.ensemble.source().kernel();
        let c = self.sol.ensemble.c_cells();
        let dwh = kernel.increments(dw);
        let log_e = log_exponential(&dwh, c, &self.comp);
        let (exp, v, _, x) = co.evaluate(&log_e);
        let cc: Vec<f64> = (0..=m).map(|k| co.e[k] * co.beta_k[k] / exp[k]).collect();
        let vt: Vec<f64> = (0..m).map(|i| v[i] + 0.5 * dt * cc[i]).collect();
        let s: f64 = vt.iter().map(|v| v * v * dt).sum();
        let vmax = vt.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let floor = (self.k_floor * m as f64 * dt * vmax * vmax).max(f64::MIN_POSITIVE);
        if !(s > floor) {
            return Err(Error::DegenerateDirection { value: s, floor });
        }
        let v2: Vec<f64> = (0..m).map(|i| vt[i] / (c[i] * s)).collect();
        let g_w = kernel.solve(&v2, m);
        // W_HT(t_m) and U
        let y: Vec<f64> = (0..=m).map(|k| co.e[k] * self.r_small[k] / exp[k]).collect();
        let omega = |k: usize| if k == 0 || k == m { 0.5 } else { 1.0 };
        let w_ht = self.dk0 + dt * (0..=m).map(|k| omega(k) * y[k]).sum::<f64>();
        let em = co.e[m] / exp[m];
        let u = w_ht - self.a_coef * em;
        // trace of the direction's derivative: only int V~^2 reacts on the diagonal
        let mut prefix = vec![0.0; m + 1];
        for i in 0..m {
            prefix[i + 1] = prefix[i] + vt[i];
        }
        let total_v = prefix[m];
        let trace: f64 = (1..m).map(|k| cc[k] * prefix[k] * (total_v - prefix[k])).sum::<f64>() * 2.0 * dt * dt / (s * s);
        // sum_l V2_l dU/d(dW^H_l)
        let du = -dt * (0..=m).map(|k| omega(k) * y[k] * prefix[k.min(m)] / s).sum::<f64>()
            + self.a_coef * em * total_v / s;
        let term_h: f64 = self.u_h.iter().zip(dw).map(|(a, b)| a * b).sum();
        let ito_w: f64 = g_w.iter().zip(dw).map(|(a, b)| a * b).sum();
        let term_w = u * ito_w;
        let term_corr = -dt * u * trace - dt * du;
        let dir = self.u_h.iter().zip(&g_w).map(|(h, g)| h + u * g).collect();
        Ok((x[m], WeightBreakdown { term_h, term_w, term_corr, total: term_h + term_w + term_corr }, dir))
    }

    pub fn weight(&self, p: usize) -> Result<(f64, WeightBreakdown)> {
        let dw = self.sol.ensemble.source().dw(p);
        self.evaluate(&dw).map(|(x, w, _)| (x, w)).map_err(|e| match e {
            Error::NonFinite { node, .. } => Error::NonFinite { path: p, node },
            other => other,
        })
    }
}

pub fn bel_weight(sol: &Solution, dc: &DerivativeCurves, p: usize, m: usize) -> Result<WeightBreakdown> {
    WeightContext::new(sol, dc, m, DEFAULT_FLOOR)?.weight(p).map(|(_, w)| w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BelEstimate {
    pub estimate: Estimate,
    pub excluded_fraction: f64,
    pub warning: Option<String>,
}

/// Per-path samples `Phi(X_m) * weight`, zero on degenerate paths.
pub fn bel_samples(ctx: &WeightContext, payoffs: &[Payoff]) -> Result<(Vec<Vec<f64>>, usize)> {
    let count = ctx.sol.ensemble.count();
    let rows: Vec<Result<Option<(f64, f64)>>> = collect_samples(count, |p| match ctx.weight(p) {
        Ok((x, w)) => Ok(Some((x, w.total))),
        Err(Error::DegenerateDirection { .. }) => Ok(None),
        Err(e) => Err(e),
    });
    let mut excluded = 0;
    let mut out = vec![Vec::with_capacity(count); payoffs.len()];
    for r in rows {
        match r? {
            Some((x, w)) => {
                for (o, f) in out.iter_mut().zip(payoffs) {
                    o.push(f.eval(x) * w);
                }
            }
            None => {
                excluded += 1;
                out.iter_mut().for_each(|o| o.push(0.0));
            }
        }
    }
    Ok((out, excluded))
}

fn excluded_warning(fraction: f64) -> Option<String> {
    (fraction > 0.1).then(|| format!("{:.1}% of paths have a degenerate direction", 100.0 * fraction))
}

/// `d/dx E[Phi(X_{t_m})]` as the mean of `Phi(X) * weight`.
pub fn bel_estimate(sol: &Solution, dc: &DerivativeCurves, payoff: &Payoff, m: usize) -> Result<BelEstimate> {
    let ctx = WeightContext::new(sol, dc, m, DEFAULT_FLOOR)?;
    let (samples, excluded) = bel_samples(&ctx, std::slice::from_ref(payoff))?;
    let fraction = excluded as f64 / sol.ensemble.count() as f64;
    Ok(BelEstimate {
        estimate: Estimate::from_samples(&samples[0]),
        excluded_fraction: fraction,
        warning: excluded_warning(fraction),
    })
}

/// Solutions at `x - eps` and `x + eps` on the same ensemble.
pub fn shifted_solutions(sol: &Solution, eps: f64, tol: f64, max_iter: usize) -> Result<(Solution, Solution)> {
    if !(eps > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let x = sol.spec.x();
    let lo = solve_mean_field(&sol.spec.with_x(x - eps)?, sol.ensemble.clone(), tol, max_iter)?;
    let hi = solve_mean_field(&sol.spec.with_x(x + eps)?, sol.ensemble.clone(), tol, max_iter)?;
    Ok((lo, hi))
}

/// Central difference `(E Phi(X^{x+eps}) - E Phi(X^{x-eps})) / 2 eps`, pathwise on common noise.
pub fn fd_from_solutions(lo: &Solution, hi: &Solution, eps: f64, payoff: &Payoff, m: usize) -> Estimate {
    let clo = lo.coefficients();
    let chi = hi.coefficients();
    let samples = collect_samples(lo.ensemble.count(), |p| {
        let a = payoff.eval(chi.evaluate(hi.ensemble.log_exp(p)).3[m]);
        let b = payoff.eval(clo.evaluate(lo.ensemble.log_exp(p)).3[m]);
        (a - b) / (2.0 * eps)
    });
    Estimate::from_samples(&samples)
}

pub fn fd_oracle(sol: &Solution, payoff: &Payoff, eps: f64, m: usize, tol: f64, max_iter: usize) -> Result<Estimate> {
    let (lo, hi) = shifted_solutions(sol, eps, tol, max_iter)?;
    Ok(fd_from_solutions(&lo, &hi, eps, payoff, m))
}

/// Three-point Richardson combination of central differences at `eps` and `eps/2`.
pub fn fd_richardson(sol: &Solution, payoff: &Payoff, eps: f64, m: usize, tol: f64, max_iter: usize) -> Result<Estimate> {
    let (lo, hi) = shifted_solutions(sol, eps, tol, max_iter)?;
    let (lo2, hi2) = shifted_solutions(sol, 0.5 * eps, tol, max_iter)?;
    let (c1, c2) = (lo.coefficients(), hi.coefficients());
    let (c3, c4) = (lo2.coefficients(), hi2.coefficients());
    let ens = &sol.ensemble;
    let samples = collect_samples(ens.count(), |p| {
        let l = ens.log_exp(p);
        let f = |c: &PathCoefficients| payoff.eval(c.evaluate(l).3[m]);
        let wide = (f(&c2) - f(&c1)) / (2.0 * eps);
        let narrow = (f(&c4) - f(&c3)) / eps;
        (4.0 * narrow - wide) / 3.0
    });
    Ok(Estimate::from_samples(&samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Cell increments of `R_H h(t) = <1_[0,t], h>_H`.
pub fn rh_increments(h: &GridFunction, hurst: f64) -> Result<Vec<f64>> {
    let grid = *h.grid();
    let rh = (0..=grid.n())
        .map(|k| inner_h(&GridFunction::indicator(grid, k), h, hurst))
        .collect::<Result<Vec<_>>>()?;
    Ok(rh.windows(2).map(|w| w[1] - w[0]).collect())
}

/// `<D^H K_m, h>` against a one-sided perturbation of the increments along `h`, law frozen.
pub fn directional_grad_check(sol: &Solution, p: usize, ell: &[f64], eps: f64, m: usize) -> GradCheck {
    let ens = &sol.ensemble;
    let kernel = ens.source().kernel();
    let slice = malliavin_dk(sol, p);
    let analytic = slice.directional(m, ell);
    let co = sol.coefficients();
    let comp = compensator(kernel, ens.c_cells());
    let dw = ens.source().dw(p);
    let shift = kernel.solve(ell, ens.grid().n());
    let k_at = |dw: &[f64]| co.evaluate(&log_exponential(&kernel.increments(dw), ens.c_cells(), &comp)).2[m];
    let moved: Vec<f64> = dw.iter().zip(&shift).map(|(a, b)| a + eps * b).collect();
    let numeric = (k_at(&moved) - k_at(&dw)) / eps;
    let rel_error = if analytic == 0.0 { numeric.abs() } else { ((numeric - analytic) / analytic).abs() };
    GradCheck { analytic, numeric, rel_error }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferCheck {
    /// Central difference in `x` of `K_m`, re-solving the law.
    pub finite_difference: Estimate,
    /// `M^h + <D^H K, h>`.
    pub transfer: Estimate,
    /// Pathwise difference of the two.
    pub paired: Estimate,
    pub z_pooled: f64,
}

pub fn transfer_check(sol: &Solution, dc: &DerivativeCurves, eps: f64, m: usize, tol: f64, max_iter: usize) -> Result<TransferCheck> {
    let (lo, hi) = shifted_solutions(sol, eps, tol, max_iter)?;
    let (clo, chi) = (lo.coefficients(), hi.coefficients());
    let co = sol.coefficients();
    let ft = flow_terms(sol, &co, dc.d.values(), dc.g.values());
    let ens = &sol.ensemble;
    let rows: Vec<(f64, f64)> = collect_samples(ens.count(), |p| {
        let l = ens.log_exp(p);
        let fd = (chi.evaluate(l).2[m] - clo.evaluate(l).2[m]) / (2.0 * eps);
        let fp = flow_path(&co, &ft, dc.k0, l);
        (fd, fp.mh[m] + fp.dk_h[m])
    });
    let fd: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let an: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let diff: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    let finite_difference = Estimate::from_samples(&fd);
    let transfer = Estimate::from_samples(&an);
    Ok(TransferCheck {
        finite_difference,
        transfer,
        paired: Estimate::from_samples(&diff),
        z_pooled: finite_difference.z_distance(&transfer),
    })
}

/// Convenience: solve, differentiate and build an ensemble in one call.
pub fn solve_with_derivatives(
    spec: &crate::core_model::ModelSpec,
    ensemble: Arc<Ensemble>,
    tol: f64,
    max_iter: usize,
) -> Result<(Solution, DerivativeCurves)> {
    let sol = solve_mean_field(spec, ensemble, tol, max_iter)?;
    let dc = law_derivative_solve(&sol, tol, max_iter)?;
    Ok((sol, dc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_model::{affine, build_grid, geometric, riccati, AffineParams, ModelSpec};
    use crate::fbm_paths::NoiseSource;

    fn solved(spec: &ModelSpec, n: usize, count: usize) -> (Solution, DerivativeCurves) {
        let src = NoiseSource::new(build_grid(n, 1.0).unwrap(), spec.hurst(), 17).unwrap();
        let ens = Arc::new(Ensemble::new(spec, src, count).unwrap());
        solve_with_derivatives(spec, ens, 1e-12, 200).unwrap()
    }

    fn affine_spec() -> ModelSpec {
        let p = AffineParams { b0: 0.1, b1: -0.2, beta0: 0.05, beta1: 0.1, a0: 0.02, a1: 0.05, c0: 0.3, c1: 0.1 };
        affine(0.7, 1.0, p, 1.0).unwrap()
    }

    #[test]
    fn geometric_derivative_is_proportional_to_path() {
        let spec = geometric(0.7, 1.0, 0.2, 0.3).unwrap();
        let (sol, dc) = solved(&spec, 16, 8);
        assert_eq!(dc.k0, 1.0);
        assert!(dc.r_small.values().iter().all(|v| *v == 0.0));
        let s = malliavin_dk(&sol, 3);
        let path = sol.path(3);
        for m in [4, 16] {
            for i in 0..16 {
                let expected = if i < m { 0.3 * path.x[m] } else { 0.0 };
                assert!((s.get(i, m) - expected).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn pairing_identity_is_exact() {
        for spec in [riccati(0.7, 0.2, 0.5, 1.0, 0.3).unwrap(), affine_spec()] {
            let (sol, _) = solved(&spec, 32, 20);
            let dt = sol.ensemble.grid().step();
            for p in 0..20 {
                let s = malliavin_dk(&sol, p);
                for m in [1, 10, 32] {
                    let v2 = direction_v2(&s, m, dt, DEFAULT_FLOOR).unwrap();
                    let lhs = pairing(&s, &v2, m, dt);
                    assert!((lhs / s.factor[m] - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_direction_is_degenerate() {
        let s = MalliavinSlice { factor: vec![1.0; 5], c_cells: vec![1.0; 4], v_cell: vec![0.0; 4] };
        assert!(matches!(direction_v2(&s, 4, 0.25, DEFAULT_FLOOR), Err(Error::DegenerateDirection { .. })));
    }

    #[test]
    fn flow_identities() {
        let spec = affine_spec();
        let (sol, dc) = solved(&spec, 16, 10);
        let fp = flow(&sol, &dc, 2);
        assert!((fp.mh[0] - dc.k0).abs() < 1e-15);
        let e = sol.law.e.values();
        for m in 0..=16 {
            assert!((fp.w_ht[m] * fp.exp[m] / e[m] - fp.mh[m]).abs() < 1e-14 * fp.mh[m].abs().max(1.0));
        }
        assert!((dc.d.values()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn law_free_derivative_converges_immediately() {
        let spec = geometric(0.7, 1.0, 0.2, 0.3).unwrap();
        let (_, dc) = solved(&spec, 16, 8);
        assert_eq!(dc.iterations, 2);
    }

    #[test]
    fn gradient_check_is_first_order() {
        let spec = affine_spec();
        let (sol, _) = solved(&spec, 32, 4);
        let grid = *sol.ensemble.grid();
        let h = GridFunction::from_fn(grid, |t| 1.0 + t.sin());
        let ell = rh_increments(&h, 0.7).unwrap();
        let errs: Vec<f64> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&eps| directional_grad_check(&sol, 1, &ell, eps, 32).rel_error)
            .collect();
        assert!(errs[2] < 1e-4, "{errs:?}");
        assert!(errs[0] / errs[1] > 5.0 && errs[1] / errs[2] > 5.0, "{errs:?}");
        let zero = directional_grad_check(&sol, 1, &vec![0.0; 32], 1e-5, 32);
        assert_eq!(zero.analytic, 0.0);
        assert_eq!(zero.numeric, 0.0);
    }

    /// The divergence correction must equal `dt * sum_j d u_j / d(dW_j)` of the
    /// assembled direction; checked against finite differences of the direction.
    #[test]
    fn divergence_correction_matches_direction_derivative() {
        let spec = affine_spec();
        let (sol, dc) = solved(&spec, 12, 4);
        let ctx = WeightContext::new(&sol, &dc, 9, DEFAULT_FLOOR).unwrap();
        let dt = sol.ensemble.grid().step();
        let dw = sol.ensemble.source().dw(2);
        let (_, wb, dir) = ctx.evaluate(&dw).unwrap();
        let h = 1e-6;
        let mut trace = 0.0;
        for j in 0..dw.len() {
            let mut up = dw.clone();
            up[j] += h;
            let mut dn = dw.clone();
            dn[j] -= h;
            let (_, _, du) = ctx.evaluate(&up).unwrap();
            let (_, _, dd) = ctx.evaluate(&dn).unwrap();
            trace += (du[j] - dd[j]) / (2.0 * h);
        }
        let ito: f64 = dir.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((wb.term_h + wb.term_w - ito).abs() < 1e-10 * ito.abs().max(1.0));
        assert!((wb.term_corr + dt * trace).abs() < 1e-6 * wb.term_corr.abs().max(1e-3), "{} vs {}", wb.term_corr, -dt * trace);
    }

    /// `E[<DF, u>]`-free check: the direction reproduces the flow derivative pathwise.
    #[test]
    fn direction_reproduces_flow_derivative() {
        let spec = affine_spec();
        let (sol, dc) = solved(&spec, 16, 3);
        let m = 12;
        let ctx = WeightContext::new(&sol, &dc, m, DEFAULT_FLOOR).unwrap();
        let kernel = sol.ensemble.source().kernel();
        let dt = sol.ensemble.grid().step();
        for p in 0..3 {
            let dw = sol.ensemble.source().dw(p);
            let (_, _, dir) = ctx.evaluate(&dw).unwrap();
            let slice = malliavin_dk(&sol, p);
            let mdir: Vec<f64> = (0..16).map(|i| kernel.increment_row(i).iter().zip(&dir).map(|(a, b)| a * b).sum()).collect();
            let lhs = dt * slice.directional(m, &mdir);
            let fp = flow(&sol, &dc, p);
            assert!((lhs - fp.dx_x[m]).abs() < 1e-10 * fp.dx_x[m].abs(), "{lhs} vs {}", fp.dx_x[m]);
        }
    }

    #[test]
    fn payoff_catalog() {
        assert_eq!(Payoff::Constant { value: 2.0 }.eval(5.0), 2.0);
        assert_eq!(Payoff::Power { exponent: 2.0 }.eval(3.0), 9.0);
        let call = Payoff::SmoothCall { strike: 1.0, width: 0.1 };
        assert!((call.eval(3.0) - 2.0).abs() < 1e-8);
        assert!(call.eval(-50.0) >= 0.0 && call.eval(-50.0) < 1e-100);
    }

    #[test]
    fn dphi_of_indicator_derivative() {
        let grid = build_grid(16, 1.0).unwrap();
        let hurst = 0.75;
        let cells: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
        let d = dphi_from_dh(&cells, &grid, hurst).unwrap();
        let t = grid.t(8);
        for k in [0, 3, 8, 12, 16] {
            let s = grid.t(k);
            // alpha_H int_0^t |r - s|^(2H-2) dr
            let exact = hurst * ((t - s).signum() * (t - s).abs().powf(0.5) + s.powf(0.5));
            assert!((d.values()[k] - exact).abs() < 1e-12, "{k}");
        }
        let zero = dphi_from_dh(&[0.0; 16], &grid, hurst).unwrap();
        assert!(zero.values().iter().all(|v| *v == 0.0));
    }
}
