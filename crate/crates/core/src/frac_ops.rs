//! Discretized fractional calculus on a [`TimeGrid`].
//!
//! Grid functions are piecewise linear between nodes. A function may be cut at a
//! node (`support`): it then jumps to zero there, which is how indicators
//! `1_[0,t]` and products `gamma 1_[0,t]` are represented exactly.
//!
//! Every singular integral is done by product integration: the kernel moment
//! over a cell is exact and only the smooth factor is interpolated.

use std::sync::OnceLock;

use gauss_quad::{GaussJacobi, GaussLegendre};
use serde::{Deserialize, Serialize};
use statrs::function::beta::{beta, beta_reg};
use statrs::function::gamma::gamma;

use crate::core_model::TimeGrid;
use crate::error::{invalid, Error, Result};

/// Nodes and weights of a rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub(crate) struct Rule {
    pairs: Vec<(f64, f64)>,
    a: f64,
    b: f64,
}

impl Rule {
    pub(crate) fn legendre(deg: usize) -> Self {
        let q = GaussLegendre::new(deg.try_into().expect("degree > 0"));
        Self { pairs: q.as_node_weight_pairs().to_vec(), a: 0.0, b: 0.0 }
    }

    /// Weight `(1 - x)^a (1 + x)^b`. Even degrees only: the backing
    /// eigen-solver pins the middle node of odd rules to zero.
    pub(crate) fn jacobi(deg: usize, a: f64, b: f64) -> Self {
        if a == 0.0 && b == 0.0 {
            return Self::legendre(deg);
        }
        let deg = deg + deg % 2;
        let q = GaussJacobi::new(
            deg.try_into().expect("degree > 0"),
            a.try_into().expect("exponent > -1"),
            b.try_into().expect("exponent > -1"),
        );
        Self { pairs: q.as_node_weight_pairs().to_vec(), a, b }
    }

    /// `int_lo^hi (hi - y)^a (y - lo)^b f(y) dy`.
    pub(crate) fn integrate(&self, lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
        let half = 0.5 * (hi - lo);
        let scale = half.powf(1.0 + self.a + self.b);
        scale * self.pairs.iter().map(|&(x, w)| w * f(lo + half * (1.0 + x))).sum::<f64>()
    }
}

fn legendre10() -> &'static Rule {
    static RULE: OnceLock<Rule> = OnceLock::new();
    RULE.get_or_init(|| Rule::legendre(10))
}

pub fn alpha_h(hurst: f64) -> f64 {
    hurst * (2.0 * hurst - 1.0)
}

/// Normalizing constant `c_H = sqrt(H (2H - 1) / B(2 - 2H, H - 1/2))`.
pub fn c_h(hurst: f64) -> f64 {
    (alpha_h(hurst) / beta(2.0 - 2.0 * hurst, hurst - 0.5)).sqrt()
}

fn check_hurst(hurst: f64) -> Result<()> {
    if !(hurst > 0.5 && hurst < 1.0) {
        return Err(invalid(format!("Hurst index must lie in (1/2, 1), got {hurst}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: TimeGrid,
    values: Vec<f64>,
    support: usize,
}

impl GridFunction {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n() + 1 {
            return Err(invalid(format!(
                "grid function needs {} values, got {}",
                grid.n() + 1,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("grid function value at node {i} is not finite")));
        }
        let support = grid.n();
        Ok(Self { grid, values, support })
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..=grid.n()).map(|i| f(grid.t(i))).collect();
        Self { grid, values, support: grid.n() }
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        Self { grid, values: vec![0.0; grid.n() + 1], support: grid.n() }
    }

    /// `1_[0, t_k]`.
    pub fn indicator(grid: TimeGrid, k: usize) -> Self {
        Self::from_fn(grid, |_| 1.0).truncated(k)
    }

    /// `f 1_[0, t_k]`: zero after node `k`, keeping the left limit at `t_k`.
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.min(self.support);
        let mut values = self.values.clone();
        values[k + 1..].iter_mut().for_each(|v| *v = 0.0);
        Self { grid: self.grid, values, support: k }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn support(&self) -> usize {
        self.support
    }

    /// `a f + b g`; both operands must share grid and support.
    pub fn combine(a: f64, f: &Self, b: f64, g: &Self) -> Result<Self> {
        if f.grid != g.grid || f.support != g.support {
            return Err(invalid("grid functions differ in grid or support"));
        }
        let values = f.values.iter().zip(&g.values).map(|(x, y)| a * x + b * y).collect();
        Ok(Self { grid: f.grid, values, support: f.support })
    }

    pub fn map(&self, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..=self.grid.n())
            .map(|i| if i <= self.support { f(self.grid.t(i), self.values[i]) } else { 0.0 })
            .collect();
        Self { grid: self.grid, values, support: self.support }
    }

    /// Endpoint values of each cell, zero past the support.
    pub(crate) fn cells(&self) -> Vec<(f64, f64)> {
        (0..self.grid.n())
            .map(|j| if j < self.support { (self.values[j], self.values[j + 1]) } else { (0.0, 0.0) })
            .collect()
    }

    /// Trapezoidal integral over `[0, T]`.
    pub fn integral(&self) -> f64 {
        let dt = self.grid.step();
        self.cells().iter().map(|(l, r)| 0.5 * (l + r) * dt).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

fn mirror_cells(cells: &[(f64, f64)]) -> Vec<(f64, f64)> {
    cells.iter().rev().map(|&(l, r)| (r, l)).collect()
}

/// Unit-step moments of `tau^(alpha-1)` over `[d-1, d]` against `1` and `(d - tau)`.
fn power_moments(alpha: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut p0 = vec![0.0; n + 1];
    let mut p1 = vec![0.0; n + 1];
    for d in 1..=n {
        let (b, a) = (d as f64, (d - 1) as f64);
        p0[d] = (b.powf(alpha) - a.powf(alpha)) / alpha;
        p1[d] = b * p0[d] - (b.powf(alpha + 1.0) - a.powf(alpha + 1.0)) / (alpha + 1.0);
    }
    (p0, p1)
}

fn left_integral_cells(cells: &[(f64, f64)], alpha: f64, dt: f64) -> Vec<f64> {
    let n = cells.len();
    let (p0, p1) = power_moments(alpha, n);
    let scale = dt.powf(alpha) / gamma(alpha);
    let mut out = vec![0.0; n + 1];
    for k in 1..=n {
        let mut acc = 0.0;
        for (j, &(fl, fr)) in cells[..k].iter().enumerate() {
            let d = k - j;
            acc += fl * (p0[d] - p1[d]) + fr * p1[d];
        }
        out[k] = scale * acc;
    }
    out
}

/// Marchaud form; `nodal[k]` is the value at the evaluation point. Node 0 is set to 0.
///
/// The cell touching the boundary is modelled as `g0 + (g1 - g0) (y/dt)^alpha`,
/// the leading behaviour of `I^alpha` of smooth data; other cells are linear.
fn left_marchaud_cells(cells: &[(f64, f64)], nodal: &[f64], alpha: f64, dt: f64) -> Vec<f64> {
    let n = cells.len();
    let mut e0 = vec![0.0; n + 1];
    let mut e1 = vec![0.0; n + 1];
    let mut q = vec![0.0; n + 1];
    let rule = Rule::jacobi(8, 0.0, alpha);
    for d in 2..=n {
        let (b, a) = (d as f64, (d - 1) as f64);
        e0[d] = (a.powf(-alpha) - b.powf(-alpha)) / alpha;
        e1[d] = (b.powf(1.0 - alpha) - a.powf(1.0 - alpha)) / (1.0 - alpha);
        q[d] = rule.integrate(0.0, 1.0, |r| (b - r).powf(-1.0 - alpha));
    }
    // int_0^1 (1 - r^alpha) (1 - r)^(-1-alpha) dr
    let c1 = (gamma(1.0 + alpha) * gamma(1.0 - alpha) - 1.0) / alpha;
    let g = gamma(1.0 - alpha);
    let mut out = vec![0.0; n + 1];
    for k in 1..=n {
        let v = nodal[k];
        let (fl, fr) = cells[k - 1];
        let mut acc = if (v - fr).abs() > 0.0 {
            f64::INFINITY
        } else if k == 1 {
            (fr - fl) * c1
        } else {
            (fr - fl) / (1.0 - alpha)
        };
        if k >= 2 {
            let (g0, g1) = cells[0];
            acc += (v - g0) * e0[k] - (g1 - g0) * q[k];
        }
        for (j, &(fl, fr)) in cells[..k - 1].iter().enumerate().skip(1) {
            let d = k - j;
            let df = fr - fl;
            acc += (v - fl - d as f64 * df) * e0[d] + df * e1[d];
        }
        let tk = k as f64 * dt;
        out[k] = (v * tk.powf(-alpha) + alpha * dt.powf(-alpha) * acc) / g;
    }
    out
}

/// Riemann-Liouville integral `I^alpha` by product integration.
pub fn rl_integral(f: &GridFunction, alpha: f64, side: Side) -> Result<GridFunction> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid(format!("integral order must lie in (0, 1], got {alpha}")));
    }
    let dt = f.grid.step();
    let values = match side {
        Side::Left => left_integral_cells(&f.cells(), alpha, dt),
        Side::Right => {
            let mut v = left_integral_cells(&mirror_cells(&f.cells()), alpha, dt);
            v.reverse();
            v
        }
    };
    Ok(GridFunction { grid: f.grid, values, support: f.grid.n() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlDerivative {
    pub values: GridFunction,
    /// Boundary node whose value is set to 0 by convention.
    pub flagged_node: Option<usize>,
}

/// Fractional derivative `D^alpha` in Marchaud form.
///
/// The boundary node (0 for left, n for right) carries the `x^-alpha`
/// singularity and is set to 0 and flagged.
pub fn rl_derivative(f: &GridFunction, alpha: f64, side: Side) -> Result<RlDerivative> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("derivative order must lie in (0, 1), got {alpha}")));
    }
    let dt = f.grid.step();
    let nodal: Vec<f64> = (0..=f.grid.n()).map(|i| if i <= f.support { f.values[i] } else { 0.0 }).collect();
    let (values, node) = match side {
        Side::Left => (left_marchaud_cells(&f.cells(), &nodal, alpha, dt), 0),
        Side::Right => {
            let rev: Vec<f64> = nodal.iter().rev().copied().collect();
            let mut v = left_marchaud_cells(&mirror_cells(&f.cells()), &rev, alpha, dt);
            v.reverse();
            (v, f.grid.n())
        }
    };
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(invalid(format!("fractional derivative is infinite at node {i} (jump in the data)")));
    }
    let flagged_node = (nodal[node] != 0.0).then_some(node);
    Ok(RlDerivative { values: GridFunction { grid: f.grid, values, support: f.grid.n() }, flagged_node })
}

/// `I^alpha_{0+}(y^e f)` with the first cell integrated exactly against `y^e`.
fn left_integral_weighted(f: &GridFunction, alpha: f64, e: f64) -> Vec<f64> {
    let grid = f.grid;
    let dt = grid.step();
    let cells = f.cells();
    let mut weighted: Vec<(f64, f64)> = cells
        .iter()
        .enumerate()
        .map(|(j, &(l, r))| (l * grid.t(j).powf(e), r * grid.t(j + 1).powf(e)))
        .collect();
    weighted[0] = (0.0, 0.0);
    let mut out = left_integral_cells(&weighted, alpha, dt);
    let (fl, fr) = cells[0];
    let lin = |y: f64| fl + (fr - fl) * y / dt;
    // both endpoint weights: a pair of beta functions
    let scale = dt.powf(alpha + e);
    out[1] += scale * (fl * beta(alpha, e + 1.0) + (fr - fl) * beta(alpha, e + 2.0)) / gamma(alpha);
    let one = Rule::jacobi(16, 0.0, e);
    for (k, o) in out.iter_mut().enumerate().skip(2) {
        let tk = grid.t(k);
        *o += one.integrate(0.0, dt, |y| (tk - y).powf(alpha - 1.0) * lin(y)) / gamma(alpha);
    }
    out
}

/// Pointwise Volterra kernel `K_H(t, s)`; zero for `s >= t`.
pub fn kernel_value(t: f64, s: f64, hurst: f64) -> f64 {
    if s >= t || s <= 0.0 {
        return if s <= 0.0 && t > 0.0 { f64::INFINITY } else { 0.0 };
    }
    let k = hurst - 0.5;
    // w = (u - s)^k absorbs the endpoint singularity
    let top = (t - s).powf(k);
    let out = quadrature::integrate(|w: f64| (s + w.powf(1.0 / k)).powf(k), 0.0, top, 1e-14);
    c_h(hurst) * s.powf(-k) * out.integral / k
}

/// Lower-triangular discretization of the fBm kernel.
///
/// Row `k` holds the cell averages `(1/dt) int_{s_j}^{s_{j+1}} K_H(t_k, s) ds`,
/// rescaled so that `sum_j row_k[j]^2 dt = t_k^{2H}`; the scaling keeps the
/// grid variance of `W^H` exact, which makes Gaussian exponentials built from
/// the matrix agree with their continuous closed forms. `increment` rows are
/// differences of consecutive rows, so `dW^H_i = sum_j M_ij dW_j`.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    grid: TimeGrid,
    hurst: f64,
    rows: Vec<f64>,
    incr: Vec<f64>,
    scale: Vec<f64>,
}

fn tri(i: usize) -> usize {
    i * (i + 1) / 2
}

/// Unit-grid increment moment `int_k^{k+1} int_j^{j+1} c_H (u/s)^k (u-s)^(k-1) 1_{s<u} ds du`.
struct IncrementMoments {
    kappa: f64,
    ch: f64,
    bfull: f64,
    near: Rule,
    far: Rule,
    smooth: Rule,
}

impl IncrementMoments {
    fn new(hurst: f64) -> Self {
        let kappa = hurst - 0.5;
        Self {
            kappa,
            ch: c_h(hurst),
            bfull: beta(1.0 - kappa, kappa),
            near: Rule::jacobi(14, 0.0, kappa),
            far: Rule::legendre(12),
            smooth: Rule::legendre(6),
        }
    }

    /// `1 - I_y(1 - k, k)`, computed through the reflection to avoid cancellation.
    fn upper(&self, y: f64) -> f64 {
        if y <= 0.0 {
            1.0
        } else if y >= 1.0 {
            0.0
        } else {
            beta_reg(self.kappa, 1.0 - self.kappa, 1.0 - y)
        }
    }

    /// `int_l^{l+1} u^k (1 - I_{m/u}) du` with `m <= l`; singular only when `m == l`.
    fn tail(&self, l: usize, m: usize) -> f64 {
        let k = self.kappa;
        let (lo, hi) = (l as f64, l as f64 + 1.0);
        if m == 0 {
            return (hi.powf(k + 1.0) - lo.powf(k + 1.0)) / (k + 1.0);
        }
        let mf = m as f64;
        if m == l {
            // (u - m)^k factors out of 1 - I_{m/u}
            self.near.integrate(lo, hi, |u| {
                let w = u - mf;
                u.powf(k) * self.upper(mf / u) / w.powf(k)
            })
        } else {
            self.far.integrate(lo, hi, |u| u.powf(k) * self.upper(mf / u))
        }
    }

    fn get(&self, k: usize, j: usize) -> f64 {
        let kap = self.kappa;
        let cb = self.ch * self.bfull;
        if j == 0 {
            if k <= 1 {
                return cb * (self.tail(k, 0) - if k == 1 { self.tail(1, 1) } else { 0.0 });
            }
            let (lo, hi) = (k as f64, k as f64 + 1.0);
            return cb * self.far.integrate(lo, hi, |u| u.powf(kap) * beta_reg(1.0 - kap, kap, 1.0 / u));
        }
        if k == j {
            return cb * self.tail(j, j);
        }
        if k == j + 1 {
            return cb * (self.tail(k, j) - self.tail(k, k));
        }
        let rule = if k - j < 8 { &self.far } else { &self.smooth };
        let (jl, kl) = (j as f64, k as f64);
        let inner = |u: f64| {
            rule.integrate(jl, jl + 1.0, |s| (u / s).powf(kap) * (u - s).powf(kap - 1.0))
        };
        self.ch * rule.integrate(kl, kl + 1.0, inner)
    }
}

impl KernelMatrix {
    pub fn new(grid: TimeGrid, hurst: f64) -> Result<Self> {
        check_hurst(hurst)?;
        let n = grid.n();
        let dt = grid.step();
        let moments = IncrementMoments::new(hurst);
        let unit = dt.powf(hurst - 0.5);
        // raw increment rows (unit grid), then cumulative rows
        let mut raw_incr = vec![0.0; tri(n)];
        for i in 0..n {
            for j in 0..=i {
                raw_incr[tri(i) + j] = unit * moments.get(i, j);
            }
        }
        let mut rows = vec![0.0; tri(n + 1)];
        for k in 1..=n {
            for j in 0..k {
                let prev = if j < k - 1 { rows[tri(k - 1) + j] } else { 0.0 };
                rows[tri(k) + j] = prev + raw_incr[tri(k - 1) + j];
            }
        }
        let mut scale = vec![1.0; n + 1];
        for k in 1..=n {
            let row = &mut rows[tri(k)..tri(k) + k];
            let var: f64 = row.iter().map(|v| v * v * dt).sum();
            let s = (grid.t(k).powf(2.0 * hurst) / var).sqrt();
            row.iter_mut().for_each(|v| *v *= s);
            scale[k] = s;
        }
        let mut incr = vec![0.0; tri(n)];
        for i in 0..n {
            for j in 0..=i {
                let next = rows[tri(i + 1) + j];
                let cur = if j < i { rows[tri(i) + j] } else { 0.0 };
                incr[tri(i) + j] = next - cur;
            }
        }
        Ok(Self { grid, hurst, rows, incr, scale })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    /// Row `k` (length `k`): weights of `dW_0..dW_{k-1}` in `W^H(t_k)`.
    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[tri(k)..tri(k) + k]
    }

    /// Increment row `i` (length `i + 1`).
    pub fn increment_row(&self, i: usize) -> &[f64] {
        &self.incr[tri(i)..tri(i) + i + 1]
    }

    /// Variance-matching factor applied to row `k`.
    pub fn row_scale(&self, k: usize) -> f64 {
        self.scale[k]
    }

    /// `(dW^H_0, ..., dW^H_{n-1})` from Wiener increments.
    pub fn increments(&self, dw: &[f64]) -> Vec<f64> {
        (0..self.grid.n())
            .map(|i| self.increment_row(i).iter().zip(dw).map(|(m, w)| m * w).sum())
            .collect()
    }

    /// Solves `sum_{j<=i} M_ij u_j = rhs_i` for `i < m`; entries from `m` on are zero.
    pub fn solve(&self, rhs: &[f64], m: usize) -> Vec<f64> {
        let n = self.grid.n();
        let mut u = vec![0.0; n];
        for i in 0..m {
            let row = self.increment_row(i);
            let acc: f64 = row[..i].iter().zip(&u[..i]).map(|(a, b)| a * b).sum();
            u[i] = (rhs[i] - acc) / row[i];
        }
        u
    }

    /// Discrete adjoint of `gamma 1_[0, t_m]` for cell values `gamma`:
    /// `kappa_j = sum_{i<m} gamma_i M_ij`, so that `sum_j kappa_j dW_j = sum_{i<m} gamma_i dW^H_i`.
    pub fn adjoint(&self, gamma_cells: &[f64], m: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.n()];
        for (i, g) in gamma_cells.iter().enumerate().take(m) {
            for (o, v) in out.iter_mut().zip(self.increment_row(i)) {
                *o += g * v;
            }
        }
        out
    }

    /// All adjoint rows `kappa_m`, `m = 0..=n`, for cell values `gamma`.
    pub fn adjoint_rows(&self, gamma_cells: &[f64]) -> Vec<Vec<f64>> {
        let n = self.grid.n();
        let mut rows = Vec::with_capacity(n + 1);
        let mut cur = vec![0.0; n];
        rows.push(cur.clone());
        for (i, g) in gamma_cells.iter().enumerate().take(n) {
            for (o, v) in cur.iter_mut().zip(self.increment_row(i)) {
                *o += g * v;
            }
            rows.push(cur.clone());
        }
        rows
    }
}

pub fn kernel_kh(grid: TimeGrid, hurst: f64) -> Result<KernelMatrix> {
    KernelMatrix::new(grid, hurst)
}

/// `|t - s|^(2H - 2)`; infinite on the diagonal. The factor `alpha_H` is left to callers.
pub fn phi_kernel(t: f64, s: f64, hurst: f64) -> f64 {
    if t == s {
        return f64::INFINITY;
    }
    (t - s).abs().powf(2.0 * hurst - 2.0)
}

/// `R_H(t, s) = (t^2H + s^2H - |t - s|^2H) / 2`.
pub fn cov_rh(t: f64, s: f64, hurst: f64) -> f64 {
    let h2 = 2.0 * hurst;
    0.5 * (t.abs().powf(h2) + s.abs().powf(h2) - (t - s).abs().powf(h2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorKind {
    KH,
    KHStar,
    KHInv,
    KHStarInv,
}

/// Operator result `s^weight_exponent * regular(s)`.
///
/// `values` evaluates the product at the nodes. When the weight is singular at
/// node 0 the value there is set to 0 and the node is flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorOutput {
    pub values: GridFunction,
    pub regular: GridFunction,
    pub weight_exponent: f64,
    pub flagged_node: Option<usize>,
}

impl OperatorOutput {
    fn assemble(regular: Vec<f64>, e: f64, grid: TimeGrid, mut flagged: Option<usize>) -> Result<Self> {
        let mut values: Vec<f64> = regular.iter().enumerate().map(|(i, r)| r * grid.t(i).powf(e)).collect();
        if e < 0.0 {
            if regular[0] != 0.0 && flagged.is_none() {
                flagged = Some(0);
            }
            values[0] = 0.0;
        }
        if let Some(i) = values.iter().chain(&regular).position(|v| !v.is_finite()) {
            return Err(invalid(format!("operator output is not finite (entry {i})")));
        }
        Ok(Self {
            values: GridFunction::new(grid, values)?,
            regular: GridFunction::new(grid, regular)?,
            weight_exponent: e,
            flagged_node: flagged,
        })
    }
}

/// The fBm operator family for `H > 1/2`, with `k = H - 1/2` and `cG = c_H Gamma(k)`:
///
/// - `K_H f(t) = int_0^t K_H(t, s) f(s) ds = cG I^1 [s^k I^k (y^-k f)]`
/// - `K_H^-1 F = s^k D^k (y^-k F') / cG`
/// - `K_H^* f = cG s^-k I^k_{T-} (y^k f)`
/// - `(K_H^*)^-1 f = s^-k D^k_{T-} (y^k f) / cG`
pub fn apply_operator(kind: OperatorKind, f: &GridFunction, hurst: f64) -> Result<OperatorOutput> {
    check_hurst(hurst)?;
    let grid = f.grid;
    let n = grid.n();
    let k = hurst - 0.5;
    let cg = c_h(hurst) * gamma(k);
    match kind {
        OperatorKind::KHStar => {
            let g = f.map(|t, v| t.powf(k) * v);
            let a = rl_integral(&g, k, Side::Right)?;
            let regular = a.values.iter().map(|v| cg * v).collect();
            OperatorOutput::assemble(regular, -k, grid, None)
        }
        OperatorKind::KHStarInv => {
            let g = f.map(|t, v| t.powf(k) * v);
            let d = rl_derivative(&g, k, Side::Right)?;
            let regular = d.values.values.iter().map(|v| v / cg).collect();
            OperatorOutput::assemble(regular, -k, grid, d.flagged_node)
        }
        OperatorKind::KH => {
            let inner = left_integral_weighted(f, k, -k);
            let outer: Vec<f64> = inner.iter().enumerate().map(|(i, v)| cg * grid.t(i).powf(k) * v).collect();
            let outer = GridFunction { grid, values: outer, support: n };
            let regular = rl_integral(&outer, 1.0, Side::Left)?.values;
            OperatorOutput::assemble(regular, 0.0, grid, None)
        }
        OperatorKind::KHInv => {
            let dt = grid.step();
            let slopes: Vec<f64> = f.cells().iter().map(|(l, r)| (r - l) / dt).collect();
            let big = beta(1.0 - k, 1.0 - k);
            let g1 = gamma(1.0 - k);
            // I^{1-k}(y^-k F') at the nodes; cellwise-constant F' makes each cell an incomplete beta
            let mut g = vec![0.0; n + 1];
            for (kk, gk) in g.iter_mut().enumerate().skip(1) {
                let tk = grid.t(kk);
                let mut prev = 0.0;
                let mut acc = 0.0;
                for (j, s) in slopes.iter().enumerate().take(kk) {
                    let z = (j + 1) as f64 / kk as f64;
                    let cur = if j + 1 == kk { 1.0 } else { beta_reg(1.0 - k, 1.0 - k, z) };
                    acc += s * (cur - prev);
                    prev = cur;
                }
                *gk = tk.powf(1.0 - 2.0 * k) * big * acc / g1;
            }
            let mut d = vec![0.0; n + 1];
            for i in 1..n {
                d[i] = (g[i + 1] - g[i - 1]) / (2.0 * dt);
            }
            d[n] = (3.0 * g[n] - 4.0 * g[n - 1] + g[n - 2]) / (2.0 * dt);
            let regular = d.iter().enumerate().map(|(i, v)| grid.t(i).powf(k) * v / cg).collect();
            OperatorOutput::assemble(regular, 0.0, grid, Some(0))
        }
    }
}

/// Cell-pair moments `int_0^1 int_0^1 xi^p eta^q |d + xi - eta|^g` for `(p, q)` in
/// `(0,0), (1,0), (0,1), (1,1)`.
fn pair_moments(d: i64, g: f64) -> [f64; 4] {
    // weights of the diagonal variable s = xi - eta, on s < 0 and s >= 0
    const NEG: [[f64; 4]; 4] = [
        [1.0, 1.0, 0.0, 0.0],
        [0.5, 1.0, 0.5, 0.0],
        [0.5, 0.0, -0.5, 0.0],
        [1.0 / 3.0, 0.5, 0.0, -1.0 / 6.0],
    ];
    const POS: [[f64; 4]; 4] = [
        [1.0, -1.0, 0.0, 0.0],
        [0.5, 0.0, -0.5, 0.0],
        [0.5, -1.0, 0.5, 0.0],
        [1.0 / 3.0, -0.5, 0.0, 1.0 / 6.0],
    ];
    let poly = |c: &[f64; 4], s: f64| c[0] + s * (c[1] + s * (c[2] + s * c[3]));
    let mut out = [0.0; 4];
    if d.abs() >= 2 {
        let rule = legendre10();
        let df = d as f64;
        for p in 0..4 {
            out[p] = rule.integrate(-1.0, 0.0, |s| poly(&NEG[p], s) * (df + s).abs().powf(g))
                + rule.integrate(0.0, 1.0, |s| poly(&POS[p], s) * (df + s).abs().powf(g));
        }
        return out;
    }
    // exact: expand w(y - d) in y and integrate y^i |y|^g on a one-signed interval
    let df = d as f64;
    for p in 0..4 {
        for (c, s0, s1) in [(&NEG[p], -1.0, 0.0), (&POS[p], 0.0, 1.0)] {
            let mut q = [0.0; 4];
            // w(y - d) = sum_i c_i (y - d)^i
            let binom = [[1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], [1.0, 2.0, 1.0, 0.0], [1.0, 3.0, 3.0, 1.0]];
            for i in 0..4 {
                for m in 0..=i {
                    q[m] += c[i] * binom[i][m] * (-df).powi((i - m) as i32);
                }
            }
            let (y0, y1) = (df + s0, df + s1);
            let (z0, z1, sign) = if y1 <= 0.0 { (-y1, -y0, -1.0) } else { (y0, y1, 1.0) };
            let mut acc = 0.0;
            for (m, qm) in q.iter().enumerate() {
                let e = m as f64 + g + 1.0;
                let coef = qm * if sign < 0.0 && m % 2 == 1 { -1.0 } else { 1.0 };
                acc += coef * (z1.powf(e) - z0.powf(e)) / e;
            }
            out[p] += acc;
        }
    }
    out
}

/// `<u, v>_H = alpha_H int int u(r) v(s) |r - s|^(2H-2) dr ds`, exact for piecewise-linear data.
pub fn inner_h(u: &GridFunction, v: &GridFunction, hurst: f64) -> Result<f64> {
    check_hurst(hurst)?;
    if u.grid != v.grid {
        return Err(invalid("grid functions live on different grids"));
    }
    let n = u.grid.n() as i64;
    let g = 2.0 * hurst - 2.0;
    let moments: Vec<[f64; 4]> = (-(n - 1)..n).map(|d| pair_moments(d, g)).collect();
    let cu = u.cells();
    let cv = v.cells();
    let mut acc = 0.0;
    for (a, &(ul, ur)) in cu.iter().enumerate().take(u.support) {
        let (ua, ub) = (ul, ur - ul);
        for (b, &(vl, vr)) in cv.iter().enumerate().take(v.support) {
            let (va, vb) = (vl, vr - vl);
            let m = &moments[(a as i64 - b as i64 + n - 1) as usize];
            acc += ua * va * m[0] + ub * va * m[1] + ua * vb * m[2] + ub * vb * m[3];
        }
    }
    Ok(alpha_h(hurst) * u.grid.step().powf(2.0 * hurst) * acc)
}

/// `int_0^T s^(e1+e2) a(s) b(s) ds` for two operator outputs, exact against the weight.
pub fn l2_inner(a: &OperatorOutput, b: &OperatorOutput) -> Result<f64> {
    let grid = a.regular.grid;
    if grid != b.regular.grid {
        return Err(invalid("operator outputs live on different grids"));
    }
    let e = a.weight_exponent + b.weight_exponent;
    let dt = grid.step();
    let ca = a.regular.cells();
    let cb = b.regular.cells();
    let rule = legendre10();
    let mut acc = 0.0;
    for (j, (&(al, ar), &(bl, br))) in ca.iter().zip(&cb).enumerate() {
        let (da, db) = (ar - al, br - bl);
        let mu = |p: i32| -> f64 {
            if j == 0 {
                1.0 / (e + p as f64 + 1.0)
            } else {
                rule.integrate(0.0, 1.0, |x| (j as f64 + x).powf(e) * x.powi(p))
            }
        };
        let (m0, m1, m2) = (mu(0), mu(1), mu(2));
        acc += al * bl * m0 + (al * db + da * bl) * m1 + da * db * m2;
    }
    Ok(dt.powf(e + 1.0) * acc)
}

/// `g_0 = int_0^1 (r^(1/2-H) - 1) / (1 - r)^(1/2+H) dr`.
pub fn g0_constant(hurst: f64) -> Result<f64> {
    check_hurst(hurst)?;
    let k = hurst - 0.5;
    let left = quadrature::integrate(|r: f64| (r.powf(-k) - 1.0) / (1.0 - r).powf(1.0 + k), 0.0, 0.5, 1e-15);
    // near r = 1 write r = 1 - w and keep the numerator free of cancellation
    let right = quadrature::integrate(|w: f64| (-k * (-w).ln_1p()).exp_m1() / w.powf(1.0 + k), 0.0, 0.5, 1e-15);
    let total = left.integral + right.integral;
    if !total.is_finite() {
        return Err(Error::InvalidParameter(format!("g0 quadrature failed for H = {hurst}")));
    }
    Ok(total)
}
