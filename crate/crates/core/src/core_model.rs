//! Time grids, model specifications and assumption probes.
//!
//! A model is
//!
//! ```text
//! dX_t = (b(t, rho_t) X_t + beta(t, rho_t)) dt + (C_t X_t + a(t, Gamma_t)) dW^H_t,
//! rho_t = E phi(X_t),   Gamma_t = E psi(X_t),   X_0 = x,
//! ```
//!
//! with coefficient functions supplied as shared closures together with their
//! derivative in the law argument.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Uniform grid `t_i = i T / n` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    n: usize,
    horizon: f64,
}

pub fn build_grid(n: usize, horizon: f64) -> Result<TimeGrid> {
    if n < 2 {
        return Err(invalid(format!("grid needs at least 2 steps, got {n}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid(format!("horizon must be positive, got {horizon}")));
    }
    Ok(TimeGrid { n, horizon })
}

impl TimeGrid {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.n as f64
    }

    pub fn t(&self, i: usize) -> f64 {
        if i == self.n {
            self.horizon
        } else {
            i as f64 * self.horizon / self.n as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n).map(|i| self.t(i)).collect()
    }

    /// Index of the node closest to `t`.
    pub fn node_at(&self, t: f64) -> usize {
        ((t / self.step()).round().max(0.0) as usize).min(self.n)
    }
}

pub type LawFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A coefficient `f(t, l)` of time and a law scalar, with `df/dl`.
#[derive(Clone)]
pub struct LawCoefficient {
    pub value: LawFn,
    pub d_law: LawFn,
}

impl LawCoefficient {
    pub fn new(
        value: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        d_law: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { value: Arc::new(value), d_law: Arc::new(d_law) }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_, _| c, |_, _| 0.0)
    }

    /// `c0 + c1 * l`
    pub fn affine(c0: f64, c1: f64) -> Self {
        Self::new(move |_, l| c0 + c1 * l, move |_, _| c1)
    }

    pub fn eval(&self, t: f64, l: f64) -> f64 {
        (self.value)(t, l)
    }

    pub fn d(&self, t: f64, l: f64) -> f64 {
        (self.d_law)(t, l)
    }
}

/// A map `f(y)` of the state with its derivative.
#[derive(Clone)]
pub struct StateMap {
    pub value: ScalarFn,
    pub deriv: ScalarFn,
}

impl StateMap {
    pub fn new(
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        deriv: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { value: Arc::new(value), deriv: Arc::new(deriv) }
    }

    pub fn identity() -> Self {
        Self::new(|y| y, |_| 1.0)
    }

    pub fn square() -> Self {
        Self::new(|y| y * y, |y| 2.0 * y)
    }

    pub fn eval(&self, y: f64) -> f64 {
        (self.value)(y)
    }

    pub fn d(&self, y: f64) -> f64 {
        (self.deriv)(y)
    }
}

#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    hurst: f64,
    x: f64,
    pub b: LawCoefficient,
    pub beta: LawCoefficient,
    pub a: LawCoefficient,
    pub c: TimeFn,
    pub phi: StateMap,
    pub psi: StateMap,
    pub c_min: f64,
    pub alpha0: f64,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("hurst", &self.hurst)
            .field("x", &self.x)
            .field("c_min", &self.c_min)
            .field("alpha0", &self.alpha0)
            .finish_non_exhaustive()
    }
}

fn check_hurst(hurst: f64) -> Result<()> {
    if !(hurst > 0.5 && hurst < 1.0) {
        return Err(invalid(format!("Hurst index must lie in (1/2, 1), got {hurst}")));
    }
    Ok(())
}

impl ModelSpec {
    /// Starts from the pure exponential model `dX = C X dW^H` with `C = c`.
    pub fn builder(name: &str, hurst: f64, x: f64, c: f64) -> ModelBuilder {
        ModelBuilder {
            spec: ModelSpec {
                name: name.to_string(),
                hurst,
                x,
                b: LawCoefficient::constant(0.0),
                beta: LawCoefficient::constant(0.0),
                a: LawCoefficient::constant(0.0),
                c: Arc::new(move |_| c),
                phi: StateMap::identity(),
                psi: StateMap::identity(),
                c_min: c.abs(),
                alpha0: 1.0,
            },
        }
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    /// Same model started from a different initial value.
    pub fn with_x(&self, x: f64) -> Result<Self> {
        if !(x > 0.0 && x.is_finite()) {
            return Err(invalid(format!("initial value must be positive, got {x}")));
        }
        let mut spec = self.clone();
        spec.x = x;
        Ok(spec)
    }

    pub fn c_at(&self, t: f64) -> f64 {
        (self.c)(t)
    }

    /// `K_0 = x + a(0, psi(x)) / C_0`.
    pub fn k0(&self) -> f64 {
        let a = self.a.eval(0.0, self.psi.eval(self.x));
        if a == 0.0 {
            self.x
        } else {
            self.x + a / self.c_at(0.0)
        }
    }

    /// `dK_0/dx = 1 + d_2 a(0, psi(x)) psi'(x) / C_0`.
    pub fn dk0(&self) -> f64 {
        let g0 = self.psi.eval(self.x);
        let da = self.a.d(0.0, g0);
        if da == 0.0 {
            1.0
        } else {
            1.0 + da * self.psi.d(self.x) / self.c_at(0.0)
        }
    }

    /// True when b, beta and a ignore the law arguments.
    pub fn law_free(&self, grid: &TimeGrid) -> bool {
        let lattice = law_lattice(self.x);
        (0..=grid.n()).all(|i| {
            let t = grid.t(i);
            lattice.iter().all(|&l| {
                self.b.d(t, l) == 0.0 && self.beta.d(t, l) == 0.0 && self.a.d(t, l) == 0.0
            })
        })
    }
}

pub struct ModelBuilder {
    spec: ModelSpec,
}

impl ModelBuilder {
    pub fn drift(mut self, b: LawCoefficient) -> Self {
        self.spec.b = b;
        self
    }

    pub fn additive_drift(mut self, beta: LawCoefficient) -> Self {
        self.spec.beta = beta;
        self
    }

    pub fn additive_noise(mut self, a: LawCoefficient) -> Self {
        self.spec.a = a;
        self
    }

    /// Time-dependent multiplicative noise coefficient and its lower bound `c_min`.
    pub fn noise(mut self, c: impl Fn(f64) -> f64 + Send + Sync + 'static, c_min: f64) -> Self {
        self.spec.c = Arc::new(c);
        self.spec.c_min = c_min;
        self
    }

    pub fn law_maps(mut self, phi: StateMap, psi: StateMap) -> Self {
        self.spec.phi = phi;
        self.spec.psi = psi;
        self
    }

    pub fn holder_order(mut self, alpha0: f64) -> Self {
        self.spec.alpha0 = alpha0;
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        let s = self.spec;
        check_hurst(s.hurst)?;
        if !(s.x > 0.0 && s.x.is_finite()) {
            return Err(invalid(format!("initial value must be positive, got {}", s.x)));
        }
        if !(s.alpha0 > s.hurst - 0.5 && s.alpha0 <= 1.0) {
            return Err(invalid(format!(
                "Holder order {} must lie in (H - 1/2, 1]",
                s.alpha0
            )));
        }
        if !(s.c_min >= 0.0) {
            return Err(invalid("c_min must be non-negative"));
        }
        Ok(s)
    }
}

/// `b = mu` (law free), `C = alpha`: geometric fBm.
pub fn geometric(hurst: f64, x: f64, mu: f64, alpha: f64) -> Result<ModelSpec> {
    ModelSpec::builder("geometric", hurst, x, alpha)
        .drift(LawCoefficient::constant(mu))
        .build()
}

/// `b = mu - q rho`, `rho = E X`, `C = alpha`: the mean-reverting volatility model.
pub fn riccati(hurst: f64, x: f64, mu: f64, q: f64, alpha: f64) -> Result<ModelSpec> {
    ModelSpec::builder("riccati", hurst, x, alpha)
        .drift(LawCoefficient::affine(mu, -q))
        .build()
}

/// Parameters of the affine catalog model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub b0: f64,
    pub b1: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub a0: f64,
    pub a1: f64,
    pub c0: f64,
    pub c1: f64,
}

/// `b = b0 + b1 rho`, `beta = beta0 + beta1 rho`, `a = a0 + a1 Gamma`, `C = c0 + c1 t`,
/// with `rho = E X` and `Gamma = E X`.
pub fn affine(hurst: f64, x: f64, p: AffineParams, horizon: f64) -> Result<ModelSpec> {
    let c_end = p.c0 + p.c1 * horizon;
    let c_min = if p.c0.signum() == c_end.signum() { p.c0.abs().min(c_end.abs()) } else { 0.0 };
    ModelSpec::builder("affine", hurst, x, p.c0)
        .drift(LawCoefficient::affine(p.b0, p.b1))
        .additive_drift(LawCoefficient::affine(p.beta0, p.beta1))
        .additive_noise(LawCoefficient::affine(p.a0, p.a1))
        .noise(move |t| p.c0 + p.c1 * t, c_min)
        .build()
}

pub const LAW_LATTICE_POINTS: usize = 41;

/// Equispaced probe values over `[-5|x|, 5|x|]`.
pub fn law_lattice(x: f64) -> Vec<f64> {
    let half = 5.0 * x.abs();
    (0..LAW_LATTICE_POINTS)
        .map(|i| -half + 2.0 * half * i as f64 / (LAW_LATTICE_POINTS - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    pub overall: bool,
}

impl ValidationReport {
    pub fn from_checks(checks: Vec<Check>) -> Self {
        let overall = checks.iter().all(|c| c.pass);
        Self { checks, overall }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn sup<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    values.into_iter().fold(0.0, |m: f64, v| if v.is_nan() { f64::NAN } else { m.max(v) })
}

/// Probes the standing assumptions on grid nodes and the law lattice.
///
/// Failures are report entries. The supremum of `|b|` is reported with an
/// infinite threshold: boundedness of `b` is measured, never enforced.
pub fn validate_model(spec: &ModelSpec, grid: &TimeGrid) -> ValidationReport {
    let lattice = law_lattice(spec.x);
    let ts = grid.nodes();
    let horizon = grid.horizon();
    let mut checks = Vec::new();

    let finite = ts.iter().all(|&t| {
        spec.c_at(t).is_finite()
            && lattice.iter().all(|&l| {
                [
                    spec.b.eval(t, l),
                    spec.b.d(t, l),
                    spec.beta.eval(t, l),
                    spec.beta.d(t, l),
                    spec.a.eval(t, l),
                    spec.a.d(t, l),
                    spec.phi.eval(l),
                    spec.phi.d(l),
                    spec.psi.eval(l),
                    spec.psi.d(l),
                ]
                .iter()
                .all(|v| v.is_finite())
            })
    });
    checks.push(Check {
        name: "finite_coefficients".into(),
        pass: finite,
        measured: if finite { 1.0 } else { 0.0 },
        threshold: 1.0,
    });

    let c_floor = ts.iter().map(|&t| spec.c_at(t).abs()).fold(f64::INFINITY, f64::min);
    checks.push(Check {
        name: "noise_invertible".into(),
        pass: c_floor > 0.0 && c_floor >= spec.c_min,
        measured: c_floor,
        threshold: spec.c_min,
    });

    let b_sup = sup(ts.iter().flat_map(|&t| lattice.iter().map(move |&l| (t, l))).map(|(t, l)| spec.b.eval(t, l).abs()));
    checks.push(Check {
        name: "drift_sup".into(),
        pass: b_sup.is_finite(),
        measured: b_sup,
        threshold: f64::INFINITY,
    });

    let a_sup = sup(ts.iter().flat_map(|&t| lattice.iter().map(move |&l| (t, l))).map(|(t, l)| spec.a.eval(t, l).abs()));
    let a_tilde = a_sup * (horizon * b_sup).exp();
    checks.push(Check {
        name: "additive_noise_bounded".into(),
        pass: a_tilde.is_finite(),
        measured: a_tilde,
        threshold: f64::INFINITY,
    });

    let growth = sup(ts.iter().flat_map(|&t| lattice.iter().map(move |&l| (t, l))).map(|(t, l)| {
        spec.beta.eval(t, l).abs() / (1.0 + l.abs())
    }));
    checks.push(Check {
        name: "additive_drift_linear_growth".into(),
        pass: growth.is_finite(),
        measured: growth,
        threshold: f64::INFINITY,
    });

    let window = horizon / 8.0;
    let inv: Vec<f64> = ts.iter().map(|&t| 1.0 / spec.c_at(t)).collect();
    let mut holder: f64 = 0.0;
    for i in 0..ts.len() {
        for j in (i + 1)..ts.len() {
            let dt = ts[j] - ts[i];
            if dt > window + 1e-12 * horizon {
                break;
            }
            let q = (inv[j] - inv[i]).abs() / dt.powf(spec.alpha0);
            holder = if q.is_nan() { f64::NAN } else { holder.max(q) };
        }
    }
    checks.push(Check {
        name: "inverse_noise_holder".into(),
        pass: holder.is_finite(),
        measured: holder,
        threshold: f64::INFINITY,
    });

    let dt = grid.step();
    let mut ratio_slope: f64 = 0.0;
    for &l in &lattice {
        for i in 0..grid.n() {
            let (t0, t1) = (ts[i], ts[i + 1]);
            let r0 = spec.a.eval(t0, l) / spec.c_at(t0);
            let r1 = spec.a.eval(t1, l) / spec.c_at(t1);
            let s = ((r1 - r0) / dt).abs();
            ratio_slope = if s.is_nan() { f64::NAN } else { ratio_slope.max(s) };
        }
    }
    checks.push(Check {
        name: "noise_ratio_time_derivative".into(),
        pass: ratio_slope.is_finite(),
        measured: ratio_slope,
        threshold: f64::INFINITY,
    });

    ValidationReport::from_checks(checks)
}
