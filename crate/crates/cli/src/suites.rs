//! Invariant suites behind `fracmf validate`.

use std::sync::Arc;

use anyhow::Result;
use fracmf::core_model::{build_grid, Check, ModelSpec};
use fracmf::fbm_paths::NoiseSource;
use fracmf::finance_apps::riccati_rho;
use fracmf::frac_ops::{apply_operator, cov_rh, inner_h, l2_inner, OperatorKind};
use fracmf::mf_solver::{solve_mean_field, LinearClosedForm};
use fracmf::sensitivity::{
    direction_v2, directional_grad_check, law_derivative_solve, malliavin_dk, pairing, rh_increments, transfer_check,
    DEFAULT_FLOOR,
};
use fracmf::stats::collect_samples;
use fracmf::{validate_model, Ensemble, Estimate, GridFunction};
use serde::Serialize;

use crate::config::{ModelConfig, RunConfig, Suite};

pub const OPERATOR_MIN_CELLS: usize = 1024;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub pass: bool,
}

fn check(name: &str, measured: f64, threshold: f64) -> Check {
    Check { name: name.to_string(), pass: measured <= threshold, measured, threshold }
}

fn suite(suite: Suite, checks: Vec<Check>) -> SuiteReport {
    let pass = checks.iter().all(|c| c.pass);
    SuiteReport { suite, checks, pass }
}

pub fn run(cfg: &RunConfig) -> Result<Vec<SuiteReport>> {
    let order = match cfg.suite {
        Suite::All => vec![Suite::Operators, Suite::Fbm, Suite::Solver, Suite::Sensitivity],
        s => vec![s],
    };
    order
        .into_iter()
        .map(|s| match s {
            Suite::Operators => operators(cfg),
            Suite::Fbm => fbm(cfg),
            Suite::Solver => solver(cfg),
            Suite::Sensitivity => sensitivity(cfg),
            Suite::All => unreachable!(),
        })
        .collect()
}

fn rel_l2(a: &[f64], b: &[f64], range: std::ops::Range<usize>) -> f64 {
    let num: f64 = range.clone().map(|i| (a[i] - b[i]).powi(2)).sum();
    let den: f64 = range.map(|i| b[i].powi(2)).sum();
    (num / den).sqrt()
}

fn operators(cfg: &RunConfig) -> Result<SuiteReport> {
    let hurst = cfg.hurst();
    // the thresholds are calibrated at 1024 cells
    let n = cfg.grid.n.max(OPERATOR_MIN_CELLS);
    let grid = build_grid(n, cfg.grid.horizon)?;
    let pairs: [(fn(f64) -> f64, fn(f64) -> f64); 5] = [
        (|_| 1.0, |_| 1.0),
        (|t| t, |t| t.cos()),
        (|t| t * t, |t| (-t).exp()),
        (|t| (3.0 * t).sin(), |t| 1.0 + t),
        (|t| t.exp(), |t| t.powi(3)),
    ];
    let mut iso: f64 = 0.0;
    for (f, g) in pairs {
        let (u, v) = (GridFunction::from_fn(grid, f), GridFunction::from_fn(grid, g));
        let lhs = l2_inner(&apply_operator(OperatorKind::KHStar, &u, hurst)?, &apply_operator(OperatorKind::KHStar, &v, hurst)?)?;
        let rhs = inner_h(&u, &v, hurst)?;
        iso = iso.max(((lhs - rhs) / rhs).abs());
    }
    let f = GridFunction::from_fn(grid, |t| 1.0 + t + (3.0 * t).sin());
    let fwd = apply_operator(OperatorKind::KH, &f, hurst)?;
    let back = apply_operator(OperatorKind::KHInv, &fwd.values, hurst)?;
    let kh = rel_l2(back.values.values(), f.values(), 1..n + 1);
    let fwd = apply_operator(OperatorKind::KHStar, &f, hurst)?;
    let back = apply_operator(OperatorKind::KHStarInv, &fwd.values, hurst)?;
    let kh_star = rel_l2(back.values.values(), f.values(), 1..n);
    let mut cov: f64 = 0.0;
    for i in (0..=n).step_by((n / 16).max(1)) {
        for j in (0..=n).step_by((n / 16).max(1)) {
            let got = inner_h(&GridFunction::indicator(grid, i), &GridFunction::indicator(grid, j), hurst)?;
            cov = cov.max((got - cov_rh(grid.t(i), grid.t(j), hurst)).abs());
        }
    }
    Ok(suite(
        Suite::Operators,
        vec![
            check("isometry_rel_error", iso, 1e-3),
            check("kh_round_trip_rel_l2", kh, 1e-2),
            check("kh_star_round_trip_rel_l2", kh_star, 1e-2),
            check("indicator_covariance_abs_error", cov, 1e-10),
        ],
    ))
}

fn fbm(cfg: &RunConfig) -> Result<SuiteReport> {
    let n = cfg.grid.n;
    let hurst = cfg.hurst();
    let src = NoiseSource::new(build_grid(n, cfg.grid.horizon)?, hurst, cfg.monte_carlo.seed)?;
    let grid = *src.grid();
    let at = |f: f64| ((f * n as f64).round() as usize).clamp(1, n);
    let probes: Vec<(usize, usize)> = [(1.0, 1.0), (1.0, 0.5), (0.5, 0.5), (0.25, 0.75), (0.125, 0.125), (0.0, 1.0), (0.4, 0.41)]
        .iter()
        .map(|&(a, b)| (at(a), at(b)))
        .collect();
    let rows: Vec<Vec<f64>> = collect_samples(cfg.monte_carlo.paths, |p| {
        let path = src.path(p);
        let mut r: Vec<f64> = probes.iter().map(|&(a, b)| path.wh[a] * path.wh[b]).collect();
        r.push(path.wh[n]);
        r
    });
    let column = |k: usize| Estimate::from_samples(&rows.iter().map(|r| r[k]).collect::<Vec<_>>());
    let mut worst: f64 = 0.0;
    for (k, &(a, b)) in probes.iter().enumerate() {
        worst = worst.max(column(k).z_from(cov_rh(grid.t(a), grid.t(b), hurst)));
    }
    Ok(suite(
        Suite::Fbm,
        vec![check("covariance_max_z", worst, 3.0), check("terminal_mean_z", column(probes.len()).z_from(0.0), 3.0)],
    ))
}

fn ensemble(cfg: &RunConfig, spec: &ModelSpec, count: usize) -> Result<Arc<Ensemble>> {
    let src = NoiseSource::new(build_grid(cfg.grid.n, cfg.grid.horizon)?, spec.hurst(), cfg.monte_carlo.seed)?;
    Ok(Arc::new(Ensemble::new(spec, src, count)?))
}

fn solver(cfg: &RunConfig) -> Result<SuiteReport> {
    let spec = cfg.model.build(cfg.grid.horizon)?;
    let ens = ensemble(cfg, &spec, cfg.monte_carlo.paths)?;
    let grid = *ens.grid();
    let n = grid.n();
    let tol = cfg.tolerances.picard;
    let mut checks: Vec<Check> = validate_model(&spec, &grid).checks;
    let sol = solve_mean_field(&spec, ens.clone(), tol, cfg.tolerances.max_iter)?;
    checks.push(check("picard_residual", sol.law.residual, tol));
    if let Ok(form) = LinearClosedForm::new(&spec, &sol.law) {
        let worst = (0..ens.count().min(100))
            .map(|p| {
                let closed = form.eval(&ens.path(p));
                sol.path(p).x.iter().zip(&closed).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        checks.push(check("linear_closed_form_rel_error", worst, 1e-2));
    }
    if let ModelConfig::Riccati { x, mu, q, .. } = cfg.model {
        let nodes: Vec<usize> = (1..=8).map(|k| k * n / 8).filter(|&m| m > 0).collect();
        let rows: Vec<Vec<f64>> = collect_samples(ens.count(), |p| {
            let s = sol.path(p);
            nodes.iter().map(|&m| s.x[m]).collect()
        });
        let mut worst: f64 = 0.0;
        for (k, &m) in nodes.iter().enumerate() {
            let est = Estimate::from_samples(&rows.iter().map(|r| r[k]).collect::<Vec<_>>());
            let exact = riccati_rho(x, mu, q, grid.t(m))?;
            worst = worst.max((sol.law.rho.values()[m] - exact).abs() / (3.0 * est.stderr + grid.step() * exact));
        }
        checks.push(check("riccati_law_band_ratio", worst, 1.0));
    }
    Ok(suite(Suite::Solver, checks))
}

fn sensitivity(cfg: &RunConfig) -> Result<SuiteReport> {
    let spec = cfg.model.build(cfg.grid.horizon)?;
    let ens = ensemble(cfg, &spec, cfg.monte_carlo.paths)?;
    let grid = *ens.grid();
    let n = grid.n();
    let (tol, max_iter) = (cfg.tolerances.picard, cfg.tolerances.max_iter);
    let sol = solve_mean_field(&spec, ens.clone(), tol, max_iter)?;
    let dc = law_derivative_solve(&sol, tol, max_iter)?;

    let h = GridFunction::from_fn(grid, |t| 1.0 + t.sin());
    let ell = rh_increments(&h, spec.hurst())?;
    let grad = (0..ens.count().min(4))
        .map(|p| directional_grad_check(&sol, p, &ell, 1e-5, n).rel_error)
        .fold(0.0, f64::max);

    let dt = grid.step();
    let pair = collect_samples(ens.count().min(1000), |p| {
        let slice = malliavin_dk(&sol, p);
        match direction_v2(&slice, n, dt, DEFAULT_FLOOR) {
            Ok(v2) => (pairing(&slice, &v2, n, dt) / slice.factor[n] - 1.0).abs(),
            Err(_) => 0.0,
        }
    })
    .into_iter()
    .fold(0.0, f64::max);

    let tc = transfer_check(&sol, &dc, cfg.tolerances.fd_rel_step * spec.x(), n, tol, max_iter)?;
    Ok(suite(
        Suite::Sensitivity,
        vec![
            check("derivative_residual", dc.residual, tol),
            check("gradient_rel_error", grad, 1e-3),
            check("pairing_rel_error", pair, 1e-10),
            check("transfer_z_pooled", tc.z_pooled, 3.0),
        ],
    ))
}
