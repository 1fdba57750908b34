//! Command bodies. Each returns the report pass flag.

use std::sync::Arc;
use std::time::Instant;

use anyhow::Result;
use fracmf::core_model::build_grid;
use fracmf::fbm_paths::NoiseSource;
use fracmf::finance_apps::{ci_overlap, varswap_sensitivity, volmodel_sensitivity, SubGridPoint};
use fracmf::mf_solver::solve_mean_field;
use fracmf::sensitivity::{bel_estimate, fd_oracle, solve_with_derivatives, BelEstimate};
use fracmf::{validate_model, Ensemble, Estimate, ValidationReport};
use serde::Serialize;

use crate::config::{config_error, Command, RunConfig};
use crate::report::{write_csv, Report};
use crate::suites;

/// Maps precondition failures of the library to configuration errors.
fn lift(e: fracmf::Error) -> anyhow::Error {
    match e {
        fracmf::Error::InvalidParameter(msg) => config_error(msg),
        other => other.into(),
    }
}

pub fn execute(cfg: &RunConfig, workers: usize) -> Result<bool> {
    cfg.check()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    let pass = pool.install(|| match cfg.command {
        Command::Validate => validate(cfg, workers),
        Command::Simulate => simulate(cfg, workers),
        Command::Greeks => greeks(cfg, workers),
        Command::Varswap => varswap(cfg, workers),
        Command::Volmodel => volmodel(cfg, workers),
    })?;
    eprintln!("{:?} finished in {:.2} s on {workers} worker(s)", cfg.command, start.elapsed().as_secs_f64());
    Ok(pass)
}

fn validate(cfg: &RunConfig, workers: usize) -> Result<bool> {
    let reports = suites::run(cfg)?;
    let pass = reports.iter().all(|r| r.pass);
    for r in &reports {
        for c in &r.checks {
            eprintln!(
                "{} {:?}/{}: {:.3e} (threshold {:.3e})",
                if c.pass { "PASS" } else { "FAIL" },
                r.suite,
                c.name,
                c.measured,
                c.threshold
            );
        }
    }
    Report::new(cfg, workers, pass, reports)?.emit(cfg.output.report.as_deref())?;
    Ok(pass)
}

#[derive(Debug, Serialize)]
struct SimulateResult {
    iterations: usize,
    residual: f64,
    assumptions: ValidationReport,
    terminal_rho: f64,
    terminal_gamma: f64,
    terminal_mean: Estimate,
}

fn simulate(cfg: &RunConfig, workers: usize) -> Result<bool> {
    let spec = cfg.model.build(cfg.grid.horizon)?;
    let grid = build_grid(cfg.grid.n, cfg.grid.horizon).map_err(lift)?;
    let src = NoiseSource::new(grid, spec.hurst(), cfg.monte_carlo.seed).map_err(lift)?;
    let ens = Arc::new(Ensemble::new(&spec, src, cfg.monte_carlo.paths).map_err(lift)?);
    let assumptions = validate_model(&spec, &grid);
    let sol = solve_mean_field(&spec, ens, cfg.tolerances.picard, cfg.tolerances.max_iter)?;
    let n = grid.n();
    let terminal: Vec<f64> = fracmf::stats::collect_samples(cfg.monte_carlo.paths, |p| sol.path(p).x[n]);
    let law = &sol.law;
    if let Some(path) = &cfg.output.csv {
        let k = cfg.output.dump_paths.min(cfg.monte_carlo.paths);
        let paths: Vec<Vec<f64>> = (0..k).map(|p| sol.path(p).x).collect();
        let mut header = vec!["t".to_string(), "rho".to_string(), "gamma".to_string()];
        header.extend((0..k).map(|p| format!("path_{p}")));
        let rows: Vec<Vec<f64>> = (0..=n)
            .map(|i| {
                let mut r = vec![grid.t(i), law.rho.values()[i], law.gamma.values()[i]];
                r.extend(paths.iter().map(|x| x[i]));
                r
            })
            .collect();
        let comments = vec![
            format!("model {} H={} n={} T={} paths={} seed={}", spec.name, spec.hurst(), n, grid.horizon(), cfg.monte_carlo.paths, cfg.monte_carlo.seed),
            "t in model time units; rho = E phi(X_t), gamma = E psi(X_t); path_k = X_t on ensemble path k".to_string(),
        ];
        write_csv(path, &comments, &header, &rows)?;
    }
    let result = SimulateResult {
        iterations: law.iterations,
        residual: law.residual,
        assumptions,
        terminal_rho: law.rho.values()[n],
        terminal_gamma: law.gamma.values()[n],
        terminal_mean: Estimate::from_samples(&terminal),
    };
    Report::new(cfg, workers, true, result)?.emit(cfg.output.report.as_deref())?;
    Ok(true)
}

#[derive(Debug, Serialize)]
struct GreeksResult {
    time: f64,
    node: usize,
    bel: BelEstimate,
    fd: Estimate,
    fd_step: f64,
    z_pooled: f64,
    ci_overlap: bool,
    derivative_iterations: usize,
}

fn greeks(cfg: &RunConfig, workers: usize) -> Result<bool> {
    let spec = cfg.model.build(cfg.grid.horizon)?;
    let grid = build_grid(cfg.grid.n, cfg.grid.horizon).map_err(lift)?;
    let src = NoiseSource::new(grid, spec.hurst(), cfg.monte_carlo.seed).map_err(lift)?;
    let ens = Arc::new(Ensemble::new(&spec, src, cfg.monte_carlo.paths).map_err(lift)?);
    let (tol, max_iter) = (cfg.tolerances.picard, cfg.tolerances.max_iter);
    let (sol, dc) = solve_with_derivatives(&spec, ens, tol, max_iter)?;
    let m = grid.node_at(cfg.greeks.time.unwrap_or(grid.horizon())).max(1);
    let payoff = cfg.greeks.payoff.payoff();
    let bel = bel_estimate(&sol, &dc, &payoff, m)?;
    let fd_step = cfg.tolerances.fd_rel_step * spec.x();
    let fd = fd_oracle(&sol, &payoff, fd_step, m, tol, max_iter)?;
    if let Some(w) = &bel.warning {
        eprintln!("warning: {w}");
    }
    let result = GreeksResult {
        time: grid.t(m),
        node: m,
        z_pooled: bel.estimate.z_distance(&fd),
        ci_overlap: ci_overlap(&bel.estimate, &fd),
        bel,
        fd,
        fd_step,
        derivative_iterations: dc.iterations,
    };
    if let Some(path) = &cfg.output.csv {
        let header: Vec<String> =
            ["t", "estimate", "stderr", "excluded_fraction", "fd", "fd_stderr"].iter().map(|s| s.to_string()).collect();
        let row = vec![
            result.time,
            result.bel.estimate.mean,
            result.bel.estimate.stderr,
            result.bel.excluded_fraction,
            fd.mean,
            fd.stderr,
        ];
        let comments = vec![format!("d/dx E[payoff(X_t)] for model {} with payoff {:?}", spec.name, cfg.greeks.payoff)];
        write_csv(path, &comments, &header, &[row])?;
    }
    Report::new(cfg, workers, true, result)?.emit(cfg.output.report.as_deref())?;
    Ok(true)
}

fn point_row(p: &SubGridPoint) -> Vec<f64> {
    let mut row = vec![p.t];
    for e in [&p.density_term, &p.feedback_term, &p.pairing_term, &p.initial_term, &p.total, &p.literal_third_term, &p.girsanov_mean, &p.pathwise] {
        row.push(e.mean);
        row.push(e.stderr);
    }
    row
}

fn varswap(cfg: &RunConfig, workers: usize) -> Result<bool> {
    let params = cfg.varswap_params();
    params.validate().map_err(lift)?;
    let rep = varswap_sensitivity(&params).map_err(lift)?;
    for note in &rep.notes {
        eprintln!("note: {note}");
    }
    if let Some(path) = &cfg.output.csv {
        let mut header = vec!["t".to_string()];
        for name in ["density", "feedback", "pairing", "initial", "total", "literal_third", "girsanov_mean", "pathwise"] {
            header.push(name.to_string());
            header.push(format!("{name}_stderr"));
        }
        let rows: Vec<Vec<f64>> = rep.points.iter().map(point_row).collect();
        let comments = vec![
            format!("d/dx E^Q[sigma_t^2] on the sub-grid; x={} mu={} q={} alpha={} H={}", params.x, params.mu, params.q, params.alpha, params.hurst),
            format!("theta convention {:?}; variance units per unit time", params.convention),
        ];
        write_csv(path, &comments, &header, &rows)?;
    }
    Report::new(cfg, workers, true, rep)?.emit(cfg.output.report.as_deref())?;
    Ok(true)
}

fn volmodel(cfg: &RunConfig, workers: usize) -> Result<bool> {
    let params = cfg.volmodel_params();
    let rep = volmodel_sensitivity(&params).map_err(lift)?;
    for note in &rep.notes {
        eprintln!("note: {note}");
    }
    Report::new(cfg, workers, true, rep)?.emit(cfg.output.report.as_deref())?;
    Ok(true)
}
