//! Acceptance battery: one PASS/FAIL line per criterion, exit status 1 if any fails.

use std::sync::Arc;
use std::time::{Duration, Instant};

use fracmf::core_model::{affine, build_grid, geometric, riccati, AffineParams, ModelSpec};
use fracmf::fbm_paths::NoiseSource;
use fracmf::finance_apps::{riccati_rho, solve_theta, varswap_sensitivity, ThetaConvention, VarSwapParams};
use fracmf::frac_ops::{alpha_h, apply_operator, cov_rh, inner_h, l2_inner, GridFunction, OperatorKind};
use fracmf::mf_solver::{solve_mean_field, LinearClosedForm};
use fracmf::sensitivity::{
    bel_estimate, directional_grad_check, direction_v2, fd_oracle, law_derivative_solve, malliavin_dk, pairing,
    rh_increments, transfer_check, Payoff, DEFAULT_FLOOR,
};
use fracmf::stats::Estimate;
use fracmf::Ensemble;

type Check = Result<(bool, String), String>;

fn run(id: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    let (mut ok, mut detail) = out.unwrap_or_else(|e| (false, format!("error: {e}")));
    if let Some(b) = budget {
        if elapsed > b {
            ok = false;
            detail.push_str(&format!("; over budget {:.0} s", b.as_secs_f64()));
        }
    }
    println!("{} [{id:>2}] {name}: {detail} ({:.1} s)", if ok { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
    ok
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn ensemble(spec: &ModelSpec, n: usize, count: usize, seed: u64) -> Result<Arc<Ensemble>, String> {
    let src = NoiseSource::new(build_grid(n, 1.0).map_err(err)?, spec.hurst(), seed).map_err(err)?;
    Ensemble::new(spec, src, count).map(Arc::new).map_err(err)
}

fn battery() -> Vec<ModelSpec> {
    let p = AffineParams { b0: 0.1, b1: -0.2, beta0: 0.05, beta1: 0.1, a0: 0.02, a1: 0.05, c0: 0.3, c1: 0.1 };
    vec![
        geometric(0.7, 1.0, 0.2, 0.3).unwrap(),
        riccati(0.7, 0.2, 0.5, 1.0, 0.3).unwrap(),
        affine(0.7, 1.0, p, 1.0).unwrap(),
    ]
}

/// `alpha_H int_0^t int_0^s |r - u|^(2H-2) du dr` by nested tanh-sinh, integrating in the
/// distance to the diagonal so the singular endpoint sits at zero.
fn covariance_by_quadrature(t: f64, s: f64, hurst: f64) -> f64 {
    let g = 2.0 * hurst - 2.0;
    let tol = 1e-12;
    // int_0^L v^g dv after v = L w^4, which softens the endpoint singularity
    let from_zero = |len: f64| {
        if len <= 0.0 {
            return 0.0;
        }
        len.powf(g + 1.0) * quadrature::integrate(|w: f64| 4.0 * w.powf(4.0 * g + 3.0), 0.0, 1.0, tol).integral
    };
    let dist = |lo: f64, hi: f64| from_zero(hi) - from_zero(lo);
    let inner = |r: f64| if r <= s { dist(0.0, r) + dist(0.0, s - r) } else { dist(r - s, r) };
    let outer = |a: f64, b: f64| quadrature::integrate(inner, a, b, tol).integral;
    let total = if s < t { outer(0.0, s) + outer(s, t) } else { outer(0.0, t) };
    alpha_h(hurst) * total
}

fn criterion_1() -> Check {
    let mut worst: f64 = 0.0;
    for hurst in [0.6, 0.75, 0.9] {
        for i in 1..=16 {
            for j in 1..=16 {
                let (t, s) = (i as f64 / 16.0, j as f64 / 16.0);
                worst = worst.max((cov_rh(t, s, hurst) - covariance_by_quadrature(t, s, hurst)).abs());
            }
        }
    }
    Ok((worst <= 1e-6, format!("max |closed form - quadrature| = {worst:.2e} (tol 1e-6)")))
}

fn rel_l2(a: &[f64], b: &[f64], range: std::ops::Range<usize>) -> f64 {
    let num: f64 = range.clone().map(|i| (a[i] - b[i]).powi(2)).sum();
    let den: f64 = range.map(|i| b[i].powi(2)).sum();
    (num / den).sqrt()
}

fn criterion_2() -> Check {
    let grid = build_grid(1024, 1.0).map_err(err)?;
    let hurst = 0.75;
    let fs: [fn(f64) -> f64; 10] = [
        |_| 1.0,
        |_| 1.0,
        |t| t,
        |t| t.cos(),
        |t| t * t,
        |t| (-t).exp(),
        |t| (3.0 * t).sin(),
        |t| 1.0 + t,
        |t| t.exp(),
        |t| t.powi(3),
    ];
    let mut worst_iso: f64 = 0.0;
    for pair in fs.chunks(2) {
        let u = GridFunction::from_fn(grid, pair[0]);
        let v = GridFunction::from_fn(grid, pair[1]);
        let ku = apply_operator(OperatorKind::KHStar, &u, hurst).map_err(err)?;
        let kv = apply_operator(OperatorKind::KHStar, &v, hurst).map_err(err)?;
        let lhs = l2_inner(&ku, &kv).map_err(err)?;
        let rhs = inner_h(&u, &v, hurst).map_err(err)?;
        worst_iso = worst_iso.max(((lhs - rhs) / rhs).abs());
    }
    let mut worst_rt: f64 = 0.0;
    for hurst in [0.6, 0.75, 0.9] {
        let f = GridFunction::from_fn(grid, |t| 1.0 + t + (3.0 * t).sin());
        let fwd = apply_operator(OperatorKind::KH, &f, hurst).map_err(err)?;
        let back = apply_operator(OperatorKind::KHInv, &fwd.values, hurst).map_err(err)?;
        worst_rt = worst_rt.max(rel_l2(back.values.values(), f.values(), 1..1025));
        let fwd = apply_operator(OperatorKind::KHStar, &f, hurst).map_err(err)?;
        let back = apply_operator(OperatorKind::KHStarInv, &fwd.values, hurst).map_err(err)?;
        worst_rt = worst_rt.max(rel_l2(back.values.values(), f.values(), 1..1024));
    }
    Ok((
        worst_iso <= 1e-3 && worst_rt <= 1e-2,
        format!("isometry rel err {worst_iso:.2e} (tol 1e-3), round trips rel L2 {worst_rt:.2e} (tol 1e-2)"),
    ))
}

fn criterion_3() -> Check {
    let n = 256;
    let hurst = 0.7;
    let count = 100_000;
    let src = NoiseSource::new(build_grid(n, 1.0).map_err(err)?, hurst, 2024).map_err(err)?;
    let probes = [(256, 256), (256, 128), (128, 128), (64, 192), (32, 32), (1, 1), (1, 256), (100, 101), (200, 50), (16, 240)];
    let rows: Vec<Vec<f64>> = fracmf::stats::collect_samples(count, |p| {
        let path = src.path(p);
        probes.iter().map(|&(a, b)| path.wh[a] * path.wh[b]).collect()
    });
    let mut worst: f64 = 0.0;
    for (k, &(a, b)) in probes.iter().enumerate() {
        let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
        let est = Estimate::from_samples(&col);
        worst = worst.max(est.z_from(cov_rh(a as f64 / n as f64, b as f64 / n as f64, hurst)));
    }
    Ok((worst <= 3.0, format!("max |sample cov - R_H| / stderr = {worst:.2} over 10 probes (tol 3)")))
}

fn criterion_4() -> Check {
    let spec = ModelSpec::builder("linear", 0.7, 1.0, 0.3)
        .drift(fracmf::core_model::LawCoefficient::affine(0.3, -0.5))
        .noise(|t| 0.3 + 0.2 * t, 0.3)
        .build()
        .map_err(err)?;
    let ens = ensemble(&spec, 512, 100, 31)?;
    let sol = solve_mean_field(&spec, ens.clone(), 1e-12, 200).map_err(err)?;
    let form = LinearClosedForm::new(&spec, &sol.law).map_err(err)?;
    let mut worst: f64 = 0.0;
    for p in 0..100 {
        let closed = form.eval(&ens.path(p));
        let s = sol.path(p);
        for (a, b) in s.x.iter().zip(&closed) {
            worst = worst.max(((a - b) / b).abs());
        }
    }
    Ok((worst <= 1e-2, format!("max pathwise rel err = {worst:.2e} (tol 1e-2)")))
}

fn criterion_5() -> Check {
    let (x, mu, q) = (0.2, 0.5, 1.0);
    // fourth-order Runge-Kutta of rho' = (mu - q rho) rho against the closed form
    let f = |r: f64| (mu - q * r) * r;
    let steps = 1000;
    let h = 1.0 / steps as f64;
    let mut r = x;
    let mut ode: f64 = 0.0;
    for k in 1..=steps {
        let (k1, k2) = (f(r), f(r + 0.5 * h * f(r)));
        let k3 = f(r + 0.5 * h * k2);
        let k4 = f(r + h * k3);
        r += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        ode = ode.max((r - riccati_rho(x, mu, q, k as f64 * h).map_err(err)?).abs());
    }
    let spec = riccati(0.7, x, mu, q, 0.3).map_err(err)?;
    let n = 256;
    let ens = ensemble(&spec, n, 100_000, 55)?;
    let sol = solve_mean_field(&spec, ens.clone(), 1e-10, 200).map_err(err)?;
    let grid = *ens.grid();
    let co: Vec<Vec<f64>> = fracmf::stats::collect_samples(ens.count(), |p| {
        let s = sol.path(p);
        (0..=n).step_by(32).map(|m| s.x[m]).collect()
    });
    let mut worst: f64 = 0.0;
    for (k, m) in (0..=n).step_by(32).enumerate().skip(1) {
        let col: Vec<f64> = co.iter().map(|r| r[k]).collect();
        let est = Estimate::from_samples(&col);
        let exact = riccati_rho(x, mu, q, grid.t(m)).map_err(err)?;
        let band = 3.0 * est.stderr + grid.step() * exact;
        worst = worst.max((sol.law.rho.values()[m] - exact).abs() / band);
    }
    Ok((
        worst <= 1.0 && ode <= 1e-8,
        format!(
            "max |rho - closed form| / (3 se + dt rho) = {worst:.2} (tol 1), {} Picard iterations; ODE residual {ode:.1e} (tol 1e-8)",
            sol.law.iterations
        ),
    ))
}

fn criterion_6() -> Check {
    let mut worst: f64 = 0.0;
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio: f64 = 0.0;
    for spec in battery() {
        let n = 256;
        let ens = ensemble(&spec, n, 4, 61)?;
        let sol = solve_mean_field(&spec, ens.clone(), 1e-12, 200).map_err(err)?;
        let grid = *ens.grid();
        for h in [GridFunction::from_fn(grid, |t| 1.0 + t.sin()), GridFunction::from_fn(grid, |t| (2.0 * t).cos() - t)] {
            let ell = rh_increments(&h, spec.hurst()).map_err(err)?;
            for p in 0..4 {
                let e: Vec<f64> = [1e-3, 1e-4, 1e-5].iter().map(|&eps| directional_grad_check(&sol, p, &ell, eps, n).rel_error).collect();
                worst = worst.max(e[2]);
                for r in [e[0] / e[1], e[1] / e[2]] {
                    min_ratio = min_ratio.min(r);
                    max_ratio = max_ratio.max(r);
                }
            }
        }
    }
    let order_one = min_ratio >= 5.0 && max_ratio <= 20.0;
    Ok((
        worst <= 1e-3 && order_one,
        format!("max rel err at eps 1e-5 = {worst:.2e} (tol 1e-3); error ratio per decade in [{min_ratio:.2}, {max_ratio:.2}] (first order: [5, 20])"),
    ))
}

fn criterion_7_8() -> Result<((bool, String), (bool, String)), String> {
    let mut worst_z: f64 = 0.0;
    let mut worst_paired: f64 = 0.0;
    let mut worst_pair: f64 = 0.0;
    let mut excluded = 0usize;
    let mut checked = 0usize;
    for spec in battery() {
        let n = 256;
        let ens = ensemble(&spec, n, 10_000, 71)?;
        let sol = solve_mean_field(&spec, ens.clone(), 1e-12, 200).map_err(err)?;
        let dc = law_derivative_solve(&sol, 1e-12, 200).map_err(err)?;
        let tc = transfer_check(&sol, &dc, 1e-4 * spec.x(), n, 1e-12, 200).map_err(err)?;
        worst_z = worst_z.max(tc.z_pooled);
        worst_paired = worst_paired.max(tc.paired.mean.abs());
        let dt = ens.grid().step();
        let errs: Vec<(f64, usize, usize)> = fracmf::stats::collect_samples(ens.count(), |p| {
            let s = malliavin_dk(&sol, p);
            let mut w: f64 = 0.0;
            let (mut ex, mut ok) = (0, 0);
            for m in (16..=n).step_by(16).chain([1]) {
                match direction_v2(&s, m, dt, DEFAULT_FLOOR) {
                    Ok(v2) => {
                        w = w.max((pairing(&s, &v2, m, dt) / s.factor[m] - 1.0).abs());
                        ok += 1;
                    }
                    Err(_) => ex += 1,
                }
            }
            (w, ex, ok)
        });
        for (w, ex, ok) in errs {
            worst_pair = worst_pair.max(w);
            excluded += ex;
            checked += ok;
        }
    }
    Ok((
        (worst_z <= 3.0, format!("max pooled z = {worst_z:.2e} (tol 3); max |paired mean| = {worst_paired:.1e}")),
        (
            worst_pair <= 1e-10,
            format!("max rel err = {worst_pair:.1e} over {checked} path-times (tol 1e-10), {excluded} degenerate"),
        ),
    ))
}

fn criterion_9() -> Check {
    let specs = battery();
    let combos: Vec<(usize, Payoff)> = vec![
        (0, Payoff::Power { exponent: 2.0 }),
        (1, Payoff::Linear),
        (2, Payoff::Power { exponent: 2.0 }),
        (2, Payoff::SmoothCall { strike: 1.2, width: 0.1 }),
    ];
    let n = 256;
    let mut lines = Vec::new();
    let mut ok = true;
    let mut last = usize::MAX;
    let mut state = None;
    for (si, payoff) in combos {
        if si != last {
            let spec = &specs[si];
            let ens = ensemble(spec, n, 100_000, 91 + si as u64)?;
            let sol = solve_mean_field(spec, ens, 1e-12, 200).map_err(err)?;
            let dc = law_derivative_solve(&sol, 1e-12, 200).map_err(err)?;
            state = Some((sol, dc));
            last = si;
        }
        let (sol, dc) = state.as_ref().unwrap();
        let bel = bel_estimate(sol, dc, &payoff, n).map_err(err)?;
        let fd = fd_oracle(sol, &payoff, 1e-4 * sol.spec.x(), n, 1e-12, 200).map_err(err)?;
        let z = bel.estimate.z_distance(&fd);
        ok &= z <= 3.0;
        lines.push(format!("{}/{payoff:?} z={z:.2}", sol.spec.name));
        if si == 0 && matches!(payoff, Payoff::Power { .. }) {
            let c = bel_estimate(sol, dc, &Payoff::Constant { value: 1.0 }, n).map_err(err)?;
            let zc = c.estimate.z_from(0.0);
            ok &= zc <= 3.0;
            lines.push(format!("constant payoff z={zc:.2}"));
        }
    }
    Ok((ok, format!("|bel - fd| / pooled se: {} (tol 3)", lines.join(", "))))
}

fn criterion_10() -> Check {
    let grid = build_grid(512, 1.0).map_err(err)?;
    let mut residual: f64 = 0.0;
    for hurst in [0.6, 0.7, 0.75] {
        let p = VarSwapParams { hurst, ..Default::default() };
        residual = residual.max(solve_theta(&grid, &p, ThetaConvention::WithAlphaH).map_err(err)?.residual);
    }
    let rep = varswap_sensitivity(&VarSwapParams::default()).map_err(err)?;
    let girsanov = rep.points.iter().map(|p| p.girsanov_mean.z_from(1.0)).fold(0.0, f64::max);
    Ok((
        residual <= 1e-4 && girsanov <= 3.0 && rep.ci_overlap,
        format!(
            "Theta residual {residual:.1e} (tol 1e-4); max |E M - 1| / se = {girsanov:.2} (tol 3); price delta {:.4} +- {:.4} vs FD {:.4} +- {:.4}, 3-sigma overlap {}",
            rep.price_sensitivity.mean, rep.price_sensitivity.stderr, rep.fd.mean, rep.fd.stderr, rep.ci_overlap
        ),
    ))
}

fn report_bytes(workers: usize) -> Result<Vec<u8>, String> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(err)?;
    pool.install(|| {
        let p = VarSwapParams { n: 64, paths: 20_000, ..Default::default() };
        let rep = varswap_sensitivity(&p).map_err(err)?;
        let spec = &battery()[2];
        let ens = ensemble(spec, 64, 20_000, 5)?;
        let sol = solve_mean_field(spec, ens, 1e-12, 200).map_err(err)?;
        let dc = law_derivative_solve(&sol, 1e-12, 200).map_err(err)?;
        let bel = bel_estimate(&sol, &dc, &Payoff::Power { exponent: 2.0 }, 64).map_err(err)?;
        serde_json::to_vec(&(rep, bel)).map_err(err)
    })
}

fn criterion_11() -> Check {
    let a = report_bytes(2)?;
    let b = report_bytes(2)?;
    let c = report_bytes(1)?;
    Ok((a == b, format!("repeat at 2 workers identical: {}; 1 vs 2 workers identical: {} ({} bytes)", a == b, a == c, a.len())))
}

fn main() {
    let mut all = true;
    all &= run(1, "covariance identity", Some(Duration::from_secs(10)), criterion_1);
    all &= run(2, "operator isometry and round trips", Some(Duration::from_secs(30)), criterion_2);
    all &= run(3, "fBm law", Some(Duration::from_secs(120)), criterion_3);
    all &= run(4, "linear closed form", Some(Duration::from_secs(30)), criterion_4);
    all &= run(5, "Riccati law", Some(Duration::from_secs(300)), criterion_5);
    all &= run(6, "gradient check", None, criterion_6);
    let start = Instant::now();
    match criterion_7_8() {
        Ok((c7, c8)) => {
            let secs = start.elapsed().as_secs_f64();
            all &= run(7, "transfer identity", None, || Ok(c7));
            all &= run(8, "pairing identity", None, || Ok(c8));
            println!("     (criteria 7 and 8 share one run: {secs:.1} s)");
        }
        Err(e) => {
            all &= run(7, "transfer identity", None, || Err(e.clone()));
            all &= run(8, "pairing identity", None, || Err(e));
        }
    }
    all &= run(9, "BEL = FD", Some(Duration::from_secs(900)), criterion_9);
    all &= run(10, "Theta, Girsanov and variance swap", Some(Duration::from_secs(1200)), criterion_10);
    all &= run(11, "determinism", None, criterion_11);
    if !all {
        std::process::exit(1);
    }
}
