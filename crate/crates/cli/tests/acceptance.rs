//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! numeric arguments restrict the run to those criteria.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cdr_cli::{execute, Command, RunConfig};
use cdr_core::estimator::{fit, CoefficientPaths, FitOptions, GridSpec};
use cdr_core::functionals::{hours_decomposition, wage_decomposition, Component, GroupInputs};
use cdr_core::gauss2d::{biv_cdf, biv_pdf, std_cdf, std_pdf, std_quantile};
use cdr_core::inference::{bootstrap_draws, influence, max_t_critical, uniform_band, variance_rho, Contrast};
use cdr_core::lgr::{local_correlation, solve_nu_rho0, solve_rho_s, ExclusionInputs};
use cdr_core::likelihood::*;
use cdr_core::simulate::{simulate_bdr, simulate_hsm, BdrOptions, ColumnDist, CovariateSampler, HsmParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 11] = [
        (1, "bivariate normal CDF accuracy", bivariate_cdf_accuracy),
        (2, "analytic derivatives", analytic_derivatives),
        (3, "local correlation round trip", lgr_round_trip),
        (4, "identification solvers", identification_solvers),
        (5, "estimator consistency", estimator_consistency),
        (6, "heterogeneous sorting recovery", heterogeneous_sorting),
        (7, "uniform band coverage", band_coverage),
        (8, "single-cell critical value", single_cell_critical_value),
        (9, "decomposition identities", decomposition_identities),
        (10, "smooth floor", smooth_floor_shape),
        (11, "determinism", determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!o.pass);
        println!(
            "acceptance {id:>2} {name}: {} ({}; {:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn within(start: Instant, limit: Duration) -> bool {
    start.elapsed() <= limit
}

// Shared tobit type-3 design: strong binary instrument, a third censored.

fn hsm(rho: f64) -> HsmParams {
    HsmParams {
        nu: vec![1.0, 0.5],
        mu: vec![-5.0, 5.0, 40.0],
        sigma_u: 1.0,
        sigma_v: 20.0,
        rho,
        sampler: CovariateSampler::default_design(),
    }
}

const Z0: [f64; 3] = [1.0, 0.0, 1.0];

fn deciles() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

fn intercept_layout(data: &ObservationTable) -> CovariateLayout {
    CovariateLayout::new(data, vec![0], vec![0]).unwrap()
}

fn fit_sample(data: &ObservationTable, s_points: Vec<f64>, quantiles: &[f64]) -> cdr_core::Result<CoefficientPaths> {
    let grid = GridSpec::with_y_quantiles(data, s_points, quantiles)?;
    fit(data, &grid, &intercept_layout(data), &FitOptions::default())
}

// 1. Oracle: Φ₂(a, b; ρ) = ∫_{-∞}^a φ(x) Φ((b - ρx)/√(1-ρ²)) dx by adaptive
// Gauss–Kronrod (7/15) quadrature.

#[allow(clippy::excessive_precision)]
const KRONROD_X: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
#[allow(clippy::excessive_precision)]
const KRONROD_W: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
#[allow(clippy::excessive_precision)]
const GAUSS_W: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn kronrod(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    let c = 0.5 * (lo + hi);
    let h = 0.5 * (hi - lo);
    let fc = f(c);
    let mut k = KRONROD_W[7] * fc;
    let mut g = GAUSS_W[3] * fc;
    for i in 0..7 {
        let pair = f(c - h * KRONROD_X[i]) + f(c + h * KRONROD_X[i]);
        k += KRONROD_W[i] * pair;
        if i % 2 == 1 {
            g += GAUSS_W[i / 2] * pair;
        }
    }
    (k * h, ((k - g) * h).abs())
}

fn adaptive(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, tol: f64, depth: u32) -> f64 {
    let (k, err) = kronrod(f, lo, hi);
    if err <= tol || depth == 0 {
        return k;
    }
    let mid = 0.5 * (lo + hi);
    adaptive(f, lo, mid, tol / 2.0, depth - 1) + adaptive(f, mid, hi, tol / 2.0, depth - 1)
}

fn biv_cdf_oracle(a: f64, b: f64, rho: f64) -> f64 {
    let r = (1.0 - rho * rho).sqrt();
    let f = |x: f64| std_pdf(x) * std_cdf((b - rho * x) / r);
    let lo = -12.0;
    if a <= lo {
        return 0.0;
    }
    adaptive(&f, lo, a, 1e-14, 60)
}

fn bivariate_cdf_accuracy() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = (0.0f64, (0.0, 0.0, 0.0));
    for _ in 0..1000 {
        let a = rng.random_range(-5.0..=5.0);
        let b = rng.random_range(-5.0..=5.0);
        let rho = rng.random_range(-0.99..=0.99);
        let err = (biv_cdf(a, b, rho) - biv_cdf_oracle(a, b, rho)).abs();
        if err > worst.0 {
            worst = (err, (a, b, rho));
        }
    }
    let fast = within(start, Duration::from_secs(10));
    outcome(
        worst.0 <= 1e-9 && fast,
        format!("max abs error {:.2e} at {:?} over 1000 points, limit 1e-9", worst.0, worst.1),
    )
}

// 2. Central finite differences against the analytic derivatives.

/// Central difference with one Richardson step, accurate to O(h⁴). Near the
/// probability floor the objective bends on a scale close to `h` itself, so
/// the plain central difference is not accurate enough there.
fn richardson<T>(f: impl Fn(f64) -> T, h: f64) -> T
where
    T: std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T>,
{
    let d1 = (f(h) - f(-h)) * (0.5 / h);
    let d2 = (f(h / 2.0) - f(-h / 2.0)) * (1.0 / h);
    (d2 * 4.0 - d1) * (1.0 / 3.0)
}

fn shifted(at: &DVector<f64>, j: usize, d: f64) -> DVector<f64> {
    let mut p = at.clone();
    p[j] += d;
    p
}

fn fd_grad(f: impl Fn(&DVector<f64>) -> f64, at: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_iterator(at.len(), (0..at.len()).map(|j| richardson(|d| f(&shifted(at, j, d)), h)))
}

fn fd_jac(f: impl Fn(&DVector<f64>) -> DVector<f64>, at: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..at.len()).map(|j| richardson(|d| f(&shifted(at, j, d)), h)).collect();
    DMatrix::from_columns(&cols)
}

/// Largest deviation relative to the largest analytic entry of the block.
fn rel_err(analytic: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    let scale = analytic.amax().max(1e-8);
    (analytic - fd).amax() / scale
}

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn jitter(rng: &mut ChaCha8Rng, v: DVector<f64>, w: f64) -> DVector<f64> {
    v.map(|x| x + rng.random_range(-w..=w))
}

fn analytic_derivatives() -> Outcome {
    let start = Instant::now();
    let p = hsm(0.5);
    let (data, _) = simulate_hsm(400, &p, 202).unwrap();
    let layout = CovariateLayout::full(&data);
    let floor = FloorConfig::default();
    let mut ys = data.selected_outcomes();
    ys.sort_by(f64::total_cmp);
    let y_at = |q: f64| ys[(q * (ys.len() - 1) as f64) as usize];
    let mut rng = ChaCha8Rng::seed_from_u64(203);
    let h = 1e-5;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };
    for k in 0..20 {
        let s = [0.0, 10.0, 30.0, 50.0][k % 4];
        let mu = jitter(&mut rng, p.true_mu(s), 0.3);
        let e = step1_loglik(&mu, &data, s).unwrap();
        let v = |m: &DVector<f64>| step1_objective(m, &data, s, Order::Value).unwrap().value;
        note("step 1 score", rel_err(&col(&e.score), &col(&fd_grad(v, &mu, h))));
        let g = |m: &DVector<f64>| step1_objective(m, &data, s, Order::Gradient).unwrap().gradient;
        note("step 1 Hessian", rel_err(&e.hessian, &fd_jac(g, &mu, h)));
    }
    let draw_eta = |rng: &mut ChaCha8Rng, s: f64, y: f64| StepParams {
        mu0: jitter(rng, p.true_mu(0.0), 0.3),
        mu_s: jitter(rng, p.true_mu(s), 0.3),
        nu: jitter(rng, p.true_nu(y), 0.3),
        rho0: DVector::from_fn(2, |_, _| rng.random_range(-0.8..=0.8)),
        rho: DVector::from_fn(3, |_, _| rng.random_range(-0.6..=0.6)),
    };
    for k in 0..20 {
        let y = y_at([0.1, 0.3, 0.5, 0.7, 0.9][k % 5]);
        let eta = draw_eta(&mut rng, 10.0, y);
        let theta = DVector::from_iterator(4, eta.nu.iter().chain(eta.rho0.iter()).copied());
        let mu0 = eta.mu0.clone();
        let e = step2_loglik(&theta, &mu0, &data, &layout, y, floor).unwrap();
        let v = |t: &DVector<f64>| step2_objective(t, &mu0, &data, &layout, y, floor, Order::Value).unwrap().value;
        note("step 2 score", rel_err(&col(&e.score), &col(&fd_grad(v, &theta, h))));
        let g = |t: &DVector<f64>| step2_objective(t, &mu0, &data, &layout, y, floor, Order::Gradient).unwrap().gradient;
        note("step 2 Hessian", rel_err(&e.hessian, &fd_jac(g, &theta, h)));
        let gm = |m: &DVector<f64>| step2_objective(&theta, m, &data, &layout, y, floor, Order::Gradient).unwrap().gradient;
        note("step 2 cross-Jacobian", rel_err(&e.cross_jacobian, &fd_jac(gm, &mu0, h)));
    }
    for k in 0..20 {
        let s = [10.0, 30.0][k % 2];
        let y = y_at([0.1, 0.3, 0.5, 0.7, 0.9][(k / 2) % 5]);
        let eta = draw_eta(&mut rng, s, y);
        let rho = eta.rho.clone();
        let e = step3_loglik(&rho, &eta, &data, &layout, s, y, floor).unwrap();
        let v = |r: &DVector<f64>| step3_objective(r, &eta, &data, &layout, s, y, floor, Order::Value).unwrap().value;
        note("step 3 score", rel_err(&col(&e.score), &col(&fd_grad(v, &rho, h))));
        let grad_at = |p: &StepParams| step3_objective(&rho, p, &data, &layout, s, y, floor, Order::Gradient).unwrap().gradient;
        let g = |r: &DVector<f64>| step3_objective(r, &eta, &data, &layout, s, y, floor, Order::Gradient).unwrap().gradient;
        note("step 3 Hessian", rel_err(&e.hessian, &fd_jac(g, &rho, h)));
        let by_mu0 = |m: &DVector<f64>| grad_at(&StepParams { mu0: m.clone(), ..eta.clone() });
        note("step 3 Jacobian mu0", rel_err(&e.j3_mu0, &fd_jac(by_mu0, &eta.mu0, h)));
        let by_mus = |m: &DVector<f64>| grad_at(&StepParams { mu_s: m.clone(), ..eta.clone() });
        note("step 3 Jacobian mu_s", rel_err(&e.j3_mus, &fd_jac(by_mus, &eta.mu_s, h)));
        let theta = DVector::from_iterator(4, eta.nu.iter().chain(eta.rho0.iter()).copied());
        let by_theta = |t: &DVector<f64>| {
            grad_at(&StepParams { nu: t.rows(0, 2).into_owned(), rho0: t.rows(2, 2).into_owned(), ..eta.clone() })
        };
        note("step 3 Jacobian theta", rel_err(&e.j3_theta, &fd_jac(by_theta, &theta, h)));
    }
    let (name, max) = worst.iter().fold(("", 0.0f64), |a, (k, v)| if *v > a.1 { (k, *v) } else { a });
    let fast = within(start, Duration::from_secs(60));
    outcome(
        max <= 1e-5 && fast,
        format!("{} blocks, worst relative error {max:.2e} ({name}), limit 1e-5", worst.len()),
    )
}

// 3. Local correlation inverts the bivariate CDF; a Gaussian sample has a
// flat local-correlation surface.

fn lgr_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let (mut worst_rho, mut worst_cdf, mut resolvable) = (0.0f64, 0.0f64, 0);
    for _ in 0..1000 {
        let mu = rng.random_range(-3.0..=3.0);
        let nu = rng.random_range(-3.0..=3.0);
        let rho = rng.random_range(-0.95..=0.95);
        let f = biv_cdf(mu, nu, rho);
        let got = local_correlation(f, std_cdf(mu), std_cdf(nu)).unwrap();
        // Below this density a 1e-8 change in ρ moves Φ₂ by less than 1e-14,
        // a few ulps, so only the CDF value itself is recoverable and it must
        // come back as accurately as a 1e-8 error in ρ would allow.
        if biv_pdf(mu, nu, rho).unwrap() >= 1e-6 {
            resolvable += 1;
            worst_rho = worst_rho.max((got - rho).abs());
        } else {
            worst_cdf = worst_cdf.max((biv_cdf(mu, nu, got) - f).abs());
        }
    }
    let rho_star: f64 = 0.6;
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(302);
    let pairs: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let u: f64 = rng.sample(StandardNormal);
            let v: f64 = rng.sample(StandardNormal);
            (u, rho_star * u + (1.0 - rho_star * rho_star).sqrt() * v)
        })
        .collect();
    let grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let mut worst_surface = 0.0f64;
    for &s in &grid {
        for &y in &grid {
            let nf = n as f64;
            let fs = pairs.iter().filter(|p| p.0 <= s).count() as f64 / nf;
            let fy = pairs.iter().filter(|p| p.1 <= y).count() as f64 / nf;
            let fj = pairs.iter().filter(|p| p.0 <= s && p.1 <= y).count() as f64 / nf;
            worst_surface = worst_surface.max((local_correlation(fj, fs, fy).unwrap() - rho_star).abs());
        }
    }
    outcome(
        worst_rho <= 1e-8 && worst_cdf <= 1e-14 && worst_surface <= 0.05,
        format!(
            "rho error {worst_rho:.1e} on {resolvable}/1000 resolvable points, CDF error {worst_cdf:.1e} elsewhere; \
             surface deviation {worst_surface:.3} on a 5x5 grid over [-1, 1]^2 at n = 1e5"
        ),
    )
}

// 4. Forward-generated identification probabilities are inverted exactly.

fn identification_solvers() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let (mut worst_nu, mut worst_rho0, mut worst_rho_s, mut failures) = (0.0f64, 0.0f64, 0.0f64, 0);
    for _ in 0..100 {
        let nu = rng.random_range(-1.5..=1.5);
        let rho0 = rng.random_range(-0.9..=0.9);
        let rho_s = rng.random_range(-0.9..=0.9);
        let p0 = rng.random_range(0.15..=0.6);
        let p1 = p0 + rng.random_range(0.15..=0.35);
        let Ok(inputs) = ExclusionInputs::forward(p0, p1, nu, rho0) else {
            failures += 1;
            continue;
        };
        let Ok((nu_hat, rho0_hat)) = solve_nu_rho0(inputs) else {
            failures += 1;
            continue;
        };
        worst_nu = worst_nu.max((nu_hat - nu).abs());
        worst_rho0 = worst_rho0.max((rho0_hat - rho0).abs());
        // Interval probability between the censoring point and an interior
        // selection level for the instrument-on row.
        let m0 = std_quantile(1.0 - p1).unwrap();
        let ms = m0 + rng.random_range(0.2..=1.5);
        let p = biv_cdf(ms, nu, rho_s) - biv_cdf(m0, nu, rho0);
        match solve_rho_s(p, m0, ms, nu_hat, rho0_hat) {
            Ok(r) => worst_rho_s = worst_rho_s.max((r - rho_s).abs()),
            Err(_) => failures += 1,
        }
    }
    let worst = worst_nu.max(worst_rho0).max(worst_rho_s);
    outcome(
        failures == 0 && worst <= 1e-8,
        format!("100 configurations, {failures} failures; max error nu {worst_nu:.1e}, rho0 {worst_rho0:.1e}, rho_s {worst_rho_s:.1e}"),
    )
}

// 5. Fitted paths against the tobit type-3 mapping.

fn estimator_consistency() -> Outcome {
    let start = Instant::now();
    let p = hsm(0.5);
    let reps = 20;
    let s_points = vec![0.0, 10.0, 30.0];
    let mut mae = Vec::new();
    let mut failed = 0;
    // Per coefficient: errors against the truth across replications.
    let mut errors: BTreeMap<(char, usize, usize), Vec<f64>> = BTreeMap::new();
    for rep in 0..reps {
        let (data, _) = simulate_hsm(5000, &p, 5000 + rep).unwrap();
        let f = match fit_sample(&data, s_points.clone(), &deciles()) {
            Ok(f) => f,
            Err(_) => {
                failed += 1;
                continue;
            }
        };
        let mut abs = Vec::new();
        for si in 0..s_points.len() {
            for yi in 0..f.y_points().len() {
                match f.sorting_index(si, yi, &Z0) {
                    Some(u) => abs.push((link(u) - 0.5).abs()),
                    None => failed += 1,
                }
            }
        }
        mae.push(abs.iter().sum::<f64>() / abs.len() as f64);
        for (si, &s) in s_points.iter().enumerate() {
            for (c, e) in (&f.mu[si] - p.true_mu(s)).iter().enumerate() {
                errors.entry(('m', si, c)).or_default().push(*e);
            }
        }
        for (yi, &y) in f.y_points().iter().enumerate() {
            for (c, e) in (&f.nu[yi] - p.true_nu(y)).iter().enumerate() {
                errors.entry(('n', yi, c)).or_default().push(*e);
            }
        }
    }
    let mean_mae = mae.iter().sum::<f64>() / mae.len().max(1) as f64;
    let mut worst_t = 0.0f64;
    for e in errors.values() {
        let k = e.len() as f64;
        let m = e.iter().sum::<f64>() / k;
        let sd = (e.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
        worst_t = worst_t.max(m.abs() / (sd / k.sqrt()));
    }
    let fast = within(start, Duration::from_secs(15 * 60));
    outcome(
        failed == 0 && mean_mae <= 0.05 && worst_t <= 3.0 && fast,
        format!(
            "{reps} reps at n = 5000, {failed} failed cells; mean abs error {mean_mae:.4} (limit 0.05); \
             largest |bias| over {} mu/nu coefficients = {worst_t:.2} MC SE (limit 3)",
            errors.len()
        ),
    )
}

// 6. Sorting that changes sign across the selection distribution.

fn ramp(s: f64) -> f64 {
    0.3 - 0.6 * ((s - 24.0) / 20.0).clamp(0.0, 1.0)
}

fn heterogeneous_sorting() -> Outcome {
    // A continuous instrument moves the censoring probability across rows,
    // which pins down the sorting at the censoring point.
    let mut sampler = CovariateSampler::default_design();
    sampler.columns[2] = ColumnDist::Normal { mean: 0.0, sd: 1.0 };
    let base = HsmParams {
        nu: vec![1.0, 0.5],
        mu: vec![22.0, 4.0, 10.0],
        sigma_u: 1.0,
        sigma_v: 10.0,
        rho: 0.3,
        sampler,
    };
    let mut paths = base.paths().unwrap();
    paths.corr = Arc::new(|s, _, _| ramp(s));
    let data = simulate_bdr(20_000, &paths, &base.sampler, 601, &BdrOptions::default()).unwrap();
    let s_points = vec![0.0, 10.0, 20.0, 30.0, 38.0, 46.0];
    let quantiles = [0.2, 0.35, 0.5, 0.65, 0.8];
    let f = fit_sample(&data, s_points.clone(), &quantiles).unwrap();
    if !f.failed_cells().is_empty() {
        return outcome(false, format!("failed cells {:?}", f.failed_cells()));
    }
    let records = influence(&f, &data).unwrap();
    let b = 500;
    let draws = bootstrap_draws(&records, b, 602).unwrap();
    let ny = f.y_points().len();
    let mut levels = Vec::new();
    let mut worst_t = 0.0f64;
    for (si, &s) in s_points.iter().enumerate() {
        let level = (0..ny).map(|yi| link(f.sorting_index(si, yi, &Z0).unwrap())).sum::<f64>() / ny as f64;
        let reps: Vec<f64> = (0..b)
            .map(|r| (0..ny).map(|yi| link(draws[&(si, yi)][(r, 0)])).sum::<f64>() / ny as f64)
            .collect();
        let m = reps.iter().sum::<f64>() / b as f64;
        let se = (reps.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (b as f64 - 1.0)).sqrt();
        let t = (level - ramp(s)).abs() / se;
        worst_t = worst_t.max(t);
        levels.push((s, level, se));
    }
    let flips: Vec<usize> = (1..levels.len()).filter(|&k| levels[k - 1].1.signum() != levels[k].1.signum()).collect();
    let at_threshold = flips.len() == 1 && levels[flips[0] - 1].0 < 34.0 && levels[flips[0]].0 > 34.0;
    let shown: Vec<String> = levels.iter().map(|(s, l, se)| format!("{s}:{l:+.3}±{se:.3}")).collect();
    outcome(
        at_threshold && worst_t <= 3.0,
        format!(
            "y-averaged sorting by s [{}]; single sign change between the grid points around 34: {at_threshold}; \
             largest deviation from the true level {worst_t:.2} bootstrap SE (limit 3)",
            shown.join(" ")
        ),
    )
}

// 7. Coverage of the 95% uniform band for a constant sorting surface.

fn band_coverage() -> Outcome {
    let start = Instant::now();
    let p = hsm(0.5);
    let truth = 0.5;
    let reps = 50;
    let mut covered = 0;
    let mut errors = Vec::new();
    let contrast = Contrast::SortingAt(Z0.to_vec());
    for rep in 0..reps {
        let (data, _) = simulate_hsm(2000, &p, 7000 + rep).unwrap();
        let run = || -> cdr_core::Result<bool> {
            let f = fit_sample(&data, vec![0.0, 10.0, 30.0], &deciles())?;
            let r = influence(&f, &data)?;
            let v = variance_rho(&r);
            let d = bootstrap_draws(&r, 200, 7100 + rep)?;
            let cells: Vec<_> = r.cells().collect();
            if cells.len() != 27 {
                return Ok(false);
            }
            let band = uniform_band(&r, &v, &d, &contrast, 0.95, &cells)?;
            Ok(band.lower.iter().zip(&band.upper).all(|(l, u)| *l <= truth && truth <= *u))
        };
        match run() {
            Ok(true) => covered += 1,
            Ok(false) => {}
            Err(e) => errors.push(format!("rep {rep}: {e}")),
        }
    }
    let rate = covered as f64 / reps as f64;
    let fast = within(start, Duration::from_secs(30 * 60));
    outcome(
        (0.85..=1.0).contains(&rate) && fast,
        format!(
            "covered in {covered}/{reps} replications ({rate:.2}, required [0.85, 1.00]); \
             {} replications without a band counted as not covered{}",
            errors.len(),
            if errors.is_empty() { String::new() } else { format!(": {}", errors.join("; ")) }
        ),
    )
}

// 8. With one cell the max-t quantile is the two-sided normal quantile.

fn single_cell_critical_value() -> Outcome {
    let (data, _) = simulate_hsm(3000, &hsm(0.5), 801).unwrap();
    let f = fit_sample(&data, vec![0.0, 10.0], &[0.5]).unwrap();
    let r = influence(&f, &data).unwrap();
    let v = variance_rho(&r);
    let d = bootstrap_draws(&r, 5000, 802).unwrap();
    let cv = max_t_critical(&d, &r, &v, &Contrast::SortingAt(Z0.to_vec()), 0.95, &[(1, 0)]).unwrap();
    outcome((1.86..=2.06).contains(&cv), format!("cv(0.95) = {cv:.4} with B = 5000, required [1.86, 2.06]"))
}

// 9. Decompositions telescope; single-difference designs are attributed to
// the component that differs.

fn two_groups(p1: &HsmParams, p0: &HsmParams, n: usize, seed: u64, s_points: Vec<f64>, quantiles: &[f64]) -> [(ObservationTable, CoefficientPaths); 2] {
    let (d1, _) = simulate_hsm(n, p1, seed).unwrap();
    let (d0, _) = simulate_hsm(n, p0, seed + 1).unwrap();
    let mut ys: Vec<f64> = d1.selected_outcomes().into_iter().chain(d0.selected_outcomes()).collect();
    ys.sort_by(f64::total_cmp);
    let pts: Vec<f64> = quantiles.iter().map(|q| ys[(q * (ys.len() - 1) as f64).round() as usize]).collect();
    let mut pts_unique = pts.clone();
    pts_unique.dedup();
    let grid = GridSpec::new(s_points, pts_unique).unwrap();
    let fit_one = |d: &ObservationTable| fit(d, &grid, &intercept_layout(d), &FitOptions::default()).unwrap();
    let (f1, f0) = (fit_one(&d1), fit_one(&d0));
    [(d1, f1), (d0, f0)]
}

fn decomposition_identities() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    let mut p1 = hsm(0.2);
    p1.nu = vec![1.4, 0.6];
    p1.mu = vec![2.0, 5.0, 40.0];
    let [(d1, f1), (d0, f0)] = two_groups(&p1, &hsm(0.5), 3000, 901, vec![0.0, 10.0, 30.0], &deciles());
    let g1 = GroupInputs::new(&f1, &d1).unwrap();
    let g0 = GroupInputs::new(&f0, &d0).unwrap();
    let taus: Vec<f64> = (1..=19).map(|k| k as f64 / 20.0).collect();
    let mut worst = 0.0f64;
    for (lo, hi) in [(0.0, f64::INFINITY), (0.0, 10.0), (10.0, 30.0), (30.0, f64::INFINITY)] {
        let t = wage_decomposition(&g1, &g0, lo, hi, &taus).unwrap();
        for i in 0..taus.len() {
            let sum = t.wage_structure[i] + t.selection_sorting[i] + t.selection_structure[i] + t.composition[i];
            worst = worst.max((sum - t.total[i]).abs());
        }
    }
    let h = hours_decomposition(&g1, &g0, &[0.0, 10.0, 30.0]).unwrap();
    for i in 0..h.total.len() {
        worst = worst.max((h.structure[i] + h.composition[i] - h.total[i]).abs());
    }
    pass &= worst <= 1e-12;
    notes.push(format!("telescoping residual {worst:.1e}"));

    let quantiles: Vec<f64> = (1..100).map(|k| k as f64 / 100.0).collect();
    let taus = [0.25, 0.5, 0.75];
    let composition = {
        let mut p = hsm(0.5);
        p.sampler.columns[1] = ColumnDist::Normal { mean: 1.0, sd: 1.0 };
        (p, hsm(0.5))
    };
    let designs: [(Component, (HsmParams, HsmParams)); 4] = [
        (Component::WageStructure, (HsmParams { nu: vec![1.5, 0.5], ..hsm(0.5) }, hsm(0.5))),
        (Component::SelectionSorting, (hsm(0.7), hsm(-0.7))),
        (
            Component::SelectionStructure,
            (HsmParams { mu: vec![15.0, 5.0, 40.0], ..hsm(0.8) }, HsmParams { mu: vec![-15.0, 5.0, 40.0], ..hsm(0.8) }),
        ),
        (Component::Composition, composition),
    ];
    for (k, (component, (a, b))) in designs.into_iter().enumerate() {
        let [(d1, f1), (d0, f0)] = two_groups(&a, &b, 10_000, 910 + 2 * k as u64, vec![0.0], &quantiles);
        let g1 = GroupInputs::new(&f1, &d1).unwrap();
        let g0 = GroupInputs::new(&f0, &d0).unwrap();
        let t = wage_decomposition(&g1, &g0, 0.0, f64::INFINITY, &taus).unwrap();
        let share = t.component(component).iter().sum::<f64>() / t.total.iter().sum::<f64>();
        pass &= share >= 0.9;
        notes.push(format!("{} {:.0}% of a {:+.3} gap", component.name(), 100.0 * share, t.total.iter().sum::<f64>() / 3.0));
    }
    outcome(pass, notes.join(", "))
}

// 10. The smooth probability floor against its closed form.

fn smooth_floor_shape() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst_jump = 0.0f64;
    let mut worst_formula = 0.0f64;
    let mut below_eps = 0;
    for cfg in [FloorConfig::default(), FloorConfig::with_tau(1e-3).unwrap(), FloorConfig::with_tau(0.05).unwrap()] {
        let (tau, eps) = (cfg.tau, cfg.eps);
        let w = tau - eps;
        let closed = |p: f64| {
            if p >= tau {
                (p, 1.0)
            } else {
                let t = ((p - tau) / w).tanh();
                (w * t + tau, 1.0 - t * t)
            }
        };
        let (f_at, d_at) = smooth_floor(tau, cfg);
        let (f_below, d_below) = smooth_floor(tau.next_down(), cfg);
        // The jump excludes the change of the identity branch over one ulp.
        worst_jump = worst_jump.max((f_at - f_below - (tau - tau.next_down())).abs()).max((d_at - d_below).abs());
        for k in 0..10_000 {
            let p = if k % 2 == 0 { rng.random_range(-1.0..=1.0) } else { rng.random_range(tau - 10.0 * w..=tau + w) };
            let (f, d) = smooth_floor(p, cfg);
            let (cf, cd) = closed(p);
            worst_formula = worst_formula.max((f - cf).abs()).max((d - cd).abs());
            below_eps += usize::from(f < eps);
        }
    }
    outcome(
        worst_jump <= 1e-12 && worst_formula <= 1e-15 && below_eps == 0,
        format!(
            "jump at tau {worst_jump:.1e}, max deviation from the closed form {worst_formula:.1e} over 3 x 10^4 points, \
             {below_eps} values below eps"
        ),
    )
}

// 11. The command-line pipeline is reproducible byte for byte.

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let e = entry.unwrap();
        let path = e.path();
        let name = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
        if path.is_dir() {
            for (k, v) in snapshot(&path) {
                out.insert(format!("{name}/{k}"), v);
            }
        } else {
            out.insert(name, fs::read(&path).unwrap());
        }
    }
    out
}

fn pipeline(dir: &Path, workers: Option<usize>) -> Vec<i32> {
    let common = "covariates = x1\ninstruments = z1\ns_points = 0, 10, 30\nrho0 = const\nrho = const\nseed = 5\n";
    let steps = [
        (Command::Simulate, "output = sim\nsim_groups = 2\nsim_n = 1500\nsim1_nu = 1.3, 0.5\nsim1_rho = 0.2\n".to_string()),
        (Command::Fit, format!("input = sim/data.csv\noutput = fit\n{common}")),
        (Command::Bands, format!("input = sim/data.csv\noutput = bands\nz0 = z1=1\nbootstrap = 100\n{common}")),
        (
            Command::Decompose,
            format!("input = sim/data.csv\noutput = decompose\ngroup = group\nbootstrap = 30\ntaus = 0.25, 0.5, 0.75\n{common}"),
        ),
    ];
    steps
        .iter()
        .map(|(cmd, text)| execute(*cmd, &RunConfig::parse(text, dir, &[]).unwrap(), workers))
        .collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    let mut codes = Vec::new();
    for workers in [Some(1), Some(4), None] {
        codes.extend(pipeline(dir.path(), workers));
        runs.push(snapshot(dir.path()));
        for entry in fs::read_dir(dir.path()).unwrap() {
            fs::remove_dir_all(entry.unwrap().path()).unwrap();
        }
    }
    let identical = runs.windows(2).all(|w| w[0] == w[1]);
    let files = runs[0].len();
    outcome(
        codes.iter().all(|&c| c == 0) && identical && files > 0,
        format!("simulate, fit, bands, decompose with 1, 4 and default workers: exit codes {codes:?}, {files} artifacts, identical: {identical}"),
    )
}
