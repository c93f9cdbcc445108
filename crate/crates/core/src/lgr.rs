//! Local Gaussian representation and the identification solvers.
//!
//! Any bivariate CDF can be written pointwise as Φ₂(μ, ν; ρ) with
//! μ = Φ⁻¹(F_S), ν = Φ⁻¹(F_Y) and a local correlation ρ. The solvers below
//! recover (ν, ρ₀) from the binary-instrument system at the censoring point
//! and ρ at interior selection levels from interval probabilities.

use crate::error::{CdrError, Result};
use crate::gauss2d::{biv_cdf, std_cdf, std_pdf, std_quantile, BivPartials};

/// Endpoint of the correlation search interval.
pub const RHO_LIMIT: f64 = 1.0 - 1e-9;
/// Residual tolerance accepted from every solver.
pub const RESIDUAL_TOL: f64 = 1e-10;
pub const MAX_ITER: usize = 200;

/// Parameters of the local Gaussian representation at one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LgrPoint {
    pub mu: f64,
    pub nu: f64,
    pub rho: f64,
}

impl LgrPoint {
    pub fn joint_cdf(&self) -> f64 {
        biv_cdf(self.mu, self.nu, self.rho)
    }

    /// Fréchet–Hoeffding bounds for the joint CDF implied by the marginals.
    pub fn frechet_bounds(&self) -> (f64, f64) {
        frechet_bounds(std_cdf(self.mu), std_cdf(self.nu))
    }
}

pub fn frechet_bounds(f_s: f64, f_y: f64) -> (f64, f64) {
    ((f_s + f_y - 1.0).max(0.0), f_s.min(f_y))
}

/// Inputs of the two-equation system at the censoring point s₀.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExclusionInputs {
    /// Pr(S > s₀ | Z = 0)
    pub p0: f64,
    /// Pr(S > s₀ | Z = 1)
    pub p1: f64,
    /// Pr(S > s₀, Y ≤ y | Z = 0)
    pub q0: f64,
    /// Pr(S > s₀, Y ≤ y | Z = 1)
    pub q1: f64,
}

impl ExclusionInputs {
    fn validate(&self) -> Result<()> {
        for p in [self.p0, self.p1] {
            if !(p > 0.0 && p < 1.0) {
                return Err(CdrError::DegenerateMarginal(p));
            }
        }
        if (self.p1 - self.p0).abs() < 1e-12 {
            return Err(CdrError::WeakInstrument(self.p0));
        }
        if self.p0 > self.p1 {
            return Err(CdrError::InvalidInput(format!(
                "relevance requires p0 < p1, got p0 = {}, p1 = {}",
                self.p0, self.p1
            )));
        }
        for (q, p) in [(self.q0, self.p0), (self.q1, self.p1)] {
            if !(0.0..=p).contains(&q) {
                return Err(CdrError::InfeasibleProbability { value: q, lower: 0.0, upper: p });
            }
        }
        Ok(())
    }

    /// The probabilities implied by (ν, ρ₀) under the representation.
    pub fn forward(p0: f64, p1: f64, nu: f64, rho0: f64) -> Result<Self> {
        let q = |p: f64| -> Result<f64> {
            let m = std_quantile(1.0 - p)?;
            Ok(std_cdf(nu) - biv_cdf(m, nu, rho0))
        };
        Ok(Self { p0, p1, q0: q(p0)?, q1: q(p1)? })
    }
}

/// Safeguarded Newton iteration for an increasing scalar function on
/// [lo, hi]. `f` returns (value, derivative).
pub(crate) fn solve_increasing(
    f: impl Fn(f64) -> (f64, f64),
    target: f64,
    mut lo: f64,
    mut hi: f64,
    start: f64,
) -> Result<f64> {
    let mut x = start.clamp(lo, hi);
    let mut last_resid = f64::NAN;
    for _ in 0..MAX_ITER {
        let (fx, dfx) = f(x);
        let resid = fx - target;
        last_resid = resid;
        if resid == 0.0 {
            return Ok(x);
        }
        if resid < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - resid / dfx;
        let next = if dfx > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 1e-15 * (1.0 + x.abs()) || hi - lo <= 1e-15 * (1.0 + x.abs()) {
            return Ok(next);
        }
        x = next;
    }
    if last_resid.abs() <= RESIDUAL_TOL {
        return Ok(x);
    }
    Err(CdrError::Nonconvergence { iterations: MAX_ITER, residuals: vec![last_resid] })
}

/// Solve Φ₂(μ, ν; ρ) = target for ρ, with the Fréchet bounds mapping to ±1.
fn rho_for_joint(mu: f64, nu: f64, target: f64) -> Result<f64> {
    let (lower, upper) = frechet_bounds(std_cdf(mu), std_cdf(nu));
    let slack = 1e-14;
    if target < lower - slack || target > upper + slack {
        return Err(CdrError::InfeasibleProbability { value: target, lower, upper });
    }
    if (target - upper).abs() <= slack {
        return Ok(1.0);
    }
    if (target - lower).abs() <= slack {
        return Ok(-1.0);
    }
    let at_hi = biv_cdf(mu, nu, RHO_LIMIT);
    if target >= at_hi {
        return Ok(1.0);
    }
    let at_lo = biv_cdf(mu, nu, -RHO_LIMIT);
    if target <= at_lo {
        return Ok(-1.0);
    }
    solve_increasing(
        |r| {
            let p = BivPartials::at(mu, nu, r);
            (p.value, p.dr)
        },
        target,
        -RHO_LIMIT,
        RHO_LIMIT,
        0.0,
    )
}

/// Local correlation ρ with Φ₂(Φ⁻¹(f_s), Φ⁻¹(f_y); ρ) = f_joint.
pub fn local_correlation(f_joint: f64, f_s: f64, f_y: f64) -> Result<f64> {
    if f_joint.is_nan() || f_s.is_nan() || f_y.is_nan() {
        return Err(CdrError::Domain("NaN probability".into()));
    }
    for p in [f_s, f_y] {
        if p <= 0.0 || p >= 1.0 {
            return Err(CdrError::DegenerateMarginal(p));
        }
    }
    let mu = std_quantile(f_s)?;
    let nu = std_quantile(f_y)?;
    rho_for_joint(mu, nu, f_joint)
}

/// Correlation at an interior selection level from the interval probability
/// Pr(s₀ < S ≤ s, Y ≤ y | Z = z).
pub fn solve_rho_s(p_interval: f64, mu_z_s0: f64, mu_z_s: f64, nu: f64, rho0: f64) -> Result<f64> {
    let target = p_interval + biv_cdf(mu_z_s0, nu, rho0);
    if !(target > 0.0 && target < 1.0) {
        return Err(CdrError::InfeasibleProbability { value: target, lower: 0.0, upper: 1.0 });
    }
    rho_for_joint(mu_z_s, nu, target)
}

fn exclusion_residuals(m: [f64; 2], q: [f64; 2], nu: f64, rho: f64) -> [f64; 2] {
    let base = std_cdf(nu);
    [
        base - biv_cdf(m[0], nu, rho) - q[0],
        base - biv_cdf(m[1], nu, rho) - q[1],
    ]
}

/// (ν, ρ₀) from the binary-instrument system
/// q_z = Φ(ν) − Φ₂(Φ⁻¹(1 − p_z), ν; ρ₀), z ∈ {0, 1}.
pub fn solve_nu_rho0(inputs: ExclusionInputs) -> Result<(f64, f64)> {
    inputs.validate()?;
    let m = [std_quantile(1.0 - inputs.p0)?, std_quantile(1.0 - inputs.p1)?];
    let q = [inputs.q0, inputs.q1];

    if let Some(sol) = newton_system(m, q) {
        return Ok(sol);
    }
    let (nu, rho) = nested_bisection(m, q)?;
    let r = exclusion_residuals(m, q, nu, rho);
    if r[0].abs().max(r[1].abs()) > RESIDUAL_TOL {
        return Err(CdrError::Nonconvergence { iterations: MAX_ITER, residuals: r.to_vec() });
    }
    Ok((nu, rho))
}

fn newton_system(m: [f64; 2], q: [f64; 2]) -> Option<(f64, f64)> {
    let ratio = 0.5 * (q[0] / (1.0 - std_cdf(m[0])) + q[1] / (1.0 - std_cdf(m[1])));
    let mut nu = std_quantile(ratio.clamp(1e-6, 1.0 - 1e-6)).ok()?;
    let mut rho = 0.0;
    let norm = |r: [f64; 2]| r[0].abs().max(r[1].abs());
    let mut resid = exclusion_residuals(m, q, nu, rho);
    for _ in 0..MAX_ITER {
        if norm(resid) <= 1e-15 {
            break;
        }
        // Jacobian of the residuals in (ν, ρ).
        let rows: Vec<[f64; 2]> = m
            .iter()
            .map(|&mz| {
                let p = BivPartials::at(mz, nu, rho);
                [std_pdf(nu) - p.db, -p.dr]
            })
            .collect();
        let det = rows[0][0] * rows[1][1] - rows[0][1] * rows[1][0];
        if !det.is_finite() || det.abs() < 1e-300 {
            return None;
        }
        let dnu = (resid[0] * rows[1][1] - resid[1] * rows[0][1]) / det;
        let drho = (rows[0][0] * resid[1] - rows[1][0] * resid[0]) / det;
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand_nu = nu - step * dnu;
            let cand_rho = rho - step * drho;
            if cand_rho.abs() < RHO_LIMIT && cand_nu.is_finite() {
                let cand = exclusion_residuals(m, q, cand_nu, cand_rho);
                if norm(cand) < norm(resid) {
                    nu = cand_nu;
                    rho = cand_rho;
                    resid = cand;
                    improved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (norm(resid) <= RESIDUAL_TOL).then_some((nu, rho))
}

/// Fallback: for each ρ solve the z = 0 equation for ν, then bisect the
/// z = 1 residual in ρ.
fn nested_bisection(m: [f64; 2], q: [f64; 2]) -> Result<(f64, f64)> {
    let nu_given_rho = |rho: f64| -> Result<f64> {
        // Pr(S > s₀, Y ≤ ν | Z = 0) is increasing in ν.
        solve_increasing(
            |nu| {
                let p = BivPartials::at(m[0], nu, rho);
                (std_cdf(nu) - p.value, std_pdf(nu) - p.db)
            },
            q[0],
            -40.0,
            40.0,
            0.0,
        )
    };
    let outer = |rho: f64| -> Result<f64> {
        let nu = nu_given_rho(rho)?;
        Ok(std_cdf(nu) - biv_cdf(m[1], nu, rho) - q[1])
    };
    let (mut lo, mut hi) = (-RHO_LIMIT, RHO_LIMIT);
    let (mut f_lo, f_hi) = (outer(lo)?, outer(hi)?);
    if f_lo.signum() == f_hi.signum() {
        return Err(CdrError::Nonconvergence { iterations: 0, residuals: vec![f_lo, f_hi] });
    }
    for _ in 0..MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let f_mid = outer(mid)?;
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let rho = 0.5 * (lo + hi);
    Ok((nu_given_rho(rho)?, rho))
}
