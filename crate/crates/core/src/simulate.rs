//! Synthetic data: the Gaussian tobit type-3 model and general bivariate
//! distribution-regression designs given through their coefficient paths.
//!
//! Every row draws from its own ChaCha20 stream (`seed`, stream = row
//! index), so tables are reproducible and independent of thread count.

use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{CdrError, Result};
use crate::gauss2d::{biv_cdf, std_cdf};
use crate::estimator::{CoefficientPaths, GridSpec};
use crate::likelihood::{CovariateLayout, ObservationTable};

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnDist {
    Intercept,
    Normal { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
    Uniform { lo: f64, hi: f64 },
}

/// Independent covariate columns; `x_cols` lists the outcome covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSampler {
    pub names: Vec<String>,
    pub columns: Vec<ColumnDist>,
    pub x_cols: Vec<usize>,
}

impl CovariateSampler {
    /// Intercept, one standard-normal regressor and a Bernoulli(0.5)
    /// instrument that is excluded from the outcome covariates.
    pub fn default_design() -> Self {
        Self {
            names: vec!["const".into(), "x1".into(), "z1".into()],
            columns: vec![
                ColumnDist::Intercept,
                ColumnDist::Normal { mean: 0.0, sd: 1.0 },
                ColumnDist::Bernoulli { p: 0.5 },
            ],
            x_cols: vec![0, 1],
        }
    }

    pub fn d_z(&self) -> usize {
        self.columns.len()
    }

    pub fn intercept(&self) -> Option<usize> {
        self.columns.iter().position(|c| *c == ColumnDist::Intercept)
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.columns
            .iter()
            .map(|c| match *c {
                ColumnDist::Intercept => 1.0,
                ColumnDist::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
                ColumnDist::Bernoulli { p } => {
                    if rng.random::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                }
                ColumnDist::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.names.len() != self.columns.len() {
            return Err(CdrError::InvalidInput("one name per covariate column".into()));
        }
        for c in &self.columns {
            let ok = match *c {
                ColumnDist::Intercept => true,
                ColumnDist::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
                ColumnDist::Bernoulli { p } => (0.0..=1.0).contains(&p),
                ColumnDist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            };
            if !ok {
                return Err(CdrError::InvalidInput(format!("bad covariate distribution {c:?}")));
            }
        }
        if self.x_cols.iter().any(|&c| c >= self.columns.len()) {
            return Err(CdrError::InvalidInput("outcome covariate column out of range".into()));
        }
        Ok(())
    }
}

pub fn row_rng(seed: u64, row: usize) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(row as u64);
    r
}

type PathFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;
type CorrFn = Arc<dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync>;

/// True model `Pr(S* ≤ s, Y* ≤ y | z) = Φ₂(-z'μ(s), -x'ν(y); c(s, y, z))`
/// where `c` is the correlation `g(z'ρ(s, y))` at the row.
#[derive(Clone)]
pub struct LatentPaths {
    pub mu: PathFn,
    pub nu: PathFn,
    pub corr: CorrFn,
    pub x_cols: Vec<usize>,
}

impl std::fmt::Debug for LatentPaths {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LatentPaths").field("x_cols", &self.x_cols).finish_non_exhaustive()
    }
}

impl LatentPaths {
    fn x_index(&self, y: f64, z: &[f64]) -> f64 {
        let nu = (self.nu)(y);
        self.x_cols.iter().zip(nu.iter()).map(|(&c, v)| z[c] * v).sum()
    }

    fn z_index(&self, s: f64, z: &[f64]) -> f64 {
        z.iter().zip((self.mu)(s).iter()).map(|(a, b)| a * b).sum()
    }

    pub fn selection_cdf(&self, s: f64, z: &[f64]) -> f64 {
        std_cdf(-self.z_index(s, z))
    }

    pub fn outcome_cdf(&self, y: f64, z: &[f64]) -> f64 {
        std_cdf(-self.x_index(y, z))
    }

    pub fn joint_cdf(&self, s: f64, y: f64, z: &[f64]) -> f64 {
        biv_cdf(-self.z_index(s, z), -self.x_index(y, z), (self.corr)(s, y, z))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HsmParams {
    /// Outcome coefficients over the sampler's outcome covariates.
    pub nu: Vec<f64>,
    /// Selection coefficients over all covariates.
    pub mu: Vec<f64>,
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub rho: f64,
    pub sampler: CovariateSampler,
}

impl HsmParams {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if !(self.rho.abs() < 1.0) {
            return Err(CdrError::InvalidInput(format!("|rho| must be below 1, got {}", self.rho)));
        }
        if !(self.sigma_u > 0.0 && self.sigma_v > 0.0) {
            return Err(CdrError::InvalidInput("scale parameters must be positive".into()));
        }
        if self.mu.len() != self.sampler.d_z() || self.nu.len() != self.sampler.x_cols.len() {
            return Err(CdrError::InvalidInput("coefficient lengths do not match the covariate design".into()));
        }
        Ok(())
    }

    fn intercept_positions(&self) -> Result<(usize, usize)> {
        let zi = self
            .sampler
            .intercept()
            .ok_or_else(|| CdrError::InvalidInput("design needs an intercept column".into()))?;
        let xi = self
            .sampler
            .x_cols
            .iter()
            .position(|&c| c == zi)
            .ok_or_else(|| CdrError::InvalidInput("outcome covariates need the intercept".into()))?;
        Ok((zi, xi))
    }

    /// `μ(s)` with `Pr(S* > s | z) = Φ(z'μ(s))`.
    pub fn true_mu(&self, s: f64) -> DVector<f64> {
        let (zi, _) = self.intercept_positions().expect("validated design");
        let mut m = DVector::from_vec(self.mu.clone());
        m[zi] -= s;
        m / self.sigma_v
    }

    /// `ν(y)` with `Pr(Y* > y | x) = Φ(x'ν(y))`.
    pub fn true_nu(&self, y: f64) -> DVector<f64> {
        let (_, xi) = self.intercept_positions().expect("validated design");
        let mut v = DVector::from_vec(self.nu.clone());
        v[xi] -= y;
        v / self.sigma_u
    }

    /// Sorting coefficients over the given columns: `atanh(ρ)` on the
    /// intercept, zero elsewhere.
    /// True coefficient paths on a grid. The layout's sorting columns must
    /// include the intercept for the constant correlation to be representable.
    pub fn true_paths(&self, grid: &GridSpec, layout: &CovariateLayout) -> Result<CoefficientPaths> {
        self.validate()?;
        let zi = self.sampler.intercept().expect("validated design");
        if !layout.rho0.contains(&zi) || !layout.rho.contains(&zi) {
            return Err(CdrError::InvalidInput("sorting layout must contain the intercept".into()));
        }
        let ny = grid.y_points().len();
        let ns = grid.s_points().len();
        CoefficientPaths::from_parts(
            grid.clone(),
            layout.clone(),
            grid.s_points().iter().map(|&s| self.true_mu(s)).collect(),
            grid.y_points().iter().map(|&y| self.true_nu(y)).collect(),
            vec![self.true_rho(&layout.rho0); ny],
            vec![vec![self.true_rho(&layout.rho); ny]; ns - 1],
        )
    }

    pub fn true_rho(&self, cols: &[usize]) -> DVector<f64> {
        let zi = self.sampler.intercept().expect("validated design");
        DVector::from_iterator(cols.len(), cols.iter().map(|&c| if c == zi { self.rho.atanh() } else { 0.0 }))
    }

    pub fn paths(&self) -> Result<LatentPaths> {
        self.validate()?;
        self.intercept_positions()?;
        let (a, b, r) = (self.clone(), self.clone(), self.rho);
        Ok(LatentPaths {
            mu: Arc::new(move |s| a.true_mu(s)),
            nu: Arc::new(move |y| b.true_nu(y)),
            corr: Arc::new(move |_, _, _| r),
            x_cols: self.sampler.x_cols.clone(),
        })
    }

    /// Covariates and latent `(S*, Y*)` of one row.
    pub fn latent_row(&self, seed: u64, row: usize) -> (Vec<f64>, f64, f64) {
        let mut rng = row_rng(seed, row);
        let z = self.sampler.draw(&mut rng);
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let u = self.rho * e1 + (1.0 - self.rho * self.rho).sqrt() * e2;
        let s_star = z.iter().zip(&self.mu).map(|(a, b)| a * b).sum::<f64>() + self.sigma_v * e1;
        let xb: f64 = self.sampler.x_cols.iter().zip(&self.nu).map(|(&c, v)| z[c] * v).sum();
        (z, s_star, xb + self.sigma_u * u)
    }
}

fn assemble(rows: Vec<(Vec<f64>, f64, f64)>, d_z: usize, x_cols: Vec<usize>) -> Result<ObservationTable> {
    let n = rows.len();
    let mut s = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n * d_z);
    for (zr, s_star, y_star) in rows {
        let sv = s_star.max(0.0);
        s.push(sv);
        y.push((sv > 0.0).then_some(y_star));
        z.extend(zr);
    }
    ObservationTable::new(s, y, z, d_z, x_cols)
}

/// Tobit type-3 sample: `S = max(z'μ + σ_V V, 0)`, `Y = x'ν + σ_U U`
/// observed when `S > 0`, `(U, V)` standard bivariate Gaussian with
/// correlation ρ. Also returns the true coefficient paths.
pub fn simulate_hsm(n: usize, params: &HsmParams, seed: u64) -> Result<(ObservationTable, LatentPaths)> {
    let paths = params.paths()?;
    let rows: Vec<_> = (0..n).into_par_iter().map(|i| params.latent_row(seed, i)).collect();
    let table = assemble(rows, params.sampler.d_z(), params.sampler.x_cols.clone())?;
    Ok((table, paths))
}

/// Discretization and validation settings for [`simulate_bdr`].
#[derive(Debug, Clone, PartialEq)]
pub struct BdrOptions {
    /// Upper end of the selection grid; `Pr(S* > s_max)` must be negligible.
    pub s_max: f64,
    pub s_step: f64,
    /// Outcome range searched when inverting the conditional CDF.
    pub y_lo: f64,
    pub y_hi: f64,
    /// Covariate rows on which the model is checked for validity.
    pub check_rows: usize,
    pub check_y_points: usize,
    /// Largest tolerated total negative rectangle mass or tail mass outside
    /// the grids, per checked row.
    pub mass_tol: f64,
}

impl Default for BdrOptions {
    fn default() -> Self {
        Self { s_max: 100.0, s_step: 0.25, y_lo: -10.0, y_hi: 10.0, check_rows: 20, check_y_points: 81, mass_tol: 1e-4 }
    }
}

/// Checks the model at one covariate row: monotone marginals, Fréchet
/// bounds, nonnegative rectangle masses (up to `mass_tol` in total) and
/// negligible mass outside the sampling ranges.
pub fn check_dgp(paths: &LatentPaths, z: &[f64], opts: &BdrOptions) -> Result<()> {
    let ks = (opts.s_max / opts.s_step).round() as usize;
    let stride = (ks / 200).max(1);
    let s_pts: Vec<f64> = (0..=ks).step_by(stride).map(|k| k as f64 * opts.s_step).collect();
    let m = opts.check_y_points.max(2);
    let y_pts: Vec<f64> = (0..m).map(|k| opts.y_lo + (opts.y_hi - opts.y_lo) * k as f64 / (m - 1) as f64).collect();
    let fs: Vec<f64> = s_pts.iter().map(|&s| paths.selection_cdf(s, z)).collect();
    let fy: Vec<f64> = y_pts.iter().map(|&y| paths.outcome_cdf(y, z)).collect();
    if fs.windows(2).any(|w| w[1] < w[0] - 1e-12) {
        return Err(CdrError::InvalidDgp("selection marginal decreases in s".into()));
    }
    if fy.windows(2).any(|w| w[1] < w[0] - 1e-12) {
        return Err(CdrError::InvalidDgp("outcome marginal decreases in y".into()));
    }
    if 1.0 - fs[fs.len() - 1] > opts.mass_tol {
        return Err(CdrError::InvalidDgp(format!("selection mass above s_max = {}", opts.s_max)));
    }
    if fy[0] > opts.mass_tol || 1.0 - fy[m - 1] > opts.mass_tol {
        return Err(CdrError::InvalidDgp("outcome mass outside [y_lo, y_hi]".into()));
    }
    let mut prev: Vec<f64> = y_pts.iter().map(|&y| paths.joint_cdf(s_pts[0], y, z)).collect();
    let mut negative = 0.0;
    for (j, &s) in s_pts.iter().enumerate().skip(1) {
        let cur: Vec<f64> = y_pts.iter().map(|&y| paths.joint_cdf(s, y, z)).collect();
        for k in 0..m {
            let (lo, hi) = ((fs[j] + fy[k] - 1.0).max(0.0), fs[j].min(fy[k]));
            if cur[k] < lo - 1e-9 || cur[k] > hi + 1e-9 {
                return Err(CdrError::InvalidDgp(format!("joint CDF outside Fréchet bounds at s = {s}")));
            }
        }
        // Rectangles, including the ones reaching to y = ±∞.
        let mut below = 0.0;
        for k in 0..=m {
            let up = if k == m { fs[j] - fs[j - 1] } else { cur[k] - prev[k] };
            let mass = up - below;
            if mass < 0.0 {
                negative -= mass;
            }
            below = up;
        }
        prev = cur;
    }
    if negative > opts.mass_tol {
        return Err(CdrError::InvalidDgp(format!("negative probability mass {negative:.3e}")));
    }
    Ok(())
}

/// Draws from the model defined by `paths`: `S*` by inverting the selection
/// marginal on a grid of step `s_step` with linear interpolation inside a
/// bin, then `Y*` from the outcome distribution conditional on that bin.
/// The model is checked on the first `check_rows` covariate draws.
pub fn simulate_bdr(
    n: usize,
    paths: &LatentPaths,
    sampler: &CovariateSampler,
    seed: u64,
    opts: &BdrOptions,
) -> Result<ObservationTable> {
    sampler.validate()?;
    if paths.x_cols != sampler.x_cols {
        return Err(CdrError::InvalidInput("paths and sampler disagree on outcome covariates".into()));
    }
    if !(opts.s_step > 0.0 && opts.s_max > opts.s_step && opts.y_hi > opts.y_lo) {
        return Err(CdrError::InvalidInput("bad simulation grid".into()));
    }
    for i in 0..opts.check_rows.min(n) {
        let z = sampler.draw(&mut row_rng(seed, i));
        check_dgp(paths, &z, opts)?;
    }
    let ks = (opts.s_max / opts.s_step).round() as usize;
    let rows: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = row_rng(seed, i);
            let z = sampler.draw(&mut rng);
            let u1: f64 = rng.random();
            let u2: f64 = rng.random();
            let s_at = |k: usize| k as f64 * opts.s_step;
            let f0 = paths.selection_cdf(0.0, &z);
            if u1 <= f0 {
                return (z, 0.0, 0.0);
            }
            // Smallest k with F_S(s_k) ≥ u1.
            let (mut lo, mut hi) = (0usize, ks);
            if paths.selection_cdf(s_at(ks), &z) < u1 {
                let y = y_given_bin(paths, &z, s_at(ks - 1), s_at(ks), u2, opts);
                return (z, s_at(ks), y);
            }
            let mut flo = f0;
            let mut fhi = paths.selection_cdf(s_at(ks), &z);
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                let fm = paths.selection_cdf(s_at(mid), &z);
                if fm >= u1 {
                    hi = mid;
                    fhi = fm;
                } else {
                    lo = mid;
                    flo = fm;
                }
            }
            let frac = if fhi > flo { (u1 - flo) / (fhi - flo) } else { 1.0 };
            let s_star = s_at(lo) + frac * opts.s_step;
            let y = y_given_bin(paths, &z, s_at(lo), s_at(hi), u2, opts);
            (z, s_star, y)
        })
        .collect();
    assemble(rows, sampler.d_z(), sampler.x_cols.clone())
}

/// Inverts `y ↦ Pr(Y* ≤ y | s_lo < S* ≤ s_hi, z)` at `u` by bisection.
fn y_given_bin(paths: &LatentPaths, z: &[f64], s_lo: f64, s_hi: f64, u: f64, opts: &BdrOptions) -> f64 {
    let mass = paths.selection_cdf(s_hi, z) - paths.selection_cdf(s_lo, z);
    let target = u * mass;
    let g = |y: f64| paths.joint_cdf(s_hi, y, z) - paths.joint_cdf(s_lo, y, z);
    let (mut lo, mut hi) = (opts.y_lo, opts.y_hi);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if g(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-12 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}
