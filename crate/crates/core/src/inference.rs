//! Influence functions, variance estimates, the multiplier bootstrap and
//! uniform confidence bands for the sorting coefficients.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{CdrError, Cell, Result};
use crate::estimator::CoefficientPaths;
use crate::likelihood::{
    link, link_deriv, step1_objective, step1_row_scores, step2_loglik, step2_row_scores, step3_loglik,
    step3_row_scores, ObservationTable, Order,
};
use crate::simulate::row_rng;

/// Grid cell as (index into `s_points`, index into `y_points`). Cells with
/// `s` index 0 refer to the censoring-point sorting coefficients.
pub type CellKey = (usize, usize);

#[derive(Debug, Clone)]
pub struct InfluenceRecords {
    pub n: usize,
    pub s_points: Vec<f64>,
    pub y_points: Vec<f64>,
    /// Point estimates of the sorting coefficients per cell.
    pub estimates: BTreeMap<CellKey, DVector<f64>>,
    /// Columns of `z` the sorting coefficients load on, per cell.
    pub columns: BTreeMap<CellKey, Vec<usize>>,
    /// Per-observation influence of the sorting coefficients (n × d).
    pub psi_rho: BTreeMap<CellKey, DMatrix<f64>>,
    /// Per-observation influence of `μ̂_s` for each `s` point (n × d_z).
    pub psi_mu: Vec<DMatrix<f64>>,
    /// Per-observation influence of `(ν̂_y, ρ̂_{0y})` for each `y` point.
    pub psi_theta: Vec<DMatrix<f64>>,
    /// Cells skipped because step 3 failed there.
    pub skipped: Vec<CellKey>,
}

impl InfluenceRecords {
    pub fn cells(&self) -> impl Iterator<Item = CellKey> + '_ {
        self.psi_rho.keys().copied()
    }

    /// Stacked influence of the plug-in parameters `(μ̂₀, μ̂_s, ν̂_y, ρ̂_{0y})`.
    pub fn psi_eta(&self, (si, yi): CellKey) -> DMatrix<f64> {
        let blocks = [&self.psi_mu[0], &self.psi_mu[si], &self.psi_theta[yi]];
        let cols = blocks.iter().map(|b| b.ncols()).sum();
        let mut out = DMatrix::zeros(self.n, cols);
        let mut at = 0;
        for b in blocks {
            out.view_mut((0, at), (self.n, b.ncols())).copy_from(b);
            at += b.ncols();
        }
        out
    }
}

/// `-H⁻¹` for a negative definite `H`, or a singular-Hessian error.
fn neg_inverse(h: &DMatrix<f64>, cell: Cell) -> Result<DMatrix<f64>> {
    let neg = -h;
    let ev = neg.clone().symmetric_eigenvalues();
    let hi = ev.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let lo = ev.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if !(hi > 0.0) || !(lo > 1e-10 * hi) {
        return Err(CdrError::SingularHessian(cell));
    }
    neg.cholesky().map(|c| c.inverse()).ok_or(CdrError::SingularHessian(cell))
}

/// Influence functions at the fitted values: `ψ₁ = -H₁⁻¹S₁` per `s`,
/// `ψ₂ = -H₂⁻¹[S₂ + J₂ψ₁₀]` per `y` and
/// `ψ₃ = -H₃⁻¹[S₃ + J₃ψ₁₂]` per cell, with row scores in unfloored form
/// and `H`, `J` sample averages of exact second derivatives.
pub fn influence(fit: &CoefficientPaths, data: &ObservationTable) -> Result<InfluenceRecords> {
    let n = data.n();
    let s_points = fit.s_points();
    let y_points = fit.y_points();
    let layout = &fit.layout;
    let psi_mu: Vec<DMatrix<f64>> = s_points
        .par_iter()
        .enumerate()
        .map(|(si, &s)| {
            let cell = Cell::Selection { s };
            let e = step1_objective(&fit.mu[si], data, s, Order::Hessian)?;
            let hinv = neg_inverse(&e.hessian, cell)?;
            Ok(step1_row_scores(&fit.mu[si], data, s) * hinv)
        })
        .collect::<Result<_>>()?;
    let psi10 = &psi_mu[0];
    let d_x = data.d_x();
    let psi_theta: Vec<DMatrix<f64>> = y_points
        .par_iter()
        .enumerate()
        .map(|(yi, &y)| {
            let cell = Cell::Outcome { y };
            let theta = DVector::from_iterator(
                d_x + layout.d_rho0(),
                fit.nu[yi].iter().chain(fit.rho0[yi].iter()).copied(),
            );
            let e = step2_loglik(&theta, &fit.mu[0], data, layout, y, fit.floor)?;
            let hinv = neg_inverse(&e.hessian, cell)?;
            let rows = step2_row_scores(&theta, &fit.mu[0], data, layout, y)?;
            Ok((rows + psi10 * e.cross_jacobian.transpose()) * hinv)
        })
        .collect::<Result<_>>()?;

    let mut estimates = BTreeMap::new();
    let mut columns = BTreeMap::new();
    let mut psi_rho = BTreeMap::new();
    for yi in 0..y_points.len() {
        let key = (0, yi);
        estimates.insert(key, fit.rho0[yi].clone());
        columns.insert(key, layout.rho0.clone());
        psi_rho.insert(key, psi_theta[yi].columns(d_x, layout.d_rho0()).into_owned());
    }
    let cells: Vec<CellKey> =
        (1..s_points.len()).flat_map(|si| (0..y_points.len()).map(move |yi| (si, yi))).collect();
    let mut skipped = Vec::new();
    let step3: Vec<Option<Result<DMatrix<f64>>>> = cells
        .par_iter()
        .map(|&(si, yi)| {
            let eta = fit.step_params(si, yi)?;
            let (s, y) = (s_points[si], y_points[yi]);
            let cell = Cell::Joint { s, y };
            Some((|| {
                let e = step3_loglik(&eta.rho, &eta, data, layout, s, y, fit.floor)?;
                let hinv = neg_inverse(&e.hessian, cell)?;
                let rows = step3_row_scores(&eta.rho, &eta, data, layout, s, y)?;
                let lin = rows
                    + &psi_mu[0] * e.j3_mu0.transpose()
                    + &psi_mu[si] * e.j3_mus.transpose()
                    + &psi_theta[yi] * e.j3_theta.transpose();
                Ok(lin * hinv)
            })())
        })
        .collect();
    for (&key, r) in cells.iter().zip(step3) {
        match r {
            None => skipped.push(key),
            Some(r) => {
                let psi = r?;
                estimates.insert(key, fit.rho[key.0 - 1][key.1].clone().expect("fitted cell"));
                columns.insert(key, layout.rho.clone());
                psi_rho.insert(key, psi);
            }
        }
    }
    Ok(InfluenceRecords { n, s_points: s_points.to_vec(), y_points: y_points.to_vec(), estimates, columns, psi_rho, psi_mu, psi_theta, skipped })
}

/// `Σ̂ = n⁻¹ Σ ψψ'` per cell.
pub fn variance_rho(records: &InfluenceRecords) -> BTreeMap<CellKey, DMatrix<f64>> {
    records
        .psi_rho
        .iter()
        .map(|(&k, psi)| (k, psi.transpose() * psi / records.n as f64))
        .collect()
}

/// `n⁻¹ Σ ψ_a ψ_b'` between two cells.
pub fn cross_covariance(records: &InfluenceRecords, a: CellKey, b: CellKey) -> Option<DMatrix<f64>> {
    let (pa, pb) = (records.psi_rho.get(&a)?, records.psi_rho.get(&b)?);
    Some(pa.transpose() * pb / records.n as f64)
}

/// Standard-normal multipliers for draw `b`, demeaned.
pub fn multipliers(n: usize, seed: u64, b: usize) -> DVector<f64> {
    let mut rng = row_rng(seed, b);
    let mut w = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let mean = w.mean();
    w.add_scalar_mut(-mean);
    w
}

/// Bootstrap draws `ρ̂ + n⁻¹ Σ ωᵢ ψᵢ` per cell (B × d), one multiplier
/// vector per draw shared by all cells. Draw `b` uses stream `b` of `seed`,
/// so the values do not depend on `B` or on the thread count.
pub fn bootstrap_draws(records: &InfluenceRecords, b_draws: usize, seed: u64) -> Result<BTreeMap<CellKey, DMatrix<f64>>> {
    if b_draws < 2 {
        return Err(CdrError::InvalidInput("at least two bootstrap draws are needed".into()));
    }
    let per_draw: Vec<Vec<DVector<f64>>> = (0..b_draws)
        .into_par_iter()
        .map(|b| draws_for(records, &multipliers(records.n, seed, b)))
        .collect();
    Ok(assemble(records, per_draw))
}

/// Bootstrap draws from explicit multipliers (B × n, used as given).
pub fn bootstrap_draws_with(records: &InfluenceRecords, omega: &DMatrix<f64>) -> BTreeMap<CellKey, DMatrix<f64>> {
    let per_draw: Vec<Vec<DVector<f64>>> = (0..omega.nrows())
        .into_par_iter()
        .map(|b| draws_for(records, &omega.row(b).transpose()))
        .collect();
    assemble(records, per_draw)
}

fn draws_for(records: &InfluenceRecords, w: &DVector<f64>) -> Vec<DVector<f64>> {
    let n = records.n as f64;
    records
        .psi_rho
        .iter()
        .map(|(k, psi)| &records.estimates[k] + psi.tr_mul(w) / n)
        .collect()
}

fn assemble(records: &InfluenceRecords, per_draw: Vec<Vec<DVector<f64>>>) -> BTreeMap<CellKey, DMatrix<f64>> {
    let b = per_draw.len();
    records
        .psi_rho
        .keys()
        .enumerate()
        .map(|(c, &k)| {
            let d = records.estimates[&k].len();
            let mut m = DMatrix::zeros(b, d);
            for (r, draw) in per_draw.iter().enumerate() {
                m.row_mut(r).copy_from(&draw[c].transpose());
            }
            (k, m)
        })
        .collect()
}

/// Linear functional reported at each cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Contrast {
    /// `c'ρ` with a fixed vector (its length must match every cell used).
    Linear(DVector<f64>),
    /// The sorting function `g(w'ρ)` at a full covariate row `z₀`, where `w`
    /// picks the cell's sorting columns; linearized as `ġ(w'ρ̂) w`.
    SortingAt(Vec<f64>),
}

impl Contrast {
    /// Reported estimate and the gradient vector `c` at a cell.
    pub fn at(&self, rho: &DVector<f64>, cols: &[usize]) -> Result<(f64, DVector<f64>)> {
        match self {
            Contrast::Linear(c) => {
                if c.len() != rho.len() {
                    return Err(CdrError::InvalidInput(format!(
                        "contrast has length {}, cell has {} coefficients",
                        c.len(),
                        rho.len()
                    )));
                }
                Ok((c.dot(rho), c.clone()))
            }
            Contrast::SortingAt(z0) => {
                if cols.iter().any(|&c| c >= z0.len()) {
                    return Err(CdrError::InvalidInput("evaluation row is shorter than the covariate vector".into()));
                }
                let w = DVector::from_iterator(cols.len(), cols.iter().map(|&c| z0[c]));
                let u = w.dot(rho);
                Ok((link(u), w * link_deriv(u)))
            }
        }
    }
}

/// Level-quantile (inverse empirical CDF) over draws of the maximum over
/// `cells` of `√n |c'(ρ̂ᵇ - ρ̂)| / √(c'Σ̂c)`.
pub fn max_t_critical(
    draws: &BTreeMap<CellKey, DMatrix<f64>>,
    records: &InfluenceRecords,
    variance: &BTreeMap<CellKey, DMatrix<f64>>,
    contrast: &Contrast,
    level: f64,
    cells: &[CellKey],
) -> Result<f64> {
    if !(0.0 < level && level < 1.0) {
        return Err(CdrError::Domain(format!("level {level} outside (0, 1)")));
    }
    if cells.is_empty() {
        return Err(CdrError::InvalidInput("no cells for the critical value".into()));
    }
    let sn = (records.n as f64).sqrt();
    let mut b_draws = None;
    let mut per_cell = Vec::with_capacity(cells.len());
    for &k in cells {
        let (Some(d), Some(v), Some(est)) = (draws.get(&k), variance.get(&k), records.estimates.get(&k)) else {
            return Err(CdrError::InvalidInput(format!("cell {k:?} has no bootstrap draws")));
        };
        let (_, c) = contrast.at(est, &records.columns[&k])?;
        let var = c.dot(&(v * &c));
        if !(var > 0.0) {
            return Err(CdrError::DegenerateCell(cell_of(records, k)));
        }
        if *b_draws.get_or_insert(d.nrows()) != d.nrows() {
            return Err(CdrError::InvalidInput("cells have different numbers of draws".into()));
        }
        let base = c.dot(est);
        per_cell.push((d * &c).map(|v| sn * (v - base).abs() / var.sqrt()));
    }
    let b = b_draws.unwrap_or(0);
    let mut maxima: Vec<f64> = (0..b).map(|r| per_cell.iter().fold(0.0f64, |m, t| m.max(t[r]))).collect();
    maxima.sort_by(f64::total_cmp);
    let idx = ((level * b as f64).ceil() as usize).clamp(1, b) - 1;
    Ok(maxima[idx])
}

fn cell_of(records: &InfluenceRecords, (si, yi): CellKey) -> Cell {
    let s = records.s_points.get(si).copied().unwrap_or(f64::NAN);
    let y = records.y_points.get(yi).copied().unwrap_or(f64::NAN);
    Cell::Joint { s, y }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandSet {
    pub cells: Vec<CellKey>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub critical_value: f64,
    pub level: f64,
    /// Cells with `c'Σ̂c < 1e-12`, left out of the critical value.
    pub degenerate: Vec<CellKey>,
}

pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Band `estimate ± cv · √(c'Σ̂c / n)` at each requested cell.
pub fn band(
    records: &InfluenceRecords,
    variance: &BTreeMap<CellKey, DMatrix<f64>>,
    cv: f64,
    contrast: &Contrast,
    level: f64,
    cells: &[CellKey],
) -> Result<BandSet> {
    let n = records.n as f64;
    let mut out = BandSet {
        cells: cells.to_vec(),
        estimate: Vec::new(),
        se: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
        critical_value: cv,
        level,
        degenerate: Vec::new(),
    };
    for &k in cells {
        let (Some(est), Some(v)) = (records.estimates.get(&k), variance.get(&k)) else {
            return Err(CdrError::InvalidInput(format!("cell {k:?} has no influence record")));
        };
        let (value, c) = contrast.at(est, &records.columns[&k])?;
        let var = c.dot(&(v * &c));
        if var < DEGENERATE_VARIANCE {
            out.degenerate.push(k);
        }
        let se = (var.max(0.0) / n).sqrt();
        out.estimate.push(value);
        out.se.push(se);
        out.lower.push(value - cv * se);
        out.upper.push(value + cv * se);
    }
    Ok(out)
}

/// Critical value and band in one pass; degenerate cells are dropped from
/// the maximum and flagged in the result.
pub fn uniform_band(
    records: &InfluenceRecords,
    variance: &BTreeMap<CellKey, DMatrix<f64>>,
    draws: &BTreeMap<CellKey, DMatrix<f64>>,
    contrast: &Contrast,
    level: f64,
    cells: &[CellKey],
) -> Result<BandSet> {
    let mut regular = Vec::new();
    for &k in cells {
        let (Some(est), Some(v)) = (records.estimates.get(&k), variance.get(&k)) else {
            return Err(CdrError::InvalidInput(format!("cell {k:?} has no influence record")));
        };
        let (_, c) = contrast.at(est, &records.columns[&k])?;
        if c.dot(&(v * &c)) >= DEGENERATE_VARIANCE {
            regular.push(k);
        }
    }
    let cv = if regular.is_empty() {
        0.0
    } else {
        max_t_critical(draws, records, variance, contrast, level, &regular)?
    };
    band(records, variance, cv, contrast, level, cells)
}

/// Bootstrap replicates of the whole coefficient-path set, built from the
/// same multipliers as [`bootstrap_draws`] (stream `b` of `seed`).
pub fn bootstrap_paths(
    fit: &CoefficientPaths,
    records: &InfluenceRecords,
    b_draws: usize,
    seed: u64,
) -> Result<Vec<CoefficientPaths>> {
    if b_draws < 2 {
        return Err(CdrError::InvalidInput("at least two bootstrap draws are needed".into()));
    }
    let n = records.n as f64;
    let d_x = fit.nu.first().map_or(0, |v| v.len());
    Ok((0..b_draws)
        .into_par_iter()
        .map(|b| {
            let w = multipliers(records.n, seed, b);
            let mut p = fit.clone();
            for (si, m) in p.mu.iter_mut().enumerate() {
                *m += records.psi_mu[si].tr_mul(&w) / n;
            }
            for yi in 0..p.nu.len() {
                let shift = records.psi_theta[yi].tr_mul(&w) / n;
                p.nu[yi] += shift.rows(0, d_x);
                p.rho0[yi] += shift.rows(d_x, shift.len() - d_x);
            }
            for (&(si, yi), psi) in &records.psi_rho {
                if si > 0 {
                    if let Some(r) = p.rho[si - 1][yi].as_mut() {
                        *r += psi.tr_mul(&w) / n;
                    }
                }
            }
            p
        })
        .collect())
}
