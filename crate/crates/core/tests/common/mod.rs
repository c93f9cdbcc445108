#![allow(dead_code)]

use cdr_core::estimator::{fit, CoefficientPaths, FitOptions, GridSpec};
use cdr_core::likelihood::{CovariateLayout, ObservationTable};
use cdr_core::simulate::{simulate_hsm, CovariateSampler, HsmParams};

/// Tobit type-3 design with a strong binary instrument (column 2) and
/// about a third of the sample censored at zero.
pub fn hsm(rho: f64) -> HsmParams {
    HsmParams {
        nu: vec![1.0, 0.5],
        mu: vec![-5.0, 5.0, 40.0],
        sigma_u: 1.0,
        sigma_v: 20.0,
        rho,
        sampler: CovariateSampler::default_design(),
    }
}

pub fn deciles() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

pub fn intercept_layout(data: &ObservationTable) -> CovariateLayout {
    CovariateLayout::new(data, vec![0], vec![0]).unwrap()
}

pub struct Fitted {
    pub params: HsmParams,
    pub data: ObservationTable,
    pub grid: GridSpec,
    pub paths: CoefficientPaths,
}

pub fn fit_hsm(params: HsmParams, n: usize, seed: u64, s_points: Vec<f64>) -> Fitted {
    let (data, _) = simulate_hsm(n, &params, seed).unwrap();
    let grid = GridSpec::with_y_quantiles(&data, s_points, &deciles()).unwrap();
    let paths = fit(&data, &grid, &intercept_layout(&data), &FitOptions::default()).unwrap();
    Fitted { params, data, grid, paths }
}

pub fn drop_column(t: &ObservationTable, col: usize) -> ObservationTable {
    let keep: Vec<usize> = (0..t.d_z()).filter(|&c| c != col).collect();
    let mut z = Vec::with_capacity(t.n() * keep.len());
    for i in 0..t.n() {
        z.extend(keep.iter().map(|&c| t.z_row(i)[c]));
    }
    let x_cols = t.x_cols().iter().map(|&c| keep.iter().position(|&k| k == c).unwrap()).collect();
    ObservationTable::new(t.s().to_vec(), t.y().to_vec(), z, keep.len(), x_cols).unwrap()
}
