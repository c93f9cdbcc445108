//! Three-step estimation over a grid of selection and outcome levels.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{CdrError, Cell, Result};
use crate::gauss2d::std_cdf;
use crate::likelihood::{
    indicator_separated, step1_objective, step2_objective, step3_objective, CovariateLayout, FloorConfig,
    Objective, ObservationTable, Order, StepParams,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxOptions {
    /// Gradient norm accepted as converged.
    pub gtol: f64,
    /// Newton polishing target; polishing stops early when it stalls.
    pub polish_tol: f64,
    pub max_iter: usize,
    pub newton_polish: bool,
}

impl Default for MaxOptions {
    fn default() -> Self {
        Self { gtol: 1e-6, polish_tol: 1e-11, max_iter: 500, newton_polish: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxReport {
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximizes `f` from `start` by BFGS with backtracking, followed by
/// Newton steps on the analytic Hessian when `f` supplies one.
pub fn maximize<F>(mut f: F, start: DVector<f64>, opts: &MaxOptions) -> Result<(DVector<f64>, MaxReport)>
where
    F: FnMut(&DVector<f64>, Order) -> Result<Objective>,
{
    let k = start.len();
    let mut x = start;
    let mut cur = f(&x, Order::Gradient)?;
    if !cur.value.is_finite() || cur.gradient.iter().any(|g| !g.is_finite()) {
        return Err(CdrError::BadStart);
    }
    let mut hinv = DMatrix::<f64>::identity(k, k);
    let mut iters = 0;
    let bfgs_tol = if opts.newton_polish { opts.gtol * 1e-2 } else { opts.gtol };
    let mut first = true;
    while cur.gradient.norm() > bfgs_tol && iters < opts.max_iter {
        iters += 1;
        let mut dir = &hinv * &cur.gradient;
        if dir.dot(&cur.gradient) <= 0.0 {
            hinv = DMatrix::identity(k, k);
            dir = cur.gradient.clone();
        }
        if first {
            dir /= cur.gradient.norm().max(1.0);
            first = false;
        }
        let Some((nx, next)) = line_search(&mut f, &x, &cur, &dir)? else {
            if hinv == DMatrix::identity(k, k) {
                break;
            }
            hinv = DMatrix::identity(k, k);
            continue;
        };
        let s = &nx - &x;
        // Ascent: curvature of -f.
        let yv = &cur.gradient - &next.gradient;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let hy = &hinv * &yv;
            let yhy = yv.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        x = nx;
        cur = next;
    }
    if opts.newton_polish {
        let mut stalls = 0;
        for _ in 0..50 {
            if cur.gradient.norm() <= opts.polish_tol {
                break;
            }
            let full = f(&x, Order::Hessian)?;
            if full.hessian.nrows() != k {
                break;
            }
            iters += 1;
            let neg = -&full.hessian;
            let dir = match neg.clone().cholesky() {
                Some(ch) => ch.solve(&full.gradient),
                None => {
                    let eig = neg.symmetric_eigen();
                    let floor = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())) * 1e-8 + 1e-12;
                    let lam = eig.eigenvalues.map(|v| 1.0 / v.abs().max(floor));
                    &eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose() * &full.gradient
                }
            };
            match line_search(&mut f, &x, &cur, &dir)? {
                Some((nx, next)) => {
                    x = nx;
                    cur = next;
                    stalls = 0;
                }
                None => {
                    stalls += 1;
                    if stalls > 1 {
                        break;
                    }
                }
            }
        }
    }
    let grad_norm = cur.gradient.norm();
    Ok((
        x,
        MaxReport { value: cur.value, grad_norm, iterations: iters, converged: grad_norm <= opts.gtol },
    ))
}

/// Backtracking line search with an Armijo condition. A step that leaves
/// the value unchanged but lowers the gradient norm is accepted so that the
/// final iterations are not blocked by rounding in the objective.
fn line_search<F>(
    f: &mut F,
    x: &DVector<f64>,
    cur: &Objective,
    dir: &DVector<f64>,
) -> Result<Option<(DVector<f64>, Objective)>>
where
    F: FnMut(&DVector<f64>, Order) -> Result<Objective>,
{
    let slope = cur.gradient.dot(dir);
    if !(slope > 0.0) {
        return Ok(None);
    }
    let mut t = 1.0;
    for _ in 0..60 {
        let nx = x + dir * t;
        let next = f(&nx, Order::Gradient)?;
        if next.value.is_finite() && next.gradient.iter().all(|g| g.is_finite()) {
            if next.value >= cur.value + 1e-4 * t * slope {
                return Ok(Some((nx, next)));
            }
            let flat = (next.value - cur.value).abs() <= 1e-14 * cur.value.abs().max(1.0);
            if flat && next.gradient.norm() < cur.gradient.norm() {
                return Ok(Some((nx, next)));
            }
        }
        t *= 0.5;
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    s_points: Vec<f64>,
    y_points: Vec<f64>,
}

impl GridSpec {
    pub fn new(s_points: Vec<f64>, y_points: Vec<f64>) -> Result<Self> {
        if s_points.first() != Some(&0.0) {
            return Err(CdrError::InvalidInput("selection grid must start at 0".into()));
        }
        if s_points.windows(2).any(|w| !(w[0] < w[1])) || s_points.iter().any(|s| !s.is_finite()) {
            return Err(CdrError::InvalidInput("selection grid must be finite and strictly ascending".into()));
        }
        if y_points.is_empty() {
            return Err(CdrError::InvalidInput("outcome grid is empty".into()));
        }
        if y_points.windows(2).any(|w| !(w[0] < w[1])) || y_points.iter().any(|y| !y.is_finite()) {
            return Err(CdrError::InvalidInput("outcome grid must be finite and strictly ascending".into()));
        }
        Ok(Self { s_points, y_points })
    }

    /// Outcome grid at the given quantile indices of the selected outcomes
    /// (type-7 interpolation); repeated values are merged.
    pub fn with_y_quantiles(data: &ObservationTable, s_points: Vec<f64>, indices: &[f64]) -> Result<Self> {
        let mut ys = data.selected_outcomes();
        if ys.is_empty() {
            return Err(CdrError::EmptySelection);
        }
        ys.sort_by(f64::total_cmp);
        let mut pts: Vec<f64> = Vec::with_capacity(indices.len());
        for &p in indices {
            if !(0.0 < p && p < 1.0) {
                return Err(CdrError::InvalidInput(format!("quantile index {p} outside (0, 1)")));
            }
            let h = (ys.len() - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(ys.len() - 1);
            let q = ys[lo] + (h - lo as f64) * (ys[hi] - ys[lo]);
            if pts.last().is_none_or(|&l| q > l) {
                pts.push(q);
            }
        }
        Self::new(s_points, pts)
    }

    pub fn s_points(&self) -> &[f64] {
        &self.s_points
    }

    pub fn y_points(&self) -> &[f64] {
        &self.y_points
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub cell: Cell,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Rows whose cell probability was below the floor threshold at the optimum.
    pub floored_rows: usize,
    pub boundary_warning: bool,
    pub error: Option<String>,
}

impl CellRecord {
    pub fn floor_active(&self) -> bool {
        self.floored_rows > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub floor: FloorConfig,
    pub max: MaxOptions,
    /// Median over the outcome grid of the scaled step-2 Hessian condition
    /// number above which the instrument is flagged as weak.
    pub weak_instrument_condition: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { floor: FloorConfig::default(), max: MaxOptions::default(), weak_instrument_condition: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPaths {
    pub grid: GridSpec,
    pub layout: CovariateLayout,
    pub floor: FloorConfig,
    /// Selection coefficients per `s` point (index 0 is the censoring point).
    pub mu: Vec<DVector<f64>>,
    /// Outcome coefficients per `y` point.
    pub nu: Vec<DVector<f64>>,
    /// Sorting coefficients at the censoring point per `y` point.
    pub rho0: Vec<DVector<f64>>,
    /// Sorting coefficients for `s_points[1..]` × `y_points`; `None` where
    /// step 3 failed.
    pub rho: Vec<Vec<Option<DVector<f64>>>>,
    pub mu_records: Vec<CellRecord>,
    pub theta_records: Vec<CellRecord>,
    pub rho_records: Vec<Vec<CellRecord>>,
    /// Condition number of the step-2 Hessian per `y` point.
    pub step2_condition: Vec<f64>,
    pub weak_instrument: bool,
    pub warnings: Vec<String>,
}

impl CoefficientPaths {
    pub fn s_points(&self) -> &[f64] {
        self.grid.s_points()
    }

    pub fn y_points(&self) -> &[f64] {
        self.grid.y_points()
    }

    pub fn s_index(&self, s: f64) -> Result<usize> {
        self.s_points().iter().position(|&v| v == s).ok_or(CdrError::OffGrid(s))
    }

    pub fn y_index(&self, y: f64) -> Result<usize> {
        self.y_points().iter().position(|&v| v == y).ok_or(CdrError::OffGrid(y))
    }

    /// Sorting coefficients for grid cell `(si, yi)` together with the `z`
    /// columns they load on; `si = 0` gives the censoring-point block.
    pub fn sorting_coefficients(&self, si: usize, yi: usize) -> Option<(&DVector<f64>, &[usize])> {
        if si == 0 {
            Some((&self.rho0[yi], &self.layout.rho0))
        } else {
            self.rho[si - 1][yi].as_ref().map(|r| (r, self.layout.rho.as_slice()))
        }
    }

    /// Sorting index `w'ρ` at a full covariate row `z`.
    pub fn sorting_index(&self, si: usize, yi: usize, z: &[f64]) -> Option<f64> {
        self.sorting_coefficients(si, yi)
            .map(|(r, cols)| cols.iter().zip(r.iter()).map(|(&c, v)| z[c] * v).sum())
    }

    /// Plug-in parameters for cell `(si, yi)`, `si ≥ 1`.
    pub fn step_params(&self, si: usize, yi: usize) -> Option<StepParams> {
        let rho = self.rho[si - 1][yi].clone()?;
        Some(StepParams {
            mu0: self.mu[0].clone(),
            mu_s: self.mu[si].clone(),
            nu: self.nu[yi].clone(),
            rho0: self.rho0[yi].clone(),
            rho,
        })
    }

    pub fn failed_cells(&self) -> Vec<Cell> {
        self.rho_records.iter().flatten().filter(|r| r.error.is_some()).map(|r| r.cell).collect()
    }

    pub fn all_records(&self) -> impl Iterator<Item = &CellRecord> {
        self.mu_records.iter().chain(&self.theta_records).chain(self.rho_records.iter().flatten())
    }

    pub fn floor_active_at_optimum(&self) -> bool {
        self.all_records().any(|r| r.floor_active())
    }

    /// Paths given directly (for example the true paths of a simulation
    /// design); every cell is recorded as converged after zero iterations.
    /// `rho` is indexed `[s index - 1][y index]`.
    pub fn from_parts(
        grid: GridSpec,
        layout: CovariateLayout,
        mu: Vec<DVector<f64>>,
        nu: Vec<DVector<f64>>,
        rho0: Vec<DVector<f64>>,
        rho: Vec<Vec<DVector<f64>>>,
    ) -> Result<Self> {
        let (ns, ny) = (grid.s_points().len(), grid.y_points().len());
        let shape_ok = mu.len() == ns
            && nu.len() == ny
            && rho0.len() == ny
            && rho.len() == ns - 1
            && rho.iter().all(|r| r.len() == ny)
            && mu.windows(2).all(|w| w[0].len() == w[1].len())
            && nu.windows(2).all(|w| w[0].len() == w[1].len())
            && rho0.iter().all(|r| r.len() == layout.d_rho0())
            && rho.iter().flatten().all(|r| r.len() == layout.d_rho());
        if !shape_ok {
            return Err(CdrError::InvalidInput("coefficient paths do not match the grid and layout".into()));
        }
        let done = |cell| CellRecord {
            cell,
            iterations: 0,
            grad_norm: 0.0,
            converged: true,
            floored_rows: 0,
            boundary_warning: false,
            error: None,
        };
        let s_pts = grid.s_points().to_vec();
        let y_pts = grid.y_points().to_vec();
        Ok(Self {
            mu_records: s_pts.iter().map(|&s| done(Cell::Selection { s })).collect(),
            theta_records: y_pts.iter().map(|&y| done(Cell::Outcome { y })).collect(),
            rho_records: s_pts[1..]
                .iter()
                .map(|&s| y_pts.iter().map(|&y| done(Cell::Joint { s, y })).collect())
                .collect(),
            rho: rho.into_iter().map(|r| r.into_iter().map(Some).collect()).collect(),
            step2_condition: vec![1.0; ny],
            weak_instrument: false,
            warnings: Vec::new(),
            floor: FloorConfig::default(),
            grid,
            layout,
            mu,
            nu,
            rho0,
        })
    }
}

fn record(cell: Cell, rep: &MaxReport, obj: Option<&Objective>) -> CellRecord {
    CellRecord {
        cell,
        iterations: rep.iterations,
        grad_norm: rep.grad_norm,
        converged: rep.converged,
        floored_rows: obj.map_or(0, |o| o.floored_rows),
        boundary_warning: obj.is_some_and(|o| o.boundary_warning()),
        error: None,
    }
}

fn failed(step: u8, cell: Cell, e: CdrError) -> CdrError {
    CdrError::StepFailed { step, cell, source: Box::new(e) }
}

fn nonconverged(rep: &MaxReport) -> CdrError {
    CdrError::Nonconvergence { iterations: rep.iterations, residuals: vec![rep.grad_norm] }
}

/// Probit for the selection indicator at `s`.
pub fn fit_selection(data: &ObservationTable, s: f64, opts: &MaxOptions) -> Result<(DVector<f64>, MaxReport)> {
    if indicator_separated(data, s) {
        return Err(CdrError::Separation(Cell::Selection { s }));
    }
    maximize(|m, o| step1_objective(m, data, s, o), DVector::zeros(data.d_z()), opts)
}

/// Probit of `1(Y > y)` on `x` over the selected rows, ignoring selection.
fn naive_outcome_probit(data: &ObservationTable, y: f64, opts: &MaxOptions) -> Result<DVector<f64>> {
    let mut s = Vec::new();
    let mut yy = Vec::new();
    let mut z = Vec::new();
    for i in 0..data.n() {
        if let Some(v) = data.y()[i] {
            let above = v > y;
            s.push(if above { 1.0 } else { 0.0 });
            yy.push(above.then_some(0.0));
            z.extend_from_slice(data.x_row(i));
        }
    }
    let d = data.d_x();
    let t = ObservationTable::new(s, yy, z, d, (0..d).collect())?;
    if indicator_separated(&t, 0.0) {
        return Err(CdrError::Separation(Cell::Outcome { y }));
    }
    Ok(maximize(|m, o| step1_objective(m, &t, 0.0, o), DVector::zeros(d), opts)?.0)
}

/// Step 2 at one outcome level; returns `(ν, ρ₀)` stacked.
pub fn fit_outcome(
    data: &ObservationTable,
    layout: &CovariateLayout,
    mu0: &DVector<f64>,
    y: f64,
    opts: &FitOptions,
) -> Result<(DVector<f64>, MaxReport, Objective)> {
    let nu = naive_outcome_probit(data, y, &opts.max)?;
    let start = DVector::from_iterator(
        nu.len() + layout.d_rho0(),
        nu.iter().copied().chain(std::iter::repeat_n(0.0, layout.d_rho0())),
    );
    let f = |t: &DVector<f64>, o| step2_objective(t, mu0, data, layout, y, opts.floor, o);
    let (theta, rep) = maximize(f, start, &opts.max)?;
    let at = f(&theta, Order::Hessian)?;
    Ok((theta, rep, at))
}

/// Step 3 at one cell with `s > 0`.
pub fn fit_sorting(
    data: &ObservationTable,
    layout: &CovariateLayout,
    eta: &StepParams,
    s: f64,
    y: f64,
    opts: &FitOptions,
) -> Result<(DVector<f64>, MaxReport, Objective)> {
    let start = layout.embed_rho0(&eta.rho0);
    let f = |r: &DVector<f64>, o| step3_objective(r, eta, data, layout, s, y, opts.floor, o);
    let (rho, rep) = maximize(f, start, &opts.max)?;
    let at = f(&rho, Order::Gradient)?;
    Ok((rho, rep, at))
}

/// Condition number after scaling to unit diagonal, so that covariate
/// units do not matter.
fn condition_number(h: &DMatrix<f64>) -> f64 {
    let d = h.diagonal().map(|v| 1.0 / v.abs().sqrt());
    if d.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let scaled = DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, j)] * d[i] * d[j]);
    let ev = scaled.symmetric_eigenvalues();
    let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Runs the three estimation steps. Step 1 and step 2 failures abort; a
/// step-3 failure is recorded on its cell and the remaining cells proceed.
/// Cells within a step run in parallel on the current rayon pool; the result
/// does not depend on scheduling.
pub fn fit(
    data: &ObservationTable,
    grid: &GridSpec,
    layout: &CovariateLayout,
    opts: &FitOptions,
) -> Result<CoefficientPaths> {
    let sel = data.n_selected();
    if sel == 0 {
        return Err(CdrError::EmptySelection);
    }
    if sel == data.n() {
        return Err(CdrError::InvalidInput("no censored rows (all s > 0)".into()));
    }
    let s_points = grid.s_points();
    let y_points = grid.y_points();

    let step1: Vec<Result<(DVector<f64>, MaxReport)>> =
        s_points.par_iter().map(|&s| fit_selection(data, s, &opts.max)).collect();
    let mut mu = Vec::with_capacity(s_points.len());
    let mut mu_records = Vec::with_capacity(s_points.len());
    for (&s, r) in s_points.iter().zip(step1) {
        let cell = Cell::Selection { s };
        let (m, rep) = r.map_err(|e| failed(1, cell, e))?;
        if !rep.converged {
            return Err(failed(1, cell, nonconverged(&rep)));
        }
        mu.push(m);
        mu_records.push(record(cell, &rep, None));
    }

    let mu0 = &mu[0];
    let step2: Vec<_> = y_points.par_iter().map(|&y| fit_outcome(data, layout, mu0, y, opts)).collect();
    let d_x = data.d_x();
    let mut nu = Vec::new();
    let mut rho0 = Vec::new();
    let mut theta_records = Vec::new();
    let mut step2_condition = Vec::new();
    for (&y, r) in y_points.iter().zip(step2) {
        let cell = Cell::Outcome { y };
        let (theta, rep, at) = r.map_err(|e| failed(2, cell, e))?;
        if !rep.converged {
            return Err(failed(2, cell, nonconverged(&rep)));
        }
        nu.push(theta.rows(0, d_x).into_owned());
        rho0.push(theta.rows(d_x, layout.d_rho0()).into_owned());
        theta_records.push(record(cell, &rep, Some(&at)));
        step2_condition.push(condition_number(&at.hessian));
    }
    let weak_instrument = !(median(&step2_condition) <= opts.weak_instrument_condition);

    let cells: Vec<(usize, usize)> =
        (1..s_points.len()).flat_map(|si| (0..y_points.len()).map(move |yi| (si, yi))).collect();
    let step3: Vec<_> = cells
        .par_iter()
        .map(|&(si, yi)| {
            let eta = StepParams {
                mu0: mu[0].clone(),
                mu_s: mu[si].clone(),
                nu: nu[yi].clone(),
                rho0: rho0[yi].clone(),
                rho: DVector::zeros(0),
            };
            fit_sorting(data, layout, &eta, s_points[si], y_points[yi], opts)
        })
        .collect();
    let ns = s_points.len() - 1;
    let mut rho = vec![Vec::with_capacity(y_points.len()); ns];
    let mut rho_records = vec![Vec::with_capacity(y_points.len()); ns];
    for (&(si, yi), r) in cells.iter().zip(step3) {
        let cell = Cell::Joint { s: s_points[si], y: y_points[yi] };
        match r {
            Ok((est, rep, at)) if rep.converged => {
                rho[si - 1].push(Some(est));
                rho_records[si - 1].push(record(cell, &rep, Some(&at)));
            }
            Ok((_, rep, at)) => {
                rho[si - 1].push(None);
                let mut rec = record(cell, &rep, Some(&at));
                rec.error = Some(nonconverged(&rep).to_string());
                rho_records[si - 1].push(rec);
            }
            Err(e) => {
                rho[si - 1].push(None);
                rho_records[si - 1].push(CellRecord {
                    cell,
                    iterations: 0,
                    grad_norm: f64::NAN,
                    converged: false,
                    floored_rows: 0,
                    boundary_warning: false,
                    error: Some(e.to_string()),
                });
            }
        }
    }

    let mut warnings = Vec::new();
    let marginal: Vec<f64> = mu
        .iter()
        .map(|m| {
            (0..data.n())
                .map(|i| std_cdf(-data.z_row(i).iter().zip(m.iter()).map(|(a, b)| a * b).sum::<f64>()))
                .sum::<f64>()
                / data.n() as f64
        })
        .collect();
    if marginal.windows(2).any(|w| w[1] < w[0]) {
        warnings.push("fitted selection marginal is not monotone over the s grid".to_string());
    }
    if weak_instrument {
        warnings.push("step-2 Hessian is ill-conditioned: instrument may be weak".to_string());
    }
    for r in rho_records.iter().flatten().chain(&theta_records) {
        if r.floor_active() {
            warnings.push(format!("probability floor active at the optimum at {}", r.cell));
        }
    }

    Ok(CoefficientPaths {
        grid: grid.clone(),
        layout: layout.clone(),
        floor: opts.floor,
        mu,
        nu,
        rho0,
        rho,
        mu_records,
        theta_records,
        rho_records,
        step2_condition,
        weak_instrument,
        warnings,
    })
}
