//! Step likelihoods of the three-step estimator with exact first and second
//! derivatives.
//!
//! Every probability in steps 2 and 3 is a signed sum of at most two terms
//! `Φ₂(a, b; r)` with `a = ±z'μ`, `b = ±x'ν` and `r = ±g(w'ρ)`. Derivatives
//! are assembled from the partials of `Φ₂` by the chain rule over whichever
//! parameter blocks are active, so the same code serves the optimizer (only
//! the step's own block active) and the influence computations (all blocks).

use nalgebra::{DMatrix, DVector};

use crate::error::{CdrError, Cell, Result};
use crate::gauss2d::{log_std_cdf, std_cdf, std_pdf, BivPartials};

/// Correlations produced by the link are clamped to this magnitude.
pub const RHO_CLAMP: f64 = 1.0 - 1e-10;

/// Observations of `(S, Y, Z)`; `x` is a declared subset of the columns of `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    s: Vec<f64>,
    y: Vec<Option<f64>>,
    z: Vec<f64>,
    d_z: usize,
    x_cols: Vec<usize>,
    x: Vec<f64>,
}

impl ObservationTable {
    /// `z` is row-major with `d_z` columns. `y[i]` must be present exactly
    /// when `s[i] > 0`.
    pub fn new(
        s: Vec<f64>,
        y: Vec<Option<f64>>,
        z: Vec<f64>,
        d_z: usize,
        x_cols: Vec<usize>,
    ) -> Result<Self> {
        let n = s.len();
        if d_z == 0 {
            return Err(CdrError::InvalidInput("covariate vector is empty".into()));
        }
        if y.len() != n || z.len() != n * d_z {
            return Err(CdrError::InvalidInput(format!(
                "length mismatch: {} selection values, {} outcomes, {} covariate cells for d_z = {}",
                n,
                y.len(),
                z.len(),
                d_z
            )));
        }
        for (k, &c) in x_cols.iter().enumerate() {
            if c >= d_z || x_cols[..k].contains(&c) {
                return Err(CdrError::InvalidInput(format!("bad outcome covariate column {c}")));
            }
        }
        for i in 0..n {
            if !(s[i].is_finite() && s[i] >= 0.0) {
                return Err(CdrError::InvalidInput(format!("row {i}: selection value {} is not a nonnegative number", s[i])));
            }
            match y[i] {
                Some(v) if s[i] == 0.0 => {
                    return Err(CdrError::InvalidInput(format!("row {i}: outcome {v} present with s = 0")))
                }
                None if s[i] > 0.0 => return Err(CdrError::InvalidInput(format!("row {i}: outcome missing with s > 0"))),
                Some(v) if !v.is_finite() => return Err(CdrError::InvalidInput(format!("row {i}: outcome is not finite"))),
                _ => {}
            }
            if z[i * d_z..(i + 1) * d_z].iter().any(|v| !v.is_finite()) {
                return Err(CdrError::InvalidInput(format!("row {i}: non-finite covariate")));
            }
        }
        let d_x = x_cols.len();
        let mut x = Vec::with_capacity(n * d_x);
        for i in 0..n {
            x.extend(x_cols.iter().map(|&c| z[i * d_z + c]));
        }
        Ok(Self { s, y, z, d_z, x_cols, x })
    }

    pub fn n(&self) -> usize {
        self.s.len()
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn d_x(&self) -> usize {
        self.x_cols.len()
    }

    pub fn x_cols(&self) -> &[usize] {
        &self.x_cols
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn y(&self) -> &[Option<f64>] {
        &self.y
    }

    pub fn selected(&self, i: usize) -> bool {
        self.s[i] > 0.0
    }

    pub fn n_selected(&self) -> usize {
        self.s.iter().filter(|&&s| s > 0.0).count()
    }

    pub fn z_row(&self, i: usize) -> &[f64] {
        &self.z[i * self.d_z..(i + 1) * self.d_z]
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        let d = self.d_x();
        &self.x[i * d..(i + 1) * d]
    }

    /// Outcomes of the selected rows.
    pub fn selected_outcomes(&self) -> Vec<f64> {
        self.y.iter().filter_map(|v| *v).collect()
    }

    /// Table restricted to the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut z = Vec::with_capacity(rows.len() * self.d_z);
        for &i in rows {
            z.extend_from_slice(self.z_row(i));
        }
        let d_x = self.d_x();
        let mut x = Vec::with_capacity(rows.len() * d_x);
        for &i in rows {
            x.extend_from_slice(self.x_row(i));
        }
        Self {
            s: rows.iter().map(|&i| self.s[i]).collect(),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            z,
            d_z: self.d_z,
            x_cols: self.x_cols.clone(),
            x,
        }
    }
}

/// Which columns of `z` enter the two sorting indices. `rho0` must be a
/// subset of the outcome covariates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CovariateLayout {
    pub rho0: Vec<usize>,
    pub rho: Vec<usize>,
}

impl CovariateLayout {
    pub fn new(data: &ObservationTable, rho0: Vec<usize>, rho: Vec<usize>) -> Result<Self> {
        for (k, c) in rho0.iter().enumerate() {
            if !data.x_cols().contains(c) || rho0[..k].contains(c) {
                return Err(CdrError::InvalidInput(format!(
                    "sorting column {c} at the censoring point must be a distinct outcome covariate"
                )));
            }
        }
        for (k, &c) in rho.iter().enumerate() {
            if c >= data.d_z() || rho[..k].contains(&c) {
                return Err(CdrError::InvalidInput(format!("bad sorting column {c}")));
            }
        }
        if rho0.is_empty() || rho.is_empty() {
            return Err(CdrError::InvalidInput("sorting index needs at least one column".into()));
        }
        Ok(Self { rho0, rho })
    }

    /// `x` at the censoring point and all of `z` above it.
    pub fn full(data: &ObservationTable) -> Self {
        Self {
            rho0: data.x_cols().to_vec(),
            rho: (0..data.d_z()).collect(),
        }
    }

    pub fn d_rho0(&self) -> usize {
        self.rho0.len()
    }

    pub fn d_rho(&self) -> usize {
        self.rho.len()
    }

    /// Carries `ρ₀` coefficients over to the `ρ` layout, zero elsewhere.
    pub fn embed_rho0(&self, rho0: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rho.len(),
            self.rho.iter().map(|c| {
                self.rho0
                    .iter()
                    .position(|r| r == c)
                    .map_or(0.0, |k| rho0[k])
            }),
        )
    }

    fn gather(cols: &[usize], z: &[f64], out: &mut [f64]) {
        for (o, &c) in out.iter_mut().zip(cols) {
            *o = z[c];
        }
    }
}

/// Plug-in parameters for one `(s, y)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct StepParams {
    pub mu0: DVector<f64>,
    pub mu_s: DVector<f64>,
    pub nu: DVector<f64>,
    pub rho0: DVector<f64>,
    pub rho: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloorConfig {
    pub tau: f64,
    pub eps: f64,
}

impl FloorConfig {
    pub fn new(tau: f64, eps: f64) -> Result<Self> {
        if !(0.0 < eps && eps < tau && tau < 0.5) {
            return Err(CdrError::InvalidInput(format!(
                "floor needs 0 < eps < tau < 0.5, got tau = {tau}, eps = {eps}"
            )));
        }
        Ok(Self { tau, eps })
    }

    /// Threshold `tau` with `eps = tau / 2`.
    pub fn with_tau(tau: f64) -> Result<Self> {
        Self::new(tau, tau / 2.0)
    }
}

impl Default for FloorConfig {
    fn default() -> Self {
        Self { tau: 1e-5, eps: 5e-6 }
    }
}

pub fn link(u: f64) -> f64 {
    u.tanh()
}

pub fn link_deriv(u: f64) -> f64 {
    let g = u.tanh();
    (1.0 - g) * (1.0 + g)
}

pub fn link_second(u: f64) -> f64 {
    -2.0 * link(u) * link_deriv(u)
}

/// Smooth lower floor for probabilities: identity above `tau`, a tanh
/// shoulder below it that levels off at `eps`. Returns `(f(p), f'(p))`.
pub fn smooth_floor(p: f64, cfg: FloorConfig) -> (f64, f64) {
    let (v, d, _) = floor_with_second(p, cfg);
    (v, d)
}

fn floor_with_second(p: f64, cfg: FloorConfig) -> (f64, f64, f64) {
    if p >= cfg.tau {
        return (p, 1.0, 0.0);
    }
    let w = cfg.tau - cfg.eps;
    let t = ((p - cfg.tau) / w).tanh();
    let d = (1.0 - t) * (1.0 + t);
    (w * t + cfg.tau, d, -2.0 * t * d / w)
}

/// φ(x) / Φ(x), stable for very negative x.
fn mills(x: f64) -> f64 {
    if x > -35.0 {
        std_pdf(x) / std_cdf(x)
    } else {
        (-0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln() - log_std_cdf(x)).exp()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

fn clamp_rho(r: f64) -> f64 {
    r.clamp(-RHO_CLAMP, RHO_CLAMP)
}

/// How much of the derivative structure to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Value,
    Gradient,
    Hessian,
}

/// Objective value with optional derivatives (empty when not requested).
#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    /// Selected rows whose cell probability fell below the floor threshold.
    pub floored_rows: usize,
    pub selected_rows: usize,
}

impl Objective {
    /// More than half of the selected rows sit on the floor.
    pub fn boundary_warning(&self) -> bool {
        2 * self.floored_rows > self.selected_rows
    }
}

pub fn indicator_separated(data: &ObservationTable, s: f64) -> bool {
    let below = data.s().iter().filter(|&&v| v <= s).count();
    below == 0 || below == data.n()
}

/// Probit log-likelihood for `1(S > s)` with index `z'μ`.
pub fn step1_objective(mu: &DVector<f64>, data: &ObservationTable, s: f64, order: Order) -> Result<Objective> {
    check_len("selection coefficients", mu.len(), data.d_z())?;
    let n = data.n();
    let k = data.d_z();
    let mut value = 0.0;
    let mut grad = DVector::zeros(if order >= Order::Gradient { k } else { 0 });
    let mut hess = DMatrix::zeros(if order == Order::Hessian { k } else { 0 }, if order == Order::Hessian { k } else { 0 });
    for i in 0..n {
        let z = data.z_row(i);
        let q = if data.s()[i] > s { 1.0 } else { -1.0 };
        let u = q * dot(z, mu.as_slice());
        value += log_std_cdf(u);
        if order >= Order::Gradient {
            let lam = mills(u);
            for j in 0..k {
                grad[j] += q * lam * z[j];
            }
            if order == Order::Hessian {
                let c = -lam * (u + lam);
                for a in 0..k {
                    for b in 0..k {
                        hess[(a, b)] += c * z[a] * z[b];
                    }
                }
            }
        }
    }
    let nf = n as f64;
    Ok(Objective {
        value: value / nf,
        gradient: grad / nf,
        hessian: hess / nf,
        floored_rows: 0,
        selected_rows: data.n_selected(),
    })
}

#[derive(Debug, Clone)]
pub struct Step1Eval {
    pub value: f64,
    pub score: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Step-1 value, score and the sample Hessian of the log-likelihood.
/// Unlike [`step1_objective`] this rejects a perfectly separated indicator,
/// for which the maximizer does not exist.
pub fn step1_loglik(mu: &DVector<f64>, data: &ObservationTable, s: f64) -> Result<Step1Eval> {
    if indicator_separated(data, s) {
        return Err(CdrError::Separation(Cell::Selection { s }));
    }
    let o = step1_objective(mu, data, s, Order::Hessian)?;
    Ok(Step1Eval { value: o.value, score: o.gradient, hessian: o.hessian })
}

/// Information-form probit Hessian `-avg G₁(z'μ) φ(z'μ) zz'` with
/// `G₁(u) = φ(u) / (Φ(u)Φ(-u))`.
pub fn step1_expected_hessian(mu: &DVector<f64>, data: &ObservationTable) -> DMatrix<f64> {
    let k = data.d_z();
    let mut h = DMatrix::zeros(k, k);
    for i in 0..data.n() {
        let z = data.z_row(i);
        let u = dot(z, mu.as_slice());
        let c = -mills(u) * mills(-u);
        for a in 0..k {
            for b in 0..k {
                h[(a, b)] += c * z[a] * z[b];
            }
        }
    }
    h / data.n() as f64
}

/// Per-row step-1 scores `G₁(z'μ)[1(S > s) - Φ(z'μ)] z` (n × d_z).
pub fn step1_row_scores(mu: &DVector<f64>, data: &ObservationTable, s: f64) -> DMatrix<f64> {
    let k = data.d_z();
    let mut out = DMatrix::zeros(data.n(), k);
    for i in 0..data.n() {
        let z = data.z_row(i);
        let u = dot(z, mu.as_slice());
        let c = if data.s()[i] > s { mills(u) } else { -mills(-u) };
        for j in 0..k {
            out[(i, j)] = c * z[j];
        }
    }
    out
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(CdrError::InvalidInput(format!("{what}: expected length {want}, got {got}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Generic bivariate terms.

/// Offsets of the active parameter blocks inside the derivative vector.
#[derive(Debug, Clone, Copy, Default)]
struct Blocks {
    mu0: Option<usize>,
    mus: Option<usize>,
    nu: Option<usize>,
    rho0: Option<usize>,
    rho: Option<usize>,
    dim: usize,
}

/// One signed `Φ₂(sa·z'μ_*, sb·x'ν; sr·g(w'ρ_*))` term.
#[derive(Debug, Clone, Copy)]
struct Term {
    sign: f64,
    upper_mu: bool,
    sa: f64,
    sb: f64,
    upper_rho: bool,
    sr: f64,
}

const fn term(sign: f64, upper: bool, sb: f64) -> Term {
    Term { sign, upper_mu: upper, sa: 1.0, sb, upper_rho: upper, sr: sb }
}

/// Index values and covariate slices for one row.
struct Row<'r> {
    z: &'r [f64],
    x: &'r [f64],
    w0: &'r [f64],
    w: &'r [f64],
    m0: f64,
    ms: f64,
    xn: f64,
    u0: f64,
    u: f64,
}

#[derive(Clone, Copy)]
struct Dir<'r> {
    off: Option<usize>,
    scale: f64,
    cov: &'r [f64],
}

impl Dir<'_> {
    fn add_to(&self, c: f64, g: &mut [f64]) {
        if let Some(o) = self.off {
            let c = c * self.scale;
            for (j, v) in self.cov.iter().enumerate() {
                g[o + j] += c * v;
            }
        }
    }
}

/// `h += c · (u v' + v u')`, or `c · u u'` when `same`.
fn add_outer(h: &mut [f64], dim: usize, c: f64, u: &Dir, v: &Dir, same: bool) {
    let (Some(ou), Some(ov)) = (u.off, v.off) else {
        return;
    };
    let c = c * u.scale * v.scale;
    if c == 0.0 {
        return;
    }
    for (a, ua) in u.cov.iter().enumerate() {
        let cu = c * ua;
        for (b, vb) in v.cov.iter().enumerate() {
            let t = cu * vb;
            h[(ou + a) * dim + ov + b] += t;
            if !same {
                h[(ov + b) * dim + ou + a] += t;
            }
        }
    }
}

struct Accum {
    value: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
    gp: Vec<f64>,
    floored: usize,
}

impl Accum {
    fn new(dim: usize, order: Order) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; if order >= Order::Gradient { dim } else { 0 }],
            hess: vec![0.0; if order == Order::Hessian { dim * dim } else { 0 }],
            gp: vec![0.0; dim],
            floored: 0,
        }
    }
}

/// Adds `log f(P)` for `P = Σ terms` and its derivatives. Returns `P`.
fn add_log_prob(terms: &[Term], row: &Row, blk: &Blocks, floor: FloorConfig, order: Order, acc: &mut Accum) -> f64 {
    let mut parts = [BivPartials::default(); 2];
    let mut links = [(0.0, 0.0, 0.0); 2];
    let mut p = 0.0;
    for (t, term) in terms.iter().enumerate() {
        let a = term.sa * if term.upper_mu { row.ms } else { row.m0 };
        let b = term.sb * row.xn;
        let u = if term.upper_rho { row.u } else { row.u0 };
        links[t] = (link(u), link_deriv(u), link_second(u));
        let r = clamp_rho(term.sr * links[t].0);
        parts[t] = BivPartials::at(a, b, r);
        p += term.sign * parts[t].value;
    }
    let (f, f1, f2) = floor_with_second(p, floor);
    if p < floor.tau {
        acc.floored += 1;
    }
    acc.value += f.ln();
    if order == Order::Value {
        return p;
    }
    let dim = blk.dim;
    acc.gp.iter_mut().for_each(|v| *v = 0.0);
    let d1 = f1 / f;
    let hess = order == Order::Hessian;
    for (t, term) in terms.iter().enumerate() {
        let pt = &parts[t];
        let (_, dg, d2g) = links[t];
        let va = Dir {
            off: if term.upper_mu { blk.mus } else { blk.mu0 },
            scale: term.sa,
            cov: row.z,
        };
        let vb = Dir { off: blk.nu, scale: term.sb, cov: row.x };
        let vr = Dir {
            off: if term.upper_rho { blk.rho } else { blk.rho0 },
            scale: term.sr * dg,
            cov: if term.upper_rho { row.w } else { row.w0 },
        };
        va.add_to(term.sign * pt.da, &mut acc.gp);
        vb.add_to(term.sign * pt.db, &mut acc.gp);
        vr.add_to(term.sign * pt.dr, &mut acc.gp);
        if hess {
            let c = d1 * term.sign;
            let h = &mut acc.hess;
            add_outer(h, dim, c * pt.daa, &va, &va, true);
            add_outer(h, dim, c * pt.dbb, &vb, &vb, true);
            add_outer(h, dim, c * pt.drr, &vr, &vr, true);
            add_outer(h, dim, c * pt.dab, &va, &vb, false);
            add_outer(h, dim, c * pt.dra, &va, &vr, false);
            add_outer(h, dim, c * pt.drb, &vb, &vr, false);
            let vw = Dir { scale: term.sr * d2g, ..vr };
            let unit = Dir { scale: 1.0, ..vr };
            add_outer(h, dim, c * pt.dr, &vw, &unit, true);
        }
    }
    for (g, v) in acc.grad.iter_mut().zip(&acc.gp) {
        *g += d1 * v;
    }
    if hess {
        let c = f2 / f - d1 * d1;
        if c != 0.0 {
            for a in 0..dim {
                let ca = c * acc.gp[a];
                for b in 0..dim {
                    acc.hess[a * dim + b] += ca * acc.gp[b];
                }
            }
        }
    }
    p
}

fn finish(acc: Accum, n: usize, dim: usize, order: Order, selected: usize) -> Objective {
    let nf = n as f64;
    let hd = if order == Order::Hessian { dim } else { 0 };
    Objective {
        value: acc.value / nf,
        gradient: DVector::from_vec(acc.grad) / nf,
        hessian: DMatrix::from_row_slice(hd, hd, &acc.hess) / nf,
        floored_rows: acc.floored,
        selected_rows: selected,
    }
}

/// Parameters in use for a cell. Entries a step does not touch may be
/// empty vectors.
struct Indices<'p> {
    mu0: &'p [f64],
    mu_s: &'p [f64],
    nu: &'p [f64],
    rho0: &'p [f64],
    rho: &'p [f64],
}

/// Runs `each` over selected rows with the index values filled in.
fn for_selected_rows(
    data: &ObservationTable,
    layout: &CovariateLayout,
    par: &Indices,
    mut each: impl FnMut(usize, &Row),
) {
    let mut w0 = vec![0.0; layout.d_rho0()];
    let mut w = vec![0.0; layout.d_rho()];
    for i in 0..data.n() {
        if !data.selected(i) {
            continue;
        }
        let z = data.z_row(i);
        let x = data.x_row(i);
        CovariateLayout::gather(&layout.rho0, z, &mut w0);
        CovariateLayout::gather(&layout.rho, z, &mut w);
        let row = Row {
            z,
            x,
            w0: &w0,
            w: &w,
            m0: dot(z, par.mu0),
            ms: if par.mu_s.is_empty() { 0.0 } else { dot(z, par.mu_s) },
            xn: dot(x, par.nu),
            u0: dot(&w0, par.rho0),
            u: if par.rho.is_empty() { 0.0 } else { dot(&w, par.rho) },
        };
        each(i, &row);
    }
}

const P1: [Term; 1] = [term(1.0, false, 1.0)];
const P2: [Term; 1] = [term(1.0, false, -1.0)];

// Four step-3 cells: (S > s, Y > y), (S > s, Y ≤ y), (0 < S ≤ s, Y > y),
// (0 < S ≤ s, Y ≤ y).
const A1: [Term; 1] = [term(1.0, true, 1.0)];
const A2: [Term; 1] = [term(1.0, true, -1.0)];
const A3: [Term; 2] = [term(1.0, false, 1.0), term(-1.0, true, 1.0)];
const A4: [Term; 2] = [term(1.0, false, -1.0), term(-1.0, true, -1.0)];

fn step2_terms(y_obs: f64, y: f64) -> &'static [Term] {
    if y_obs <= y {
        &P2
    } else {
        &P1
    }
}

fn step3_terms(s_obs: f64, y_obs: f64, s: f64, y: f64) -> &'static [Term] {
    match (s_obs > s, y_obs > y) {
        (true, true) => &A1,
        (true, false) => &A2,
        (false, true) => &A3,
        (false, false) => &A4,
    }
}

fn check_selection(data: &ObservationTable) -> Result<usize> {
    let m = data.n_selected();
    if m == 0 {
        return Err(CdrError::EmptySelection);
    }
    Ok(m)
}

fn check_step2_dims(theta: &DVector<f64>, mu0: &DVector<f64>, data: &ObservationTable, layout: &CovariateLayout) -> Result<()> {
    check_len("outcome and censoring-sorting coefficients", theta.len(), data.d_x() + layout.d_rho0())?;
    check_len("selection coefficients at 0", mu0.len(), data.d_z())
}

/// Floored selection-corrected probit for `1(Y ≤ y)` over selected rows;
/// `theta = (ν, ρ₀)`. With `with_mu0` the derivative vector is
/// `(μ₀, ν, ρ₀)` instead of `(ν, ρ₀)`.
fn step2_eval(
    theta: &DVector<f64>,
    mu0: &DVector<f64>,
    data: &ObservationTable,
    layout: &CovariateLayout,
    y: f64,
    floor: FloorConfig,
    order: Order,
    with_mu0: bool,
) -> Result<Objective> {
    check_step2_dims(theta, mu0, data, layout)?;
    let selected = check_selection(data)?;
    let d_x = data.d_x();
    let base = if with_mu0 { data.d_z() } else { 0 };
    let blk = Blocks {
        mu0: with_mu0.then_some(0),
        nu: Some(base),
        rho0: Some(base + d_x),
        dim: base + theta.len(),
        ..Blocks::default()
    };
    let par = Indices {
        mu0: mu0.as_slice(),
        mu_s: &[],
        nu: &theta.as_slice()[..d_x],
        rho0: &theta.as_slice()[d_x..],
        rho: &[],
    };
    let mut acc = Accum::new(blk.dim, order);
    let ys = data.y();
    for_selected_rows(data, layout, &par, |i, row| {
        let yi = ys[i].expect("selected row has an outcome");
        add_log_prob(step2_terms(yi, y), row, &blk, floor, order, &mut acc);
    });
    Ok(finish(acc, data.n(), blk.dim, order, selected))
}

pub fn step2_objective(
    theta: &DVector<f64>,
    mu0: &DVector<f64>,
    data: &ObservationTable,
    layout: &CovariateLayout,
    y: f64,
    floor: FloorConfig,
    order: Order,
) -> Result<Objective> {
    step2_eval(theta, mu0, data, layout, y, floor, order, false)
}

#[derive(Debug, Clone)]
pub struct Step2Eval {
    pub value: f64,
    pub score: DVector<f64>,
    pub hessian: DMatrix<f64>,
    /// ∂²ℓ / ∂θ ∂μ₀' (d_θ × d_z).
    pub cross_jacobian: DMatrix<f64>,
    pub floored_rows: usize,
    pub selected_rows: usize,
}

pub fn step2_loglik(
    theta: &DVector<f64>,
    mu0: &DVector<f64>,
    data: &ObservationTable,
    layout: &CovariateLayout,
    y: f64,
    floor: FloorConfig,
) -> Result<Step2Eval> {
    let o = step2_eval(theta, mu0, data, layout, y, floor, Order::Hessian, true)?;
    let dz = data.d_z();
    let dt = theta.len();
    Ok(Step2Eval {
        value: o.value,
        score: o.gradient.rows(dz, dt).into_owned(),
        hessian: o.hessian.view((dz, dz), (dt, dt)).into_owned(),
        cross_jacobian: o.hessian.view((dz, 0), (dt, dz)).into_owned(),
        floored_rows: o.floored_rows,
        selected_rows: o.selected_rows,
    })
}

/// Per-row unfloored step-2 scores (n × d_θ):
/// `D{Φ₂(z'μ₀, -x'ν; -g) - IΦ(z'μ₀)} (G₂ x, ġ G₃ w₀)` with
/// `G₂ = Φ₂ᵇ / (Φ₂ (Φ(z'μ₀) - Φ₂))` and `G₃ = φ₂ / (Φ₂ (Φ(z'μ₀) - Φ₂))`,
/// evaluated branchwise to avoid cancelling tail probabilities.
pub fn step2_row_scores(
    theta: &DVector<f64>,
    mu0: &DVector<f64>,
    data: &ObservationTable,
    layout: &CovariateLayout,
    y: f64,
) -> Result<DMatrix<f64>> {
    check_step2_dims(theta, mu0, data, layout)?;
    let d_x = data.d_x();
    let mut out = DMatrix::zeros(data.n(), theta.len());
    let par = Indices {
        mu0: mu0.as_slice(),
        mu_s: &[],
        nu: &theta.as_slice()[..d_x],
        rho0: &theta.as_slice()[d_x..],
        rho: &[],
    };
    let ys = data.y();
    for_selected_rows(data, layout, &par, |i, row| {
        let g = clamp_rho(link(row.u0));
        let pt = BivPartials::at(row.m0, row.xn, g);
        // ∂P₁ = -∂P₂, so only the sign and the denominator depend on the cell.
        let c = if ys[i].unwrap() <= y {
            -1.0 / (std_cdf(row.m0) - pt.value)
        } else {
            1.0 / pt.value
        };
        for j in 0..d_x {
            out[(i, j)] = c * pt.db * row.x[j];
        }
        let dg = link_deriv(row.u0);
        for j in 0..layout.d_rho0() {
            out[(i, d_x + j)] = c * pt.dr * dg * row.w0[j];
        }
    });
    Ok(out)
}

fn check_step3_dims(rho: &DVector<f64>, eta: &StepParams, data: &ObservationTable, layout: &CovariateLayout) -> Result<()> {
    check_len("sorting coefficients", rho.len(), layout.d_rho())?;
    check_len("selection coefficients at 0", eta.mu0.len(), data.d_z())?;
    check_len("selection coefficients at s", eta.mu_s.len(), data.d_z())?;
    check_len("outcome coefficients", eta.nu.len(), data.d_x())?;
    check_len("censoring-sorting coefficients", eta.rho0.len(), layout.d_rho0())
}

fn step3_eval(
    rho: &DVector<f64>,
    eta: &StepParams,
    data: &ObservationTable,
    layout: &CovariateLayout,
    s: f64,
    y: f64,
    floor: FloorConfig,
    order: Order,
    all_blocks: bool,
) -> Result<Objective> {
    check_step3_dims(rho, eta, data, layout)?;
    let selected = check_selection(data)?;
    let dz = data.d_z();
    let dx = data.d_x();
    let blk = if all_blocks {
        Blocks {
            mu0: Some(0),
            mus: Some(dz),
            nu: Some(2 * dz),
            rho0: Some(2 * dz + dx),
            rho: Some(2 * dz + dx + layout.d_rho0()),
            dim: 2 * dz + dx + layout.d_rho0() + layout.d_rho(),
        }
    } else {
        Blocks { rho: Some(0), dim: layout.d_rho(), ..Blocks::default() }
    };
    let par = Indices {
        mu0: eta.mu0.as_slice(),
        mu_s: eta.mu_s.as_slice(),
        nu: eta.nu.as_slice(),
        rho0: eta.rho0.as_slice(),
        rho: rho.as_slice(),
    };
    let mut acc = Accum::new(blk.dim, order);
    let (ss, ys) = (data.s(), data.y());
    for_selected_rows(data, layout, &par, |i, row| {
        let terms = step3_terms(ss[i], ys[i].unwrap(), s, y);
        add_log_prob(terms, row, &blk, floor, order, &mut acc);
    });
    Ok(finish(acc, data.n(), blk.dim, order, selected))
}

/// Floored four-cell bivariate probit in `ρ` for the cell `(s, y)`, `s > 0`.
pub fn step3_objective(
    rho: &DVector<f64>,
    eta: &StepParams,
    data: &ObservationTable,
    layout: &CovariateLayout,
    s: f64,
    y: f64,
    floor: FloorConfig,
    order: Order,
) -> Result<Objective> {
    step3_eval(rho, eta, data, layout, s, y, floor, order, false)
}

#[derive(Debug, Clone)]
pub struct Step3Eval {
    pub value: f64,
    pub score: DVector<f64>,
    pub hessian: DMatrix<f64>,
    /// ∂²ℓ / ∂ρ ∂μ₀'.
    pub j3_mu0: DMatrix<f64>,
    /// ∂²ℓ / ∂ρ ∂μ_s'.
    pub j3_mus: DMatrix<f64>,
    /// ∂²ℓ / ∂ρ ∂(ν, ρ₀)'.
    pub j3_theta: DMatrix<f64>,
    pub floored_rows: usize,
    pub selected_rows: usize,
    pub boundary_warning: bool,
}

/// `eta.rho` is ignored; the sorting coefficients are `rho`.
pub fn step3_loglik(
    rho: &DVector<f64>,
    eta: &StepParams,
    data: &ObservationTable,
    layout: &CovariateLayout,
    s: f64,
    y: f64,
    floor: FloorConfig,
) -> Result<Step3Eval> {
    let o = step3_eval(rho, eta, data, layout, s, y, floor, Order::Hessian, true)?;
    let dz = data.d_z();
    let dt = data.d_x() + layout.d_rho0();
    let dr = layout.d_rho();
    let r0 = 2 * dz + dt;
    Ok(Step3Eval {
        value: o.value,
        score: o.gradient.rows(r0, dr).into_owned(),
        hessian: o.hessian.view((r0, r0), (dr, dr)).into_owned(),
        j3_mu0: o.hessian.view((r0, 0), (dr, dz)).into_owned(),
        j3_mus: o.hessian.view((r0, dz), (dr, dz)).into_owned(),
        j3_theta: o.hessian.view((r0, 2 * dz), (dr, dt)).into_owned(),
        boundary_warning: o.boundary_warning(),
        floored_rows: o.floored_rows,
        selected_rows: o.selected_rows,
    })
}

/// Unfloored cell probabilities `(A₁, A₂, A₃, A₄)` for one selected row.
pub fn step3_cells(row_z: &[f64], eta: &StepParams, data_x_cols: &[usize], layout: &CovariateLayout) -> [f64; 4] {
    let x: Vec<f64> = data_x_cols.iter().map(|&c| row_z[c]).collect();
    let w0: Vec<f64> = layout.rho0.iter().map(|&c| row_z[c]).collect();
    let w: Vec<f64> = layout.rho.iter().map(|&c| row_z[c]).collect();
    let m0 = dot(row_z, eta.mu0.as_slice());
    let ms = dot(row_z, eta.mu_s.as_slice());
    let xn = dot(&x, eta.nu.as_slice());
    let g0 = clamp_rho(link(dot(&w0, eta.rho0.as_slice())));
    let g = clamp_rho(link(dot(&w, eta.rho.as_slice())));
    let c = crate::gauss2d::biv_cdf;
    let a1 = c(ms, xn, g);
    let a2 = c(ms, -xn, -g);
    [a1, a2, c(m0, xn, g0) - a1, c(m0, -xn, -g0) - a2]
}

/// Per-row unfloored step-3 scores (n × d_ρ):
/// `D{J̄Ī/A₁ - J̄I/A₂ - JĪ/A₃ + JI/A₄} φ₂(z'μ_s, x'ν; g) ġ(w'ρ) w`.
pub fn step3_row_scores(
    rho: &DVector<f64>,
    eta: &StepParams,
    data: &ObservationTable,
    layout: &CovariateLayout,
    s: f64,
    y: f64,
) -> Result<DMatrix<f64>> {
    check_step3_dims(rho, eta, data, layout)?;
    let mut out = DMatrix::zeros(data.n(), layout.d_rho());
    let par = Indices {
        mu0: eta.mu0.as_slice(),
        mu_s: eta.mu_s.as_slice(),
        nu: eta.nu.as_slice(),
        rho0: eta.rho0.as_slice(),
        rho: rho.as_slice(),
    };
    let (ss, ys) = (data.s(), data.y());
    for_selected_rows(data, layout, &par, |i, row| {
        let g = clamp_rho(link(row.u));
        let g0 = clamp_rho(link(row.u0));
        let c = crate::gauss2d::biv_cdf;
        let coef = match (ss[i] > s, ys[i].unwrap() > y) {
            (true, true) => 1.0 / c(row.ms, row.xn, g),
            (true, false) => -1.0 / c(row.ms, -row.xn, -g),
            (false, true) => -1.0 / (c(row.m0, row.xn, g0) - c(row.ms, row.xn, g)),
            (false, false) => 1.0 / (c(row.m0, -row.xn, -g0) - c(row.ms, -row.xn, -g)),
        };
        let dens = crate::gauss2d::biv_pdf_unchecked(row.ms, row.xn, g);
        let f = coef * dens * link_deriv(row.u);
        for j in 0..layout.d_rho() {
            out[(i, j)] = f * row.w[j];
        }
    });
    Ok(out)
}
