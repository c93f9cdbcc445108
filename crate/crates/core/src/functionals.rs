//! Distribution functionals of the fitted model, the generalized quantile
//! operator and the wage and hours decompositions.

use rayon::prelude::*;

use crate::error::{CdrError, Result};
use crate::estimator::CoefficientPaths;
use crate::gauss2d::{biv_cdf, std_cdf};
use crate::inference::{bootstrap_paths, multipliers, InfluenceRecords};
use crate::likelihood::{link, ObservationTable};

const EMPTY_STRATUM: f64 = 1e-10;
const FRECHET_SLACK: f64 = 1e-12;

/// Fitted paths of one group with the covariate rows that define its
/// empirical covariate distribution. Optional weights `wᵢ` replace the
/// uniform `1/n` by `wᵢ/n` (used for multiplier-bootstrap replicates).
#[derive(Debug, Clone, Copy)]
pub struct GroupInputs<'a> {
    pub paths: &'a CoefficientPaths,
    pub data: &'a ObservationTable,
    pub weights: Option<&'a [f64]>,
}

impl<'a> GroupInputs<'a> {
    pub fn new(paths: &'a CoefficientPaths, data: &'a ObservationTable) -> Result<Self> {
        let d_z = paths.mu.first().map_or(0, |m| m.len());
        if d_z != data.d_z() || paths.nu.first().map_or(0, |v| v.len()) != data.d_x() {
            return Err(CdrError::InvalidInput("fitted paths and covariate rows have different dimensions".into()));
        }
        Ok(Self { paths, data, weights: None })
    }

    pub fn with_weights(mut self, weights: &'a [f64]) -> Result<Self> {
        if weights.len() != self.data.n() {
            return Err(CdrError::InvalidInput("one weight per covariate row is required".into()));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    // Sequential so the summation order, and hence every bit of the result,
    // does not depend on the thread pool.
    fn average(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let n = self.data.n();
        let total: f64 = match self.weights {
            None => (0..n).map(|i| f(self.data.z_row(i))).sum(),
            Some(w) => (0..n).map(|i| w[i] * f(self.data.z_row(i))).sum(),
        };
        total / n as f64
    }

    fn x_index(&self, yi: usize, z: &[f64]) -> f64 {
        self.data.x_cols().iter().zip(self.paths.nu[yi].iter()).map(|(&c, v)| z[c] * v).sum()
    }

    fn z_index(&self, si: usize, z: &[f64]) -> f64 {
        z.iter().zip(self.paths.mu[si].iter()).map(|(a, b)| a * b).sum()
    }
}

/// A probability together with a flag for a bound violation that was
/// reported or clipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flagged {
    pub value: f64,
    pub flagged: bool,
}

/// Selection level of an interval endpoint: a grid index or `+∞`.
#[derive(Clone, Copy)]
enum Level {
    Grid(usize),
    Infinite,
}

fn level(paths: &CoefficientPaths, s: f64) -> Result<Level> {
    if s == f64::INFINITY {
        Ok(Level::Infinite)
    } else {
        paths.s_index(s).map(Level::Grid)
    }
}

fn missing_cell(paths: &CoefficientPaths, si: usize, yi: usize) -> CdrError {
    CdrError::InvalidInput(format!(
        "no sorting coefficients at s = {}, y = {}",
        paths.s_points()[si],
        paths.y_points()[yi]
    ))
}

/// `n⁻¹ Σ Φ(-x'ν̂_y)`.
pub fn marginal_cdf_outcome(group: &GroupInputs, y: f64) -> Result<f64> {
    let yi = group.paths.y_index(y)?;
    Ok(group.average(|z| std_cdf(-group.x_index(yi, z))))
}

/// `n⁻¹ Σ Φ(-z'μ̂_s)`.
pub fn marginal_cdf_selection(group: &GroupInputs, s: f64) -> Result<f64> {
    let si = group.paths.s_index(s)?;
    Ok(group.average(|z| std_cdf(-group.z_index(si, z))))
}

/// `n⁻¹ Σ Φ₂(-z'μ̂_s, -x'ν̂_y; g(w'ρ̂_{sy}))`, flagged when outside the
/// Fréchet bounds implied by the fitted marginals.
pub fn joint_cdf(group: &GroupInputs, s: f64, y: f64) -> Result<Flagged> {
    let (si, yi) = (group.paths.s_index(s)?, group.paths.y_index(y)?);
    require_cell(group.paths, si, yi)?;
    let value = mixed_joint(group, group, group, group, si, yi);
    let fs = marginal_cdf_selection(group, s)?;
    let fy = marginal_cdf_outcome(group, y)?;
    let flagged = value > fs.min(fy) + FRECHET_SLACK || value < (fs + fy - 1.0).max(0.0) - FRECHET_SLACK;
    Ok(Flagged { value, flagged })
}

/// `F_Y(y | s_lo < S* ≤ s_hi)`; `s_hi` may be `+∞`.
pub fn conditional_cdf_by_interval(group: &GroupInputs, s_lo: f64, s_hi: f64, y: f64) -> Result<Flagged> {
    counterfactual_cdf(group, group, group, group, s_lo, s_hi, y)
}

/// `n_k⁻¹ Σ Φ₂(-z'μ_r(s), -x'ν_t(y); g(w'ρ_j(s, y)))` at grid indices.
fn mixed_joint(t: &GroupInputs, j: &GroupInputs, r: &GroupInputs, k: &GroupInputs, si: usize, yi: usize) -> f64 {
    k.average(|z| mixed_joint_row(t, j, r, si, yi, z))
}

fn mixed_joint_row(t: &GroupInputs, j: &GroupInputs, r: &GroupInputs, si: usize, yi: usize, z: &[f64]) -> f64 {
    let u = j.paths.sorting_index(si, yi, z).unwrap_or(0.0);
    biv_cdf(-r.z_index(si, z), -t.x_index(yi, z), link(u))
}

fn require_cell(paths: &CoefficientPaths, si: usize, yi: usize) -> Result<()> {
    match paths.sorting_coefficients(si, yi) {
        Some(_) => Ok(()),
        None => Err(missing_cell(paths, si, yi)),
    }
}

/// Counterfactual conditional CDF `F_{Y⟨t,j,r,k⟩}(y)` on the stratum
/// `(s_lo, s_hi]`: outcome coefficients from `t`, sorting from `j`,
/// selection from `r` and covariate rows from `k`. `s_hi` may be `+∞`.
pub fn counterfactual_cdf(
    t: &GroupInputs,
    j: &GroupInputs,
    r: &GroupInputs,
    k: &GroupInputs,
    s_lo: f64,
    s_hi: f64,
    y: f64,
) -> Result<Flagged> {
    check_aligned(&[t, j, r, k])?;
    if !(s_lo < s_hi) {
        return Err(CdrError::Domain(format!("empty interval ({s_lo}, {s_hi}]")));
    }
    let yi = t.paths.y_index(y)?;
    let lo = match level(r.paths, s_lo)? {
        Level::Grid(si) => si,
        Level::Infinite => unreachable!("s_lo < s_hi"),
    };
    require_cell(j.paths, lo, yi)?;
    let (num, den) = match level(r.paths, s_hi)? {
        Level::Grid(h) => {
            require_cell(j.paths, h, yi)?;
            (
                k.average(|z| mixed_joint_row(t, j, r, h, yi, z) - mixed_joint_row(t, j, r, lo, yi, z)),
                k.average(|z| std_cdf(-r.z_index(h, z)) - std_cdf(-r.z_index(lo, z))),
            )
        }
        Level::Infinite => (
            k.average(|z| std_cdf(-t.x_index(yi, z)) - mixed_joint_row(t, j, r, lo, yi, z)),
            k.average(|z| 1.0 - std_cdf(-r.z_index(lo, z))),
        ),
    };
    if !(den > EMPTY_STRATUM) {
        return Err(CdrError::EmptyStratum { lo: s_lo, hi: s_hi, mass: den });
    }
    let flagged = num < 0.0 || num > den;
    Ok(Flagged { value: num.clamp(0.0, den) / den, flagged })
}

fn check_aligned(groups: &[&GroupInputs]) -> Result<()> {
    let first = groups[0].paths;
    for g in &groups[1..] {
        let p = g.paths;
        if p.s_points() != first.s_points() || p.y_points() != first.y_points() {
            return Err(CdrError::InvalidInput("groups are fitted on different grids".into()));
        }
        if p.layout != first.layout || g.data.d_z() != groups[0].data.d_z() || g.data.x_cols() != groups[0].data.x_cols() {
            return Err(CdrError::InvalidInput("groups have different covariate layouts".into()));
        }
    }
    Ok(())
}

/// Generalized quantile of a CDF tabulated on an ascending grid:
/// `y₁ + Σⱼ (yⱼ₊₁ - yⱼ) 1(F̃ⱼ ≤ τ)` where `F̃` is the sorted (monotone
/// rearranged) sequence of values. The input is not modified.
pub fn generalized_quantile(y_grid: &[f64], f: &[f64], tau: f64) -> Result<f64> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(CdrError::Domain(format!("quantile index {tau} outside (0, 1)")));
    }
    if y_grid.is_empty() || y_grid.len() != f.len() {
        return Err(CdrError::InvalidInput("CDF values must match a nonempty grid".into()));
    }
    if y_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(CdrError::InvalidInput("grid must be strictly ascending".into()));
    }
    let mut sorted = f.to_vec();
    sorted.sort_by(f64::total_cmp);
    let below = sorted[..sorted.len() - 1].iter().filter(|&&v| v <= tau).count();
    Ok(y_grid[below])
}

/// Component of the wage decomposition, named by the input switched from
/// group 1 to group 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    WageStructure,
    SelectionSorting,
    SelectionStructure,
    Composition,
}

impl Component {
    pub const DEFAULT_ORDER: [Component; 4] = [
        Component::WageStructure,
        Component::SelectionSorting,
        Component::SelectionStructure,
        Component::Composition,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::WageStructure => "wage_structure",
            Component::SelectionSorting => "selection_sorting",
            Component::SelectionStructure => "selection_structure",
            Component::Composition => "composition",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionTable {
    pub quantile_index: Vec<f64>,
    pub total: Vec<f64>,
    pub wage_structure: Vec<f64>,
    pub selection_sorting: Vec<f64>,
    pub selection_structure: Vec<f64>,
    pub composition: Vec<f64>,
    /// Observed quantiles of group 1 and group 0 on the stratum.
    pub quantile1: Vec<f64>,
    pub quantile0: Vec<f64>,
    pub ordering: [Component; 4],
}

impl DecompositionTable {
    pub fn component(&self, c: Component) -> &[f64] {
        match c {
            Component::WageStructure => &self.wage_structure,
            Component::SelectionSorting => &self.selection_sorting,
            Component::SelectionStructure => &self.selection_structure,
            Component::Composition => &self.composition,
        }
    }

    /// `total` followed by the four components in their fixed order.
    pub fn series(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("total", &self.total),
            ("wage_structure", &self.wage_structure),
            ("selection_sorting", &self.selection_sorting),
            ("selection_structure", &self.selection_structure),
            ("composition", &self.composition),
        ]
    }

    /// Each component as a share of the total gap (NaN where the gap is 0).
    pub fn ratios(&self, c: Component) -> Vec<f64> {
        self.component(c)
            .iter()
            .zip(&self.total)
            .map(|(v, t)| if *t == 0.0 { f64::NAN } else { v / t })
            .collect()
    }
}

/// Counterfactual CDF over the whole `y` grid for index pattern
/// `[t, j, r, k]` (1 selects `g1`, 0 selects `g0`).
fn counterfactual_path(
    g1: &GroupInputs,
    g0: &GroupInputs,
    pattern: [u8; 4],
    s_lo: f64,
    s_hi: f64,
) -> Result<Vec<f64>> {
    let pick = |b: u8| if b == 1 { g1 } else { g0 };
    let [t, j, r, k] = pattern.map(pick);
    t.paths
        .y_points()
        .iter()
        .map(|&y| counterfactual_cdf(t, j, r, k, s_lo, s_hi, y).map(|f| f.value))
        .collect()
}

/// Four-term decomposition of the quantile gap `Q⟨1,1,1,1⟩ - Q⟨0,0,0,0⟩`
/// on the stratum `(s_lo, s_hi]`, switching inputs to group 0 in the
/// order wage structure, sorting, selection structure, composition.
pub fn wage_decomposition(
    g1: &GroupInputs,
    g0: &GroupInputs,
    s_lo: f64,
    s_hi: f64,
    taus: &[f64],
) -> Result<DecompositionTable> {
    wage_decomposition_ordered(g1, g0, s_lo, s_hi, taus, Component::DEFAULT_ORDER)
}

/// [`wage_decomposition`] with a different extraction order. The sum of
/// the components always equals the total; individual terms depend on the
/// order.
pub fn wage_decomposition_ordered(
    g1: &GroupInputs,
    g0: &GroupInputs,
    s_lo: f64,
    s_hi: f64,
    taus: &[f64],
    ordering: [Component; 4],
) -> Result<DecompositionTable> {
    let mut seen = [false; 4];
    for c in ordering {
        seen[c.slot()] = true;
    }
    if seen.contains(&false) {
        return Err(CdrError::InvalidInput("ordering must list each component once".into()));
    }
    check_aligned(&[g1, g0])?;
    let mut patterns = vec![[1u8; 4]];
    for c in ordering {
        let mut p = *patterns.last().expect("nonempty");
        p[c.slot()] = 0;
        patterns.push(p);
    }
    let cdfs: Vec<Vec<f64>> = patterns
        .par_iter()
        .map(|&p| counterfactual_path(g1, g0, p, s_lo, s_hi))
        .collect::<Result<_>>()?;
    let grid = g1.paths.y_points();
    let quantiles: Vec<Vec<f64>> = cdfs
        .iter()
        .map(|f| taus.iter().map(|&tau| generalized_quantile(grid, f, tau)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let mut comps: [Vec<f64>; 4] = Default::default();
    for (step, c) in ordering.iter().enumerate() {
        comps[c.slot()] = quantiles[step].iter().zip(&quantiles[step + 1]).map(|(a, b)| a - b).collect();
    }
    let [wage_structure, selection_sorting, selection_structure, composition] = comps;
    Ok(DecompositionTable {
        quantile_index: taus.to_vec(),
        total: quantiles[0].iter().zip(&quantiles[4]).map(|(a, b)| a - b).collect(),
        wage_structure,
        selection_sorting,
        selection_structure,
        composition,
        quantile1: quantiles[0].clone(),
        quantile0: quantiles[4].clone(),
        ordering,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoursDecomposition {
    pub s_points: Vec<f64>,
    /// `F_S⟨0,0⟩ - F_S⟨1,1⟩`.
    pub total: Vec<f64>,
    /// `F_S⟨0,0⟩ - F_S⟨1,0⟩`.
    pub structure: Vec<f64>,
    /// `F_S⟨1,0⟩ - F_S⟨1,1⟩`.
    pub composition: Vec<f64>,
}

/// Selection-CDF gap with `F_S⟨r,k⟩(s) = n_k⁻¹ Σ Φ(-z'μ̂_r(s))`, split
/// into a structure term (`μ` switched) and a composition term.
pub fn hours_decomposition(g1: &GroupInputs, g0: &GroupInputs, s_grid: &[f64]) -> Result<HoursDecomposition> {
    check_aligned(&[g1, g0])?;
    let cdf = |r: &GroupInputs, k: &GroupInputs, s: f64| -> Result<f64> {
        let si = r.paths.s_index(s)?;
        Ok(k.average(|z| std_cdf(-r.z_index(si, z))))
    };
    let mut out = HoursDecomposition {
        s_points: s_grid.to_vec(),
        total: vec![],
        structure: vec![],
        composition: vec![],
    };
    for &s in s_grid {
        let f00 = cdf(g0, g0, s)?;
        let f10 = cdf(g1, g0, s)?;
        let f11 = cdf(g1, g1, s)?;
        out.total.push(f00 - f11);
        out.structure.push(f00 - f10);
        out.composition.push(f10 - f11);
    }
    Ok(out)
}

/// Multiplier-bootstrap replicates of a group: perturbed coefficient paths
/// and covariate weights `1 + ωᵢ`, both built from the same multipliers.
pub fn bootstrap_group(
    fit: &CoefficientPaths,
    records: &InfluenceRecords,
    b_draws: usize,
    seed: u64,
) -> Result<Vec<(CoefficientPaths, Vec<f64>)>> {
    let paths = bootstrap_paths(fit, records, b_draws, seed)?;
    Ok(paths
        .into_iter()
        .enumerate()
        .map(|(b, p)| {
            let w = multipliers(records.n, seed, b).iter().map(|v| 1.0 + v).collect();
            (p, w)
        })
        .collect())
}

/// Uniform-in-τ bootstrap bands for each decomposition series, built as
/// `estimate ± cv · sd` with the bootstrap standard deviation and the
/// level-quantile of the max-t statistic over τ.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionBands {
    pub level: f64,
    /// In the order of [`DecompositionTable::series`].
    pub lower: [Vec<f64>; 5],
    pub upper: [Vec<f64>; 5],
    pub critical_value: [f64; 5],
    /// Replicates that failed (for example an empty stratum) and were left out.
    pub failed_draws: usize,
}

pub fn decomposition_bands(
    estimate: &DecompositionTable,
    g1_draws: &[(CoefficientPaths, Vec<f64>)],
    g1_data: &ObservationTable,
    g0_draws: &[(CoefficientPaths, Vec<f64>)],
    g0_data: &ObservationTable,
    s_lo: f64,
    s_hi: f64,
    level: f64,
) -> Result<DecompositionBands> {
    if !(0.0 < level && level < 1.0) {
        return Err(CdrError::Domain(format!("level {level} outside (0, 1)")));
    }
    if g1_draws.len() != g0_draws.len() || g1_draws.len() < 2 {
        return Err(CdrError::InvalidInput("both groups need the same number (at least two) of draws".into()));
    }
    let tables: Vec<Option<DecompositionTable>> = g1_draws
        .par_iter()
        .zip(g0_draws.par_iter())
        .map(|((p1, w1), (p0, w0))| {
            let g1 = GroupInputs { paths: p1, data: g1_data, weights: Some(w1) };
            let g0 = GroupInputs { paths: p0, data: g0_data, weights: Some(w0) };
            wage_decomposition_ordered(&g1, &g0, s_lo, s_hi, &estimate.quantile_index, estimate.ordering).ok()
        })
        .collect();
    let ok: Vec<&DecompositionTable> = tables.iter().flatten().collect();
    let failed_draws = tables.len() - ok.len();
    if ok.len() < 2 {
        return Err(CdrError::InvalidInput("fewer than two bootstrap replicates succeeded".into()));
    }
    let mut lower: [Vec<f64>; 5] = Default::default();
    let mut upper: [Vec<f64>; 5] = Default::default();
    let mut critical_value = [0.0; 5];
    for (c, (_, est)) in estimate.series().iter().enumerate() {
        let m = est.len();
        let sd: Vec<f64> = (0..m)
            .map(|q| {
                let vals: Vec<f64> = ok.iter().map(|t| t.series()[c].1[q]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
            })
            .collect();
        let mut maxima: Vec<f64> = ok
            .iter()
            .map(|t| {
                (0..m)
                    .filter(|&q| sd[q] > 0.0)
                    .map(|q| (t.series()[c].1[q] - est[q]).abs() / sd[q])
                    .fold(0.0, f64::max)
            })
            .collect();
        maxima.sort_by(f64::total_cmp);
        let idx = ((level * maxima.len() as f64).ceil() as usize).clamp(1, maxima.len()) - 1;
        let cv = maxima[idx];
        critical_value[c] = cv;
        lower[c] = est.iter().zip(&sd).map(|(e, s)| e - cv * s).collect();
        upper[c] = est.iter().zip(&sd).map(|(e, s)| e + cv * s).collect();
    }
    Ok(DecompositionBands { level, lower, upper, critical_value, failed_draws })
}
