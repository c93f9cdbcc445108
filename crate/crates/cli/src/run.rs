//! Command orchestration and artifact writing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use cdr_core::estimator::{fit, CellRecord, CoefficientPaths, FitOptions, GridSpec};
use cdr_core::functionals::{
    bootstrap_group, decomposition_bands, hours_decomposition, wage_decomposition_ordered, Component,
    DecompositionBands, DecompositionTable, GroupInputs, HoursDecomposition,
};
use cdr_core::inference::{bootstrap_draws, influence, uniform_band, variance_rho, BandSet, Contrast, InfluenceRecords};
use cdr_core::likelihood::{CovariateLayout, FloorConfig, ObservationTable};
use cdr_core::simulate::{simulate_hsm, CovariateSampler, HsmParams};
use serde::Serialize;

use crate::config::{RunConfig, YGrid, INTERCEPT};
use crate::error::{CliError, ErrorReport};
use crate::ingest::{ingest, split_groups, write_table, Ingested};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fit,
    Bands,
    Decompose,
    Simulate,
}

impl Command {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fit" => Some(Command::Fit),
            "bands" => Some(Command::Bands),
            "decompose" => Some(Command::Decompose),
            "simulate" => Some(Command::Simulate),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Bands => "bands",
            Command::Decompose => "decompose",
            Command::Simulate => "simulate",
        }
    }
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize)]
struct Manifest {
    command: &'static str,
    status: &'static str,
    seed: u64,
    versions: BTreeMap<&'static str, &'static str>,
    config: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ingest: Option<IngestSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    fits: Vec<FitSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bands: Option<BandSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    decomposition: Option<DecompositionSummary>,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<ErrorReport>,
}

#[derive(Debug, Serialize)]
struct IngestSummary {
    rows: usize,
    selected: usize,
    outcome_dropped_at_censoring: usize,
}

#[derive(Debug, Serialize)]
struct CellDiagnostic {
    step: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    y: Option<f64>,
    iterations: usize,
    grad_norm: f64,
    converged: bool,
    floored_rows: usize,
    floor_active: bool,
    boundary_warning: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

impl CellDiagnostic {
    fn new(step: u8, s: Option<f64>, y: Option<f64>, r: &CellRecord) -> Self {
        Self {
            step,
            s,
            y,
            iterations: r.iterations,
            grad_norm: r.grad_norm,
            converged: r.converged,
            floored_rows: r.floored_rows,
            floor_active: r.floor_active(),
            boundary_warning: r.boundary_warning,
            error: r.error.clone(),
        }
    }
}

#[derive(Debug, Serialize)]
struct FitSummary {
    group: String,
    rows: usize,
    s_points: Vec<f64>,
    y_points: Vec<f64>,
    failed_cells: usize,
    floor_active: bool,
    weak_instrument: bool,
    warnings: Vec<String>,
    cells: Vec<CellDiagnostic>,
}

#[derive(Debug, Serialize)]
struct BandSummary {
    draws: usize,
    level: f64,
    critical_value: f64,
    z0: Vec<f64>,
    degenerate_cells: Vec<(f64, f64)>,
}

#[derive(Debug, Serialize)]
struct DecompositionSummary {
    stratum: (f64, f64),
    ordering: Vec<&'static str>,
    draws: usize,
    failed_draws: usize,
    critical_values: BTreeMap<&'static str, f64>,
}

/// Runs a command and always writes the manifest. Returns the exit code;
/// on failure the error payload is also printed to stderr as JSON.
pub fn execute(command: Command, config: &RunConfig, workers: Option<usize>) -> i32 {
    let mut m = Manifest {
        command: command.name(),
        status: "ok",
        seed: config.seed,
        versions: BTreeMap::from([("cdr-cli", env!("CARGO_PKG_VERSION")), ("cdr-core", cdr_core::VERSION)]),
        config: config.entries.clone(),
        ingest: None,
        fits: Vec::new(),
        bands: None,
        decomposition: None,
        outputs: Vec::new(),
        error: None,
    };
    let result = fs::create_dir_all(&config.output)
        .map_err(|e| CliError::Output(format!("{}: {e}", config.output.display())))
        .and_then(|_| match workers.or(config.workers) {
            Some(w) => rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| CliError::Config(format!("workers: {e}")))?
                .install(|| dispatch(command, config, &mut m)),
            None => dispatch(command, config, &mut m),
        });
    let code = match result {
        Ok(()) => 0,
        Err(e) => {
            let report = e.report();
            eprintln!("{}", serde_json::to_string(&report).expect("serializable"));
            m.status = "error";
            m.error = Some(report);
            e.exit_code()
        }
    };
    let text = serde_json::to_string_pretty(&m).expect("serializable") + "\n";
    if let Err(e) = fs::write(config.output.join(MANIFEST), text) {
        eprintln!("{}", serde_json::json!({"kind": "output", "message": e.to_string()}));
        return if code == 0 { 3 } else { code };
    }
    code
}

fn dispatch(command: Command, config: &RunConfig, m: &mut Manifest) -> Result<(), CliError> {
    check_names(config)?;
    match command {
        Command::Simulate => run_simulate(config, m),
        Command::Fit => run_fit(config, m),
        Command::Bands => run_bands(config, m),
        Command::Decompose => run_decompose(config, m),
    }
}

fn load(config: &RunConfig, m: &mut Manifest) -> Result<Ingested, CliError> {
    let path = config.input.as_ref().ok_or_else(|| CliError::Config("input: required".into()))?;
    let ing = ingest(path, config)?;
    m.ingest = Some(IngestSummary {
        rows: ing.table.n(),
        selected: ing.table.n_selected(),
        outcome_dropped_at_censoring: ing.filled_at_censoring,
    });
    Ok(ing)
}

fn grid_for(config: &RunConfig, table: &ObservationTable) -> Result<GridSpec, CliError> {
    Ok(match &config.y_grid {
        YGrid::Quantiles(q) => GridSpec::with_y_quantiles(table, config.s_points.clone(), q)?,
        YGrid::Points(p) => GridSpec::new(config.s_points.clone(), p.clone())?,
    })
}

fn layout_for(config: &RunConfig, table: &ObservationTable) -> Result<CovariateLayout, CliError> {
    let idx = |key: &str, names: &[String]| -> Result<Vec<usize>, CliError> {
        names.iter().map(|n| config.z_index(key, n)).collect()
    };
    Ok(CovariateLayout::new(table, idx("rho0", &config.rho0)?, idx("rho", &config.rho)?)?)
}

fn fit_group(
    config: &RunConfig,
    label: &str,
    table: &ObservationTable,
    grid: &GridSpec,
    m: &mut Manifest,
) -> Result<CoefficientPaths, CliError> {
    let layout = layout_for(config, table)?;
    let opts = FitOptions { floor: FloorConfig::with_tau(config.floor_tau)?, ..FitOptions::default() };
    let paths = fit(table, grid, &layout, &opts)?;
    let mut cells = Vec::new();
    for (r, &s) in paths.mu_records.iter().zip(grid.s_points()) {
        cells.push(CellDiagnostic::new(1, Some(s), None, r));
    }
    for (r, &y) in paths.theta_records.iter().zip(grid.y_points()) {
        cells.push(CellDiagnostic::new(2, None, Some(y), r));
    }
    for (row, &s) in paths.rho_records.iter().zip(&grid.s_points()[1..]) {
        for (r, &y) in row.iter().zip(grid.y_points()) {
            cells.push(CellDiagnostic::new(3, Some(s), Some(y), r));
        }
    }
    m.fits.push(FitSummary {
        group: label.to_string(),
        rows: table.n(),
        s_points: grid.s_points().to_vec(),
        y_points: grid.y_points().to_vec(),
        failed_cells: paths.failed_cells().len(),
        floor_active: paths.floor_active_at_optimum(),
        weak_instrument: paths.weak_instrument,
        warnings: paths.warnings.clone(),
        cells,
    });
    Ok(paths)
}

fn warn(m: &mut Manifest, label: &str, msg: String) {
    if let Some(f) = m.fits.iter_mut().find(|f| f.group == label) {
        f.warnings.push(msg);
    }
}

struct Csv {
    w: csv::Writer<Vec<u8>>,
}

impl Csv {
    fn new(header: &[&str]) -> Self {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).expect("in-memory write");
        Self { w }
    }

    fn row(&mut self, fields: Vec<String>) {
        self.w.write_record(fields).expect("in-memory write");
    }

    fn save(self, dir: &Path, name: &str, m: &mut Manifest) -> Result<(), CliError> {
        let bytes = self.w.into_inner().map_err(|e| CliError::Output(e.to_string()))?;
        fs::write(dir.join(name), bytes).map_err(|e| CliError::Output(format!("{name}: {e}")))?;
        m.outputs.push(name.to_string());
        Ok(())
    }
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn column_se(psi: &nalgebra::DMatrix<f64>, j: usize) -> f64 {
    let n = psi.nrows() as f64;
    (psi.column(j).norm_squared() / n / n).sqrt()
}

/// Coefficients CSV: `block, s, y, coefficient, estimate, se`.
fn coefficients_csv(config: &RunConfig, paths: &CoefficientPaths, records: Option<&InfluenceRecords>) -> Csv {
    let names = config.z_names();
    let x_names: Vec<&String> = config.x_cols().iter().map(|&c| &names[c]).collect();
    let mut c = Csv::new(&["block", "s", "y", "coefficient", "estimate", "se"]);
    let s_pts = paths.s_points();
    let y_pts = paths.y_points();
    let d_x = x_names.len();
    for (si, mu) in paths.mu.iter().enumerate() {
        for (j, v) in mu.iter().enumerate() {
            let se = records.map(|r| column_se(&r.psi_mu[si], j));
            c.row(vec!["mu".into(), num(s_pts[si]), String::new(), names[j].clone(), num(*v), opt(se)]);
        }
    }
    for (yi, nu) in paths.nu.iter().enumerate() {
        for (j, v) in nu.iter().enumerate() {
            let se = records.map(|r| column_se(&r.psi_theta[yi], j));
            c.row(vec!["nu".into(), String::new(), num(y_pts[yi]), x_names[j].clone(), num(*v), opt(se)]);
        }
    }
    for (yi, r0) in paths.rho0.iter().enumerate() {
        for (j, v) in r0.iter().enumerate() {
            let se = records.map(|r| column_se(&r.psi_theta[yi], d_x + j));
            let name = names[paths.layout.rho0[j]].clone();
            c.row(vec!["rho0".into(), num(0.0), num(y_pts[yi]), name, num(*v), opt(se)]);
        }
    }
    for (si, row) in paths.rho.iter().enumerate() {
        for (yi, cell) in row.iter().enumerate() {
            for (j, &col) in paths.layout.rho.iter().enumerate() {
                let est = cell.as_ref().map(|r| r[j]);
                let se = records.and_then(|r| r.psi_rho.get(&(si + 1, yi))).map(|p| column_se(p, j));
                let (s, y) = (num(s_pts[si + 1]), num(y_pts[yi]));
                c.row(vec!["rho".into(), s, y, names[col].clone(), opt(est), opt(se)]);
            }
        }
    }
    c
}

fn quantile_labels(config: &RunConfig, grid: &GridSpec) -> Vec<String> {
    match &config.y_grid {
        YGrid::Quantiles(q) if q.len() == grid.y_points().len() => q.iter().map(|v| num(*v)).collect(),
        _ => vec![String::new(); grid.y_points().len()],
    }
}

fn run_simulate(config: &RunConfig, m: &mut Manifest) -> Result<(), CliError> {
    let sampler = CovariateSampler::default_design();
    let labels = [&config.group0, &config.group1];
    let mut tables = Vec::new();
    for (g, sim) in config.sim.iter().enumerate() {
        let params = HsmParams {
            nu: sim.nu.clone(),
            mu: sim.mu.clone(),
            sigma_u: sim.sigma_u,
            sigma_v: sim.sigma_v,
            rho: sim.rho,
            sampler: sampler.clone(),
        };
        let (t, _) = simulate_hsm(sim.n, &params, config.seed.wrapping_add(g as u64))?;
        tables.push(t);
    }
    let (table, labels) = if tables.len() == 1 {
        (tables.pop().expect("one table"), None)
    } else {
        let (t0, t1) = (&tables[0], &tables[1]);
        let mut z = Vec::with_capacity((t0.n() + t1.n()) * t0.d_z());
        let mut s = Vec::new();
        let mut y = Vec::new();
        let mut l = Vec::new();
        for (g, t) in [t0, t1].into_iter().enumerate() {
            for i in 0..t.n() {
                z.extend_from_slice(t.z_row(i));
                l.push(labels[g].clone());
            }
            s.extend_from_slice(t.s());
            y.extend_from_slice(t.y());
        }
        (ObservationTable::new(s, y, z, t0.d_z(), t0.x_cols().to_vec())?, Some(l))
    };
    let mut bytes = Vec::new();
    write_table(&mut bytes, &table, &sampler.names, sampler.intercept(), labels.as_deref())?;
    fs::write(config.output.join("data.csv"), bytes).map_err(|e| CliError::Output(format!("data.csv: {e}")))?;
    m.outputs.push("data.csv".into());
    Ok(())
}

fn run_fit(config: &RunConfig, m: &mut Manifest) -> Result<(), CliError> {
    let ing = load(config, m)?;
    let grid = grid_for(config, &ing.table)?;
    let paths = fit_group(config, "all", &ing.table, &grid, m)?;
    let records = match influence(&paths, &ing.table) {
        Ok(r) => Some(r),
        Err(e) => {
            warn(m, "all", format!("standard errors unavailable: {e}"));
            None
        }
    };
    coefficients_csv(config, &paths, records.as_ref()).save(&config.output, "coefficients.csv", m)
}

fn run_bands(config: &RunConfig, m: &mut Manifest) -> Result<(), CliError> {
    if config.bootstrap < 2 {
        return Err(CliError::Config("bootstrap: at least two draws are needed for bands".into()));
    }
    let ing = load(config, m)?;
    let grid = grid_for(config, &ing.table)?;
    let paths = fit_group(config, "all", &ing.table, &grid, m)?;
    let records = influence(&paths, &ing.table)?;
    coefficients_csv(config, &paths, Some(&records)).save(&config.output, "coefficients.csv", m)?;
    let variance = variance_rho(&records);
    let draws = bootstrap_draws(&records, config.bootstrap, config.seed)?;
    let z0 = config.z0_row()?;
    let cells: Vec<_> = records.cells().collect();
    let band = uniform_band(&records, &variance, &draws, &Contrast::SortingAt(z0.clone()), config.level, &cells)?;
    write_bands(config, &grid, &band, m)?;
    m.bands = Some(BandSummary {
        draws: config.bootstrap,
        level: config.level,
        critical_value: band.critical_value,
        z0,
        degenerate_cells: band.degenerate.iter().map(|&(si, yi)| (grid.s_points()[si], grid.y_points()[yi])).collect(),
    });
    if !records.skipped.is_empty() {
        warn(m, "all", format!("{} failed cells left out of the bands", records.skipped.len()));
    }
    Ok(())
}

fn write_bands(config: &RunConfig, grid: &GridSpec, band: &BandSet, m: &mut Manifest) -> Result<(), CliError> {
    let mut c = Csv::new(&["s", "y", "estimate", "lower", "upper", "cv", "level"]);
    let mut plot = Csv::new(&["s", "y_quantile_index", "y", "series", "value"]);
    let q = quantile_labels(config, grid);
    for (i, &(si, yi)) in band.cells.iter().enumerate() {
        let (s, y) = (num(grid.s_points()[si]), num(grid.y_points()[yi]));
        c.row(vec![
            s.clone(),
            y.clone(),
            num(band.estimate[i]),
            num(band.lower[i]),
            num(band.upper[i]),
            num(band.critical_value),
            num(band.level),
        ]);
        for (series, v) in [("estimate", band.estimate[i]), ("lower", band.lower[i]), ("upper", band.upper[i])] {
            plot.row(vec![s.clone(), q[yi].clone(), y.clone(), series.into(), num(v)]);
        }
    }
    c.save(&config.output, "bands.csv", m)?;
    plot.save(&config.output, "plot_sorting.csv", m)
}

fn run_decompose(config: &RunConfig, m: &mut Manifest) -> Result<(), CliError> {
    let ing = load(config, m)?;
    let (t1, t0) = split_groups(&ing, config)?;
    let labels = ing.labels.as_ref().expect("split checked labels");
    let pooled_rows: Vec<usize> =
        (0..labels.len()).filter(|&i| labels[i] == config.group1 || labels[i] == config.group0).collect();
    let grid = grid_for(config, &ing.table.subset(&pooled_rows))?;
    let (l1, l0) = (format!("group1:{}", config.group1), format!("group0:{}", config.group0));
    let p1 = fit_group(config, &l1, &t1, &grid, m)?;
    let p0 = fit_group(config, &l0, &t0, &grid, m)?;
    let g1 = GroupInputs::new(&p1, &t1)?;
    let g0 = GroupInputs::new(&p0, &t0)?;
    let (lo, hi) = config.stratum;
    let table = wage_decomposition_ordered(&g1, &g0, lo, hi, &config.taus, config.ordering)?;
    let hours = hours_decomposition(&g1, &g0, grid.s_points())?;

    let mut bands = None;
    let r1 = influence(&p1, &t1);
    let r0 = influence(&p0, &t0);
    let (r1, r0) = match (r1, r0) {
        (Ok(a), Ok(b)) => (Some(a), Some(b)),
        (a, b) => {
            for (l, r) in [(&l1, a), (&l0, b)] {
                if let Err(e) = r {
                    warn(m, l, format!("standard errors unavailable: {e}"));
                }
            }
            (None, None)
        }
    };
    if config.bootstrap >= 2 {
        let (Some(a), Some(b)) = (&r1, &r0) else {
            return Err(CliError::Numerical(cdr_core::CdrError::InvalidInput(
                "bootstrap bounds need influence functions for both groups".into(),
            )));
        };
        let d1 = bootstrap_group(&p1, a, config.bootstrap, config.seed)?;
        let d0 = bootstrap_group(&p0, b, config.bootstrap, config.seed.wrapping_add(1))?;
        bands = Some(decomposition_bands(&table, &d1, &t1, &d0, &t0, lo, hi, config.level)?);
    }
    coefficients_csv(config, &p1, r1.as_ref()).save(&config.output, "coefficients_group1.csv", m)?;
    coefficients_csv(config, &p0, r0.as_ref()).save(&config.output, "coefficients_group0.csv", m)?;
    write_decomposition(config, &table, bands.as_ref(), m)?;
    write_hours(config, &hours, m)?;
    m.decomposition = Some(DecompositionSummary {
        stratum: config.stratum,
        ordering: config.ordering.iter().map(|c| c.name()).collect(),
        draws: if bands.is_some() { config.bootstrap } else { 0 },
        failed_draws: bands.as_ref().map_or(0, |b| b.failed_draws),
        critical_values: bands
            .as_ref()
            .map(|b| table.series().iter().zip(b.critical_value).map(|((n, _), cv)| (*n, cv)).collect())
            .unwrap_or_default(),
    });
    Ok(())
}

fn write_decomposition(
    config: &RunConfig,
    t: &DecompositionTable,
    bands: Option<&DecompositionBands>,
    m: &mut Manifest,
) -> Result<(), CliError> {
    let series = t.series();
    let mut header: Vec<String> = vec!["tau".into()];
    header.extend(series.iter().map(|(n, _)| n.to_string()));
    if bands.is_some() {
        for (n, _) in &series {
            header.push(format!("{n}_lower"));
            header.push(format!("{n}_upper"));
        }
    }
    for c in Component::DEFAULT_ORDER {
        header.push(format!("{}_share", c.name()));
    }
    header.extend(["quantile_group1".into(), "quantile_group0".into()]);
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut c = Csv::new(&refs);
    let mut plot = Csv::new(&["tau", "series", "value"]);
    let shares: Vec<Vec<f64>> = Component::DEFAULT_ORDER.iter().map(|&k| t.ratios(k)).collect();
    for (q, &tau) in t.quantile_index.iter().enumerate() {
        let mut row = vec![num(tau)];
        row.extend(series.iter().map(|(_, v)| num(v[q])));
        if let Some(b) = bands {
            for k in 0..series.len() {
                row.push(num(b.lower[k][q]));
                row.push(num(b.upper[k][q]));
            }
        }
        row.extend(shares.iter().map(|s| num(s[q])));
        row.extend([num(t.quantile1[q]), num(t.quantile0[q])]);
        c.row(row);
        for (n, v) in &series {
            plot.row(vec![num(tau), n.to_string(), num(v[q])]);
        }
    }
    c.save(&config.output, "decomposition.csv", m)?;
    plot.save(&config.output, "plot_decomposition.csv", m)
}

fn write_hours(config: &RunConfig, h: &HoursDecomposition, m: &mut Manifest) -> Result<(), CliError> {
    let mut c = Csv::new(&["s", "total", "structure", "composition"]);
    for i in 0..h.s_points.len() {
        c.row(vec![num(h.s_points[i]), num(h.total[i]), num(h.structure[i]), num(h.composition[i])]);
    }
    c.save(&config.output, "hours.csv", m)
}

/// `const` is reserved for the intercept in covariate lists.
fn check_names(config: &RunConfig) -> Result<(), CliError> {
    let mut seen = std::collections::BTreeSet::new();
    for n in config.covariates.iter().chain(&config.instruments) {
        if n == INTERCEPT {
            return Err(CliError::Config(format!("'{INTERCEPT}' is reserved for the intercept")));
        }
        if !seen.insert(n) {
            return Err(CliError::Config(format!("covariate '{n}' listed twice")));
        }
    }
    Ok(())
}
