//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cdr_core::functionals::Component;

use crate::error::CliError;

/// Every key the configuration understands, with its default (if any).
const KEYS: &[(&str, Option<&str>)] = &[
    ("input", None),
    ("output", Some("out")),
    ("selection", Some("s")),
    ("outcome", Some("y")),
    ("covariates", Some("")),
    ("instruments", Some("")),
    ("intercept", Some("true")),
    ("group", None),
    ("group1", Some("1")),
    ("group0", Some("0")),
    ("censoring_point", Some("0")),
    ("lower_censored", Some("false")),
    ("s_points", None),
    ("y_quantiles", None),
    ("y_points", None),
    ("rho0", Some("const")),
    ("rho", Some("const")),
    ("z0", Some("")),
    ("floor_tau", Some("1e-5")),
    ("bootstrap", Some("200")),
    ("level", Some("0.95")),
    ("seed", Some("1")),
    ("workers", None),
    ("taus", Some("0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")),
    ("stratum", Some("0,inf")),
    ("ordering", Some("wage_structure,selection_sorting,selection_structure,composition")),
    ("sim_n", Some("2000")),
    ("sim_nu", Some("1,0.5")),
    ("sim_mu", Some("-5,5,40")),
    ("sim_sigma_u", Some("1")),
    ("sim_sigma_v", Some("20")),
    ("sim_rho", Some("0.5")),
    ("sim_groups", Some("1")),
    ("sim1_n", None),
    ("sim1_nu", None),
    ("sim1_mu", None),
    ("sim1_sigma_u", None),
    ("sim1_sigma_v", None),
    ("sim1_rho", None),
];

pub const INTERCEPT: &str = "const";

/// How the outcome grid is specified.
#[derive(Debug, Clone, PartialEq)]
pub enum YGrid {
    /// Quantile indices of the outcome among selected rows.
    Quantiles(Vec<f64>),
    Points(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimGroup {
    pub n: usize,
    pub nu: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Raw entries as written (echoed into the manifest).
    pub entries: BTreeMap<String, String>,
    pub input: Option<PathBuf>,
    pub output: PathBuf,
    pub selection: String,
    pub outcome: String,
    pub covariates: Vec<String>,
    pub instruments: Vec<String>,
    pub intercept: bool,
    pub group: Option<String>,
    pub group1: String,
    pub group0: String,
    pub censoring_point: f64,
    pub lower_censored: bool,
    pub s_points: Vec<f64>,
    pub y_grid: YGrid,
    pub rho0: Vec<String>,
    pub rho: Vec<String>,
    pub z0: Vec<(String, f64)>,
    pub floor_tau: f64,
    pub bootstrap: usize,
    pub level: f64,
    pub seed: u64,
    pub workers: Option<usize>,
    pub taus: Vec<f64>,
    pub stratum: (f64, f64),
    pub ordering: [Component; 4],
    pub sim: Vec<SimGroup>,
}

fn bad(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

fn number(key: &str, v: &str) -> Result<f64, CliError> {
    match v.trim() {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        t => t.parse::<f64>().map_err(|_| bad(key, format!("'{t}' is not a number"))),
    }
}

fn numbers(key: &str, v: &str) -> Result<Vec<f64>, CliError> {
    names(v).iter().map(|t| number(key, t)).collect()
}

fn names(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect()
}

fn flag(key: &str, v: &str) -> Result<bool, CliError> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        t => Err(bad(key, format!("'{t}' is not a boolean"))),
    }
}

fn count(key: &str, v: &str) -> Result<usize, CliError> {
    v.trim().parse().map_err(|_| bad(key, format!("'{}' is not a nonnegative integer", v.trim())))
}

fn component(key: &str, v: &str) -> Result<Component, CliError> {
    Component::DEFAULT_ORDER
        .into_iter()
        .find(|c| c.name() == v)
        .ok_or_else(|| bad(key, format!("unknown component '{v}'")))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, &[])
    }

    /// Parses config text; `overrides` (`key=value`) replace entries from the
    /// text. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", no + 1)))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key '{k}'", no + 1)));
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override '{o}': expected key=value")))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        for k in entries.keys() {
            if !KEYS.iter().any(|(name, _)| name == k) {
                return Err(CliError::Config(format!("unknown key '{k}'")));
            }
        }
        Self::build(entries, base)
    }

    fn build(entries: BTreeMap<String, String>, base: &Path) -> Result<Self, CliError> {
        let get = |k: &str| -> Option<String> {
            entries
                .get(k)
                .cloned()
                .or_else(|| KEYS.iter().find(|(n, _)| *n == k).and_then(|(_, d)| d.map(String::from)))
        };
        let req = |k: &str| get(k).ok_or_else(|| bad(k, "required"));
        let path = |v: String| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        let s_points = match get("s_points") {
            Some(v) => numbers("s_points", &v)?,
            None => vec![0.0],
        };
        if !s_points.contains(&0.0) {
            return Err(bad("s_points", "must include 0"));
        }
        let y_grid = match (get("y_quantiles"), get("y_points")) {
            (Some(_), Some(_)) => return Err(CliError::Config("give either y_quantiles or y_points, not both".into())),
            (Some(q), None) => {
                let q = numbers("y_quantiles", &q)?;
                if q.iter().any(|v| !(0.0 < *v && *v < 1.0)) {
                    return Err(bad("y_quantiles", "indices must lie in (0, 1)"));
                }
                YGrid::Quantiles(q)
            }
            (None, Some(p)) => YGrid::Points(numbers("y_points", &p)?),
            (None, None) => YGrid::Quantiles((1..=9).map(|k| k as f64 / 10.0).collect()),
        };
        let level = number("level", &req("level")?)?;
        if !(0.0 < level && level < 1.0) {
            return Err(bad("level", "must lie in (0, 1)"));
        }
        let taus = numbers("taus", &req("taus")?)?;
        if taus.iter().any(|t| !(0.0 < *t && *t < 1.0)) {
            return Err(bad("taus", "quantile indices must lie in (0, 1)"));
        }
        let stratum = numbers("stratum", &req("stratum")?)?;
        let [lo, hi] = stratum[..] else {
            return Err(bad("stratum", "expected two endpoints 'lo,hi'"));
        };
        if !(lo < hi) {
            return Err(bad("stratum", "lower endpoint must be below the upper"));
        }
        let order: Vec<Component> =
            names(&req("ordering")?).iter().map(|c| component("ordering", c)).collect::<Result<_, _>>()?;
        let ordering: [Component; 4] =
            order.try_into().map_err(|_| bad("ordering", "list all four components"))?;
        if Component::DEFAULT_ORDER.iter().any(|c| !ordering.contains(c)) {
            return Err(bad("ordering", "list each component once"));
        }
        let z0 = names(&req("z0")?)
            .iter()
            .map(|kv| {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad("z0", format!("'{kv}': expected name=value")))?;
                Ok((k.trim().to_string(), number("z0", v)?))
            })
            .collect::<Result<_, CliError>>()?;
        let floor_tau = number("floor_tau", &req("floor_tau")?)?;
        let workers = get("workers").map(|v| count("workers", &v)).transpose()?;
        if workers == Some(0) {
            return Err(bad("workers", "must be positive"));
        }

        let sim_group = |prefix: &str, fallback: Option<&SimGroup>| -> Result<SimGroup, CliError> {
            let key = |k: &str| format!("{prefix}_{k}");
            let val = |k: &str| get(&key(k));
            let num = |k: &str, fb: Option<f64>| -> Result<f64, CliError> {
                match val(k) {
                    Some(v) => number(&key(k), &v),
                    None => fb.ok_or_else(|| bad(&key(k), "required")),
                }
            };
            let vec = |k: &str, fb: Option<&Vec<f64>>| -> Result<Vec<f64>, CliError> {
                match val(k) {
                    Some(v) => numbers(&key(k), &v),
                    None => fb.cloned().ok_or_else(|| bad(&key(k), "required")),
                }
            };
            Ok(SimGroup {
                n: match val("n") {
                    Some(v) => count(&key("n"), &v)?,
                    None => fallback.map(|f| f.n).ok_or_else(|| bad(&key("n"), "required"))?,
                },
                nu: vec("nu", fallback.map(|f| &f.nu))?,
                mu: vec("mu", fallback.map(|f| &f.mu))?,
                sigma_u: num("sigma_u", fallback.map(|f| f.sigma_u))?,
                sigma_v: num("sigma_v", fallback.map(|f| f.sigma_v))?,
                rho: num("rho", fallback.map(|f| f.rho))?,
            })
        };
        let g0 = sim_group("sim", None)?;
        let sim = match count("sim_groups", &req("sim_groups")?)? {
            1 => vec![g0],
            2 => {
                let g1 = sim_group("sim1", Some(&g0))?;
                vec![g0, g1]
            }
            _ => return Err(bad("sim_groups", "must be 1 or 2")),
        };

        Ok(Self {
            input: get("input").map(path),
            output: path(req("output")?),
            selection: req("selection")?,
            outcome: req("outcome")?,
            covariates: names(&req("covariates")?),
            instruments: names(&req("instruments")?),
            intercept: flag("intercept", &req("intercept")?)?,
            group: get("group"),
            group1: req("group1")?,
            group0: req("group0")?,
            censoring_point: number("censoring_point", &req("censoring_point")?)?,
            lower_censored: flag("lower_censored", &req("lower_censored")?)?,
            s_points,
            y_grid,
            rho0: names(&req("rho0")?),
            rho: names(&req("rho")?),
            z0,
            floor_tau,
            bootstrap: count("bootstrap", &req("bootstrap")?)?,
            level,
            seed: req("seed")?.trim().parse().map_err(|_| bad("seed", "not an unsigned integer"))?,
            workers,
            taus,
            stratum: (lo, hi),
            ordering,
            sim,
            entries,
        })
    }

    /// Names of the covariate vector `z` in column order.
    pub fn z_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.intercept {
            out.push(INTERCEPT.to_string());
        }
        out.extend(self.covariates.iter().cloned());
        out.extend(self.instruments.iter().cloned());
        out
    }

    /// Positions in `z` of the outcome covariates.
    pub fn x_cols(&self) -> Vec<usize> {
        (0..usize::from(self.intercept) + self.covariates.len()).collect()
    }

    pub fn z_index(&self, key: &str, name: &str) -> Result<usize, CliError> {
        self.z_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| bad(key, format!("'{name}' is not a covariate")))
    }

    /// Representative covariate row for g-scale sorting bands: intercept 1,
    /// named entries as given, everything else 0.
    pub fn z0_row(&self) -> Result<Vec<f64>, CliError> {
        let mut row = vec![0.0; self.z_names().len()];
        if self.intercept {
            row[0] = 1.0;
        }
        for (name, v) in &self.z0 {
            row[self.z_index("z0", name)?] = *v;
        }
        Ok(row)
    }
}
