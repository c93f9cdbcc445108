//! CSV input: one row per observation with the selection value, the outcome
//! (empty when not observed), covariate columns and an optional group label.

use std::io::{Read, Write};
use std::path::Path;

use cdr_core::likelihood::ObservationTable;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone)]
pub struct Ingested {
    pub table: ObservationTable,
    /// Group label per row when a group column is configured.
    pub labels: Option<Vec<String>>,
    /// Rows at the censoring point whose outcome cell was filled in; the
    /// value is discarded.
    pub filled_at_censoring: usize,
}

pub fn ingest(path: &Path, config: &RunConfig) -> Result<Ingested, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::data(None, format!("cannot open {}: {e}", path.display())))?;
    ingest_reader(file, config)
}

pub fn ingest_reader<R: Read>(reader: R, config: &RunConfig) -> Result<Ingested, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| CliError::data(Some(1), e.to_string()))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::data(Some(1), format!("missing column '{name}'")))
    };
    let s_col = col(&config.selection)?;
    let y_col = col(&config.outcome)?;
    let z_cols: Vec<Option<usize>> = config
        .z_names()
        .iter()
        .enumerate()
        .map(|(j, name)| if config.intercept && j == 0 { Ok(None) } else { col(name).map(Some) })
        .collect::<Result<_, _>>()?;
    let g_col = config.group.as_deref().map(col).transpose()?;

    let (mut s, mut y, mut z) = (Vec::new(), Vec::new(), Vec::new());
    let mut labels = g_col.map(|_| Vec::new());
    let mut filled = 0;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| CliError::data(Some(line), e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let num = |c: usize| -> Result<f64, CliError> {
            let v = field(c);
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| CliError::data(Some(line), format!("column '{}': '{v}' is not a finite number", &header[c])))
        };
        let raw = num(s_col)?;
        let sv = if config.lower_censored { config.censoring_point - raw } else { raw - config.censoring_point };
        if sv < 0.0 {
            return Err(CliError::data(Some(line), format!("selection value {raw} lies beyond the censoring point")));
        }
        let yv = if field(y_col).is_empty() { None } else { Some(num(y_col)?) };
        match (sv > 0.0, yv) {
            (true, None) => {
                return Err(CliError::data(Some(line), "outcome missing for a row above the censoring point"));
            }
            (false, Some(_)) => {
                filled += 1;
                y.push(None);
            }
            (_, v) => y.push(v),
        }
        s.push(sv);
        for c in &z_cols {
            z.push(match c {
                None => 1.0,
                Some(c) => num(*c)?,
            });
        }
        if let (Some(l), Some(c)) = (labels.as_mut(), g_col) {
            l.push(field(c).to_string());
        }
    }
    let d_z = z_cols.len();
    let table = ObservationTable::new(s, y, z, d_z, config.x_cols())
        .map_err(|e| CliError::data(None, e.to_string()))?;
    Ok(Ingested { table, labels, filled_at_censoring: filled })
}

/// Rows of the two configured groups, `(group 1, group 0)`.
pub fn split_groups(ing: &Ingested, config: &RunConfig) -> Result<(ObservationTable, ObservationTable), CliError> {
    let labels = ing
        .labels
        .as_ref()
        .ok_or_else(|| CliError::Config("group: a group column is required for decompositions".into()))?;
    let pick = |label: &str| -> Result<ObservationTable, CliError> {
        let rows: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| *l == label).map(|(i, _)| i).collect();
        if rows.is_empty() {
            return Err(CliError::data(None, format!("no rows with group label '{label}'")));
        }
        Ok(ing.table.subset(&rows))
    };
    Ok((pick(&config.group1)?, pick(&config.group0)?))
}

/// Writes a table in the input schema (`s`, `y`, then the named covariate
/// columns without the intercept, then `group` when labels are given).
pub fn write_table<W: Write>(
    out: W,
    table: &ObservationTable,
    z_names: &[String],
    intercept: Option<usize>,
    labels: Option<&[String]>,
) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Output(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    let keep: Vec<usize> = (0..table.d_z()).filter(|&c| Some(c) != intercept).collect();
    let mut head = vec!["s".to_string(), "y".to_string()];
    head.extend(keep.iter().map(|&c| z_names[c].clone()));
    if labels.is_some() {
        head.push("group".into());
    }
    w.write_record(&head).map_err(io)?;
    for i in 0..table.n() {
        let mut rec = vec![table.s()[i].to_string(), table.y()[i].map(|v| v.to_string()).unwrap_or_default()];
        rec.extend(keep.iter().map(|&c| table.z_row(i)[c].to_string()));
        if let Some(l) = labels {
            rec.push(l[i].clone());
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Output(e.to_string()))
}
