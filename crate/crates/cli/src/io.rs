//! CSV ingestion and artifact writing.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use hetsae::models::{AreaDataset, PopulationTable, ResponseScale, UnitDataset};
use hetsae::spatial::{parse_adjacency, AdjacencyGraph};
use nalgebra::{DMatrix, DVector};

use crate::CliError;

/// 17 significant digits: every finite `f64` survives a write/read cycle.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

/// A parsed CSV: header plus string records, with row numbers counted from
/// the first data line as 2.
pub struct Table {
    path: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let name = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::validation(format!("{name}: {e}")))?;
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| CliError::validation(format!("{name}: {e}")))?
            .iter()
            .map(String::from)
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| CliError::validation(format!("{name}: row {}: {e}", i + 2)))?;
            rows.push(rec.iter().map(String::from).collect());
        }
        if rows.is_empty() {
            return Err(CliError::validation(format!("{name}: no data rows")));
        }
        Ok(Self { path: name, header, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize, CliError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::validation(format!("{}: missing column {name:?}", self.path)))
    }

    fn err(&self, row: usize, col: usize, msg: impl std::fmt::Display) -> CliError {
        CliError::validation(format!("{}: row {}, column {:?}: {msg}", self.path, row + 2, self.header[col]))
    }

    pub fn f64_at(&self, row: usize, col: usize) -> Result<f64, CliError> {
        let s = &self.rows[row][col];
        let v: f64 = s.parse().map_err(|_| self.err(row, col, format!("not a number: {s:?}")))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(row, col, "value must be finite"))
        }
    }

    pub fn usize_at(&self, row: usize, col: usize) -> Result<usize, CliError> {
        let s = &self.rows[row][col];
        s.parse().map_err(|_| self.err(row, col, format!("not a nonnegative integer: {s:?}")))
    }

    pub fn str_at(&self, row: usize, col: usize) -> &str {
        &self.rows[row][col]
    }

    /// Columns not listed in `reserved`, in file order.
    pub fn covariate_columns(&self, reserved: &[&str]) -> Vec<usize> {
        (0..self.header.len()).filter(|&j| !reserved.contains(&self.header[j].as_str())).collect()
    }

    fn covariates(&self, cols: &[usize]) -> Result<DMatrix<f64>, CliError> {
        let mut x = DMatrix::zeros(self.rows.len(), cols.len());
        for r in 0..self.rows.len() {
            for (c, &j) in cols.iter().enumerate() {
                x[(r, c)] = self.f64_at(r, j)?;
            }
        }
        Ok(x)
    }
}

/// Prepends an intercept unless some column is already all ones.
pub fn with_intercept(x: DMatrix<f64>) -> DMatrix<f64> {
    let has = (0..x.ncols()).any(|j| x.column(j).iter().all(|&v| v == 1.0));
    if has {
        x
    } else {
        x.insert_column(0, 1.0)
    }
}

pub const AREA_COLUMNS: [&str; 4] = ["area_id", "direct_mean", "direct_var", "n_samp"];
pub const UNIT_COLUMNS: [&str; 3] = ["area_id", "y", "w"];

/// Area CSV: `area_id, direct_mean, direct_var, n_samp`, then covariates.
pub fn read_area_dataset(path: &Path) -> Result<AreaDataset, CliError> {
    let t = Table::read(path)?;
    let cols: Vec<usize> = AREA_COLUMNS.iter().map(|c| t.column(c)).collect::<Result<_, _>>()?;
    let n = t.rows.len();
    let mut ids = Vec::with_capacity(n);
    let (mut mean, mut var, mut n_samp) = (Vec::new(), Vec::new(), Vec::new());
    for r in 0..n {
        ids.push(t.str_at(r, cols[0]).to_string());
        let m = t.f64_at(r, cols[1])?;
        if m <= 0.0 {
            return Err(t.err(r, cols[1], "direct mean must be positive"));
        }
        let v = t.f64_at(r, cols[2])?;
        if v < 0.0 {
            return Err(t.err(r, cols[2], "direct variance must be nonnegative"));
        }
        let k = t.usize_at(r, cols[3])?;
        if k < 2 {
            return Err(t.err(r, cols[3], "needs at least 2 sampled units"));
        }
        mean.push(m);
        var.push(v);
        n_samp.push(k);
    }
    check_unique(&ids, &t.path)?;
    let x = with_intercept(t.covariates(&t.covariate_columns(&AREA_COLUMNS))?);
    let prepared = hetsae::models::prepare_area_inputs(&mean, &var, &n_samp).map_err(CliError::from_core_validation)?;
    AreaDataset::new(ids, prepared.y, prepared.s2, prepared.n_samp, x).map_err(CliError::from_core_validation)
}

fn check_unique(ids: &[String], path: &str) -> Result<(), CliError> {
    let mut seen = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        if let Some(first) = seen.insert(id, i) {
            return Err(CliError::validation(format!(
                "{path}: area_id {id:?} repeated on rows {} and {}",
                first + 2,
                i + 2
            )));
        }
    }
    Ok(())
}

/// Unit CSV (`area_id, y, w`, covariates) plus population CSV
/// (`area_id`, the same covariates). Areas are numbered in order of first
/// appearance in the population.
pub fn read_unit_dataset(
    units: &Path,
    population: &Path,
    response_scale: ResponseScale,
) -> Result<UnitDataset, CliError> {
    let u = Table::read(units)?;
    let p = Table::read(population)?;
    let ucols: Vec<usize> = UNIT_COLUMNS.iter().map(|c| u.column(c)).collect::<Result<_, _>>()?;
    let cov_u = u.covariate_columns(&UNIT_COLUMNS);
    let names: Vec<&str> = cov_u.iter().map(|&j| u.header[j].as_str()).collect();
    let pid = p.column("area_id")?;
    let cov_p: Vec<usize> = names.iter().map(|n| p.column(n)).collect::<Result<_, _>>()?;

    let mut area_ids: Vec<String> = Vec::new();
    let mut lookup: HashMap<String, usize> = HashMap::new();
    let mut pop_index = Vec::with_capacity(p.rows.len());
    for r in 0..p.rows.len() {
        let id = p.str_at(r, pid).to_string();
        let next = area_ids.len();
        let k = *lookup.entry(id.clone()).or_insert_with(|| {
            area_ids.push(id);
            next
        });
        pop_index.push(k);
    }

    let n = u.rows.len();
    let mut y = DVector::zeros(n);
    let mut w = Vec::with_capacity(n);
    let mut area_index = Vec::with_capacity(n);
    for r in 0..n {
        let id = u.str_at(r, ucols[0]);
        let k = *lookup
            .get(id)
            .ok_or_else(|| u.err(r, ucols[0], format!("area {id:?} not present in the population file")))?;
        area_index.push(k);
        let v = u.f64_at(r, ucols[1])?;
        y[r] = match response_scale {
            ResponseScale::Log if v <= 0.0 => return Err(u.err(r, ucols[1], "response must be positive on the log scale")),
            ResponseScale::Log => v.ln(),
            ResponseScale::Identity => v,
        };
        let wt = u.f64_at(r, ucols[2])?;
        if wt <= 0.0 {
            return Err(u.err(r, ucols[2], "weight must be positive"));
        }
        w.push(wt);
    }
    let x_units = u.covariates(&cov_u)?;
    let x_pop = p.covariates(&cov_p)?;
    // Decide on the intercept from the population so both matrices agree.
    let add = !(0..x_pop.ncols()).any(|j| x_pop.column(j).iter().all(|&v| v == 1.0));
    let (x_units, x_pop) = if add {
        (x_units.insert_column(0, 1.0), x_pop.insert_column(0, 1.0))
    } else {
        (x_units, x_pop)
    };
    UnitDataset::new(
        y,
        x_units,
        area_index,
        &w,
        area_ids,
        PopulationTable { x: x_pop, area_index: pop_index },
        response_scale,
    )
    .map_err(CliError::from_core_validation)
}

pub fn read_adjacency(path: &Path, expected_areas: Option<usize>) -> Result<AdjacencyGraph, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    let g = parse_adjacency(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    if let Some(d) = expected_areas {
        if g.n_areas() != d {
            return Err(CliError::validation(format!(
                "{}: graph has {} areas but the data has {d}",
                path.display(),
                g.n_areas()
            )));
        }
    }
    Ok(g)
}

pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| CliError::runtime(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, -1.0 / 3.0, 1e-300, 12345.678901234567, f64::MIN_POSITIVE, 2.0f64.sqrt()] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(f64::NAN), "NaN");
    }

    #[test]
    fn intercept_added_once() {
        let x = DMatrix::from_row_slice(2, 1, &[0.5, 2.0]);
        let x = with_intercept(x);
        assert_eq!(x.ncols(), 2);
        assert_eq!(with_intercept(x).ncols(), 2);
    }
}
