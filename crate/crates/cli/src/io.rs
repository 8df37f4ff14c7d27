//! CSV ingestion and artifact writing.
//!
//! Inputs: `grid.csv` has a header (`dim1[,dim2]`) and one row per location;
//! `X.csv` has a header of covariate names and one row per subject; `Y.csv`
//! is either a headerless `n x m` matrix or, in the long layout, records
//! `subject,s[,s2],y` under a header. Outputs use LF line endings and the
//! shortest round-trip decimal form of every number.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use sqr_core::kernels::{Design, Grid};
use sqr_core::sqr::Dataset;

use crate::error::{CliError, Result};

/// Response layout of `Y.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Wide,
    Long,
}

impl Layout {
    pub fn parse(v: &str) -> Result<Self> {
        match v {
            "wide" => Ok(Layout::Wide),
            "long" => Ok(Layout::Long),
            _ => Err(CliError::Input(format!("layout must be 'wide' or 'long', got '{v}'"))),
        }
    }
}

fn parse_err(path: &Path, message: String) -> CliError {
    CliError::Parse { path: path.to_path_buf(), message }
}

fn reader(path: &Path, has_header: bool) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })?;
    Ok(csv::ReaderBuilder::new().has_headers(has_header).flexible(true).trim(csv::Trim::All).from_reader(file))
}

/// Rows of numbers; `line` in messages counts the header when present.
fn numeric_rows(path: &Path, has_header: bool) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = reader(path, has_header)?;
    let header: Vec<String> = if has_header {
        rdr.headers().map_err(|e| parse_err(path, format!("line 1: {e}")))?.iter().map(str::to_string).collect()
    } else {
        Vec::new()
    };
    let offset = if has_header { 2 } else { 1 };
    let mut rows = Vec::new();
    let mut width = if has_header { Some(header.len()) } else { None };
    for (r, rec) in rdr.records().enumerate() {
        let line = r + offset;
        let rec = rec.map_err(|e| parse_err(path, format!("line {line}: {e}")))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        match width {
            Some(w) if w != rec.len() => {
                return Err(parse_err(path, format!("line {line}: expected {w} fields, found {}", rec.len())))
            }
            None => width = Some(rec.len()),
            _ => {}
        }
        let mut row = Vec::with_capacity(rec.len());
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(path, format!("line {line}, column {}: '{field}' is not a number", c + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(path, format!("line {line}, column {}: non-finite value '{field}'", c + 1)));
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, "no data rows".into()));
    }
    Ok((header, rows))
}

pub fn read_grid(path: &Path, design: Design) -> Result<Grid> {
    let (header, rows) = numeric_rows(path, true)?;
    let dim = header.len();
    if !(dim == 1 || dim == 2) {
        return Err(parse_err(path, format!("line 1: expected 1 or 2 coordinate columns, found {dim}")));
    }
    if rows.len() < 2 {
        return Err(parse_err(path, "a grid needs at least 2 points".into()));
    }
    Ok(Grid::new(dim, rows.concat(), design)?)
}

pub fn read_covariates(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let (header, rows) = numeric_rows(path, true)?;
    let p = header.len();
    Ok((header, DMatrix::from_fn(rows.len(), p, |i, k| rows[i][k])))
}

pub fn read_wide_response(path: &Path) -> Result<DMatrix<f64>> {
    let (_, rows) = numeric_rows(path, false)?;
    let m = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j]))
}

/// Long-layout records `(subject, location index, y)`; every location must
/// match a grid point exactly.
pub fn read_long_response(path: &Path, grid: &Grid, n: usize) -> Result<Vec<(usize, usize, f64)>> {
    let (header, rows) = numeric_rows(path, true)?;
    let dim = grid.dim();
    if header.len() != dim + 2 {
        return Err(parse_err(path, format!("line 1: expected subject, {dim} coordinate column(s) and y")));
    }
    let mut out = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let line = r + 2;
        let subj = row[0];
        if subj < 0.0 || subj.fract() != 0.0 || subj as usize >= n {
            return Err(parse_err(path, format!("line {line}, column 1: subject '{subj}' is not a row index of X")));
        }
        let s = &row[1..1 + dim];
        let loc = (0..grid.len())
            .find(|&l| grid.point(l) == s)
            .ok_or_else(|| parse_err(path, format!("line {line}: location {s:?} is not in the grid")))?;
        out.push((subj as usize, loc, row[dim + 1]));
    }
    Ok(out)
}

pub fn load_dataset(x_path: &Path, y_path: &Path, grid_path: &Path, layout: Layout) -> Result<(Vec<String>, Dataset)> {
    let (names, x) = read_covariates(x_path)?;
    let data = match layout {
        Layout::Wide => {
            let grid = read_grid(grid_path, Design::Fixed)?;
            let y = read_wide_response(y_path)?;
            if y.ncols() != grid.len() {
                return Err(parse_err(y_path, format!("{} columns but the grid has {} points", y.ncols(), grid.len())));
            }
            if y.nrows() != x.nrows() {
                return Err(parse_err(y_path, format!("{} rows but X has {}", y.nrows(), x.nrows())));
            }
            Dataset::fixed(x, &y, grid)?
        }
        Layout::Long => {
            let grid = read_grid(grid_path, Design::Random)?;
            let records = read_long_response(y_path, &grid, x.nrows())?;
            Dataset::random(x, grid, &records)?
        }
    };
    Ok((names, data))
}

pub fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// A CSV body with an optional header row.
pub fn csv_text(header: Option<&[String]>, rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).flexible(true).from_writer(Vec::new());
    if let Some(h) = header {
        w.write_record(h).expect("in-memory write");
    }
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

pub fn matrix_csv(header: Option<&[String]>, m: &DMatrix<f64>) -> String {
    csv_text(header, (0..m.nrows()).map(|i| m.row(i).iter().map(|v| fmt(*v)).collect()))
}

pub fn grid_csv(grid: &Grid) -> String {
    let header: Vec<String> = (1..=grid.dim()).map(|d| format!("dim{d}")).collect();
    csv_text(Some(&header), grid.points().map(|p| p.iter().map(|v| fmt(*v)).collect()))
}

/// Output directory whose files are written with a `.partial` suffix and
/// renamed only by [`Artifacts::commit`].
#[derive(Debug)]
pub struct Artifacts {
    dir: PathBuf,
    names: Vec<String>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|source| CliError::Write { path: dir.to_path_buf(), source })?;
        Ok(Artifacts { dir: dir.to_path_buf(), names: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let final_path = self.dir.join(name);
        if final_path.exists() {
            fs::remove_file(&final_path).map_err(|source| CliError::Write { path: final_path.clone(), source })?;
        }
        let partial = self.dir.join(format!("{name}.partial"));
        fs::write(&partial, contents).map_err(|source| CliError::Write { path: partial, source })?;
        self.names.push(name.to_string());
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &serde_json::Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
        text.push('\n');
        self.write(name, &text)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn commit(self) -> Result<()> {
        for name in &self.names {
            let from = self.dir.join(format!("{name}.partial"));
            let to = self.dir.join(name);
            fs::rename(&from, &to).map_err(|source| CliError::Write { path: to, source })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wide_csv_round_trips_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -2.5e-12, 3.0, 1e300, 0.0, -7.25]);
        let text = matrix_csv(None, &m);
        let path = dir.path().join("y.csv");
        fs::write(&path, &text).unwrap();
        let back = read_wide_response(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(matrix_csv(None, &back), text);
    }

    #[test]
    fn malformed_values_name_line_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.csv");
        fs::write(&path, "1,2\n3,NaN\n").unwrap();
        let msg = read_wide_response(&path).unwrap_err().to_string();
        assert!(msg.contains("line 2, column 2"), "{msg}");
        fs::write(&path, "1,2\n3\n").unwrap();
        let msg = read_wide_response(&path).unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn long_layout_maps_locations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.csv");
        fs::write(&path, "subject,s,y\n0,0.5,1.5\n1,0,2\n").unwrap();
        let grid = Grid::from_1d(&[0.0, 0.5]).unwrap();
        assert_eq!(read_long_response(&path, &grid, 2).unwrap(), vec![(0, 1, 1.5), (1, 0, 2.0)]);
        fs::write(&path, "subject,s,y\n0,0.25,1.5\n").unwrap();
        assert!(read_long_response(&path, &grid, 2).is_err());
    }

    #[test]
    fn partial_files_are_renamed_on_commit() {
        let dir = tempfile::tempdir().unwrap();
        let mut art = Artifacts::new(dir.path()).unwrap();
        art.write("a.csv", "1\n").unwrap();
        assert!(dir.path().join("a.csv.partial").exists());
        art.commit().unwrap();
        assert!(dir.path().join("a.csv").exists());
        assert!(!dir.path().join("a.csv.partial").exists());
    }
}
