//! CSV and JSON serialization of paths. Both formats round-trip bit-exactly.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{CadlagPath, Path, TimePath};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Continuous,
    Cadlag,
}

/// JSON form of a path: `{grid, values, kind, horizon, t_end}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub kind: PathKind,
    pub grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub horizon: f64,
    pub t_end: f64,
}

fn rows<P: TimePath>(p: &P) -> Vec<Vec<f64>> {
    (0..p.len()).map(|i| p.point(i).to_vec()).collect()
}

impl From<&Path> for PathRecord {
    fn from(p: &Path) -> Self {
        Self {
            kind: PathKind::Continuous,
            grid: p.grid().to_vec(),
            values: rows(p),
            horizon: p.horizon(),
            t_end: p.t_end(),
        }
    }
}

impl From<&CadlagPath> for PathRecord {
    fn from(p: &CadlagPath) -> Self {
        Self {
            kind: PathKind::Cadlag,
            grid: p.grid().to_vec(),
            values: rows(p),
            horizon: p.horizon(),
            t_end: p.t_end(),
        }
    }
}

impl PathRecord {
    pub fn into_path(self) -> Result<Path> {
        if self.kind != PathKind::Continuous {
            return Err(Error::invalid("expected a continuous path record"));
        }
        Path::from_points(self.grid, &self.values, self.horizon)
    }

    pub fn into_cadlag(self) -> Result<CadlagPath> {
        if self.kind != PathKind::Cadlag {
            return Err(Error::invalid("expected a cadlag path record"));
        }
        CadlagPath::from_points(self.grid, &self.values, self.t_end, self.horizon)
    }
}

pub fn path_to_json(p: &Path) -> Result<String> {
    Ok(serde_json::to_string(&PathRecord::from(p))?)
}

pub fn path_from_json(s: &str) -> Result<Path> {
    serde_json::from_str::<PathRecord>(s)?.into_path()
}

pub fn cadlag_to_json(p: &CadlagPath) -> Result<String> {
    Ok(serde_json::to_string(&PathRecord::from(p))?)
}

pub fn cadlag_from_json(s: &str) -> Result<CadlagPath> {
    serde_json::from_str::<PathRecord>(s)?.into_cadlag()
}

/// Writes `time, v0, .., v{n-1}` rows with a header.
pub fn write_csv<P: TimePath, W: Write>(p: &P, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["time".to_string()];
    header.extend((0..p.dim()).map(|k| format!("v{k}")));
    w.write_record(&header)?;
    for i in 0..p.len() {
        let mut row = vec![p.grid()[i].to_string()];
        row.extend(p.point(i).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<R: Read>(input: R) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let mut r = csv::Reader::from_reader(input);
    let dim = r
        .headers()?
        .len()
        .checked_sub(1)
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::invalid("path CSV needs a time column and at least one value column"))?;
    let mut grid = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut fields = rec.iter().map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("bad number {f:?} in path CSV: {e}")))
        });
        grid.push(fields.next().transpose()?.unwrap_or(f64::NAN));
        for v in fields {
            values.push(v?);
        }
    }
    Ok((grid, values, dim))
}

pub fn read_path_csv<R: Read>(input: R, horizon: f64) -> Result<Path> {
    let (grid, values, dim) = read_rows(input)?;
    Path::new(grid, values, dim, horizon)
}

pub fn read_cadlag_csv<R: Read>(input: R, t_end: f64, horizon: f64) -> Result<CadlagPath> {
    let (grid, values, dim) = read_rows(input)?;
    CadlagPath::new(grid, values, dim, t_end, horizon)
}
