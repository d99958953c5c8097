//! CSV files for trajectories, queries and references.
//!
//! A trajectory file has the header `t,u1..u{n_u},y1..y{n_y}` and one row per
//! sample. Values are written with the shortest representation that parses
//! back to the same `f64`. Query files use the same layout but may leave the
//! output cells of trailing rows empty.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hankel::TrajectoryData;

fn header(n_u: usize, n_y: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=n_u).map(|i| format!("u{i}")));
    h.extend((1..=n_y).map(|i| format!("y{i}")));
    h
}

pub fn write_trajectory<W: Write>(data: &TrajectoryData, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(data.n_u(), data.n_y()))?;
    for i in 0..data.len() {
        let mut rec = vec![(i as f64 * data.dt()).to_string()];
        rec.extend(data.u(i).iter().chain(data.y(i)).map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trajectory(data: &TrajectoryData, path: &Path) -> Result<()> {
    write_trajectory(data, File::create(path)?)
}

/// Rows of a trajectory or query file. Output cells may be missing.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTable {
    pub n_u: usize,
    pub n_y: usize,
    pub t: Vec<f64>,
    /// `rows · n_u` inputs, sample-major.
    pub u: Vec<f64>,
    /// Outputs per row; `None` when the row's output cells are empty.
    pub y: Vec<Option<Vec<f64>>>,
}

impl SampleTable {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Outputs of rows `range`, if all of them are present.
    pub fn outputs(&self, range: std::ops::Range<usize>) -> Option<Vec<f64>> {
        let mut out = Vec::with_capacity(range.len() * self.n_y);
        for row in &self.y[range] {
            out.extend_from_slice(row.as_ref()?);
        }
        Some(out)
    }

    pub fn into_trajectory(self, dt: f64) -> Result<TrajectoryData> {
        let n = self.len();
        let y = self.outputs(0..n).ok_or_else(|| Error::Config("trajectory file has empty output cells".into()))?;
        TrajectoryData::from_flat(self.u, y, self.n_u, self.n_y, dt)
    }
}

fn parse_cell(s: &str, row: usize, col: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Config(format!("row {row}, column {col}: '{s}' is not a finite number")))
}

pub fn read_table<R: Read>(input: R) -> Result<SampleTable> {
    let mut r = csv::Reader::from_reader(input);
    let names: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let n_u = names.iter().filter(|n| n.starts_with('u')).count();
    let n_y = names.iter().filter(|n| n.starts_with('y')).count();
    if n_u == 0 || n_y == 0 || names != header(n_u, n_y) {
        return Err(Error::Config(format!("header must be t,u1..,y1.., got {}", names.join(","))));
    }
    let mut table = SampleTable { n_u, n_y, t: Vec::new(), u: Vec::new(), y: Vec::new() };
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != names.len() {
            return Err(Error::Config(format!("row {row} has {} cells, expected {}", rec.len(), names.len())));
        }
        table.t.push(parse_cell(&rec[0], row, "t")?);
        for c in 1..=n_u {
            table.u.push(parse_cell(&rec[c], row, &names[c])?);
        }
        let ys: Vec<&str> = (1 + n_u..names.len()).map(|c| rec[c].trim()).collect();
        if ys.iter().all(|s| s.is_empty()) {
            table.y.push(None);
        } else {
            let vals = ys
                .iter()
                .enumerate()
                .map(|(k, s)| parse_cell(s, row, &names[1 + n_u + k]))
                .collect::<Result<Vec<f64>>>()?;
            table.y.push(Some(vals));
        }
    }
    if table.is_empty() {
        return Err(Error::Config("file has no data rows".into()));
    }
    Ok(table)
}

pub fn load_table(path: &Path) -> Result<SampleTable> {
    read_table(File::open(path)?)
}

pub fn load_trajectory(path: &Path, dt: f64) -> Result<TrajectoryData> {
    load_table(path)?.into_trajectory(dt)
}

/// Reference file: header `yref1..yref{n_y}`, one row per sample. Returns the
/// samples flattened and the output dimension.
pub fn load_reference(path: &Path) -> Result<(Vec<f64>, usize)> {
    let mut r = csv::Reader::from_reader(File::open(path)?);
    let names: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let n_y = names.len();
    if n_y == 0 || names.iter().enumerate().any(|(i, n)| *n != format!("yref{}", i + 1)) {
        return Err(Error::Config(format!("reference header must be yref1.., got {}", names.join(","))));
    }
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        for (c, name) in names.iter().enumerate() {
            out.push(parse_cell(rec.get(c).unwrap_or(""), row, name)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("reference file has no rows".into()));
    }
    Ok((out, n_y))
}
