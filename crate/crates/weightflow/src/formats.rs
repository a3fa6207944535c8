//! On-disk encodings: density grids as CSV, matrices as little-endian
//! binaries, row updates and solver steps as JSON lines.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use weightflow_core::drift::RowUpdateSample;
use weightflow_core::{Density, Grid2D};

use crate::error::{Error, Result};

/// Density grid as text: a header line, then one `i,j,value` row per cell.
pub fn density_to_csv(d: &Density) -> String {
    let g = d.grid();
    let mut s = String::with_capacity(32 * g.len());
    writeln!(
        s,
        "# grid {:e} {:e} {:e} {:e} {} {} {:e}",
        g.x_min(),
        g.x_max(),
        g.y_min(),
        g.y_max(),
        g.nx(),
        g.ny(),
        d.time
    )
    .unwrap();
    for i in 0..g.nx() {
        for j in 0..g.ny() {
            writeln!(s, "{i},{j},{:e}", d.value(i, j)).unwrap();
        }
    }
    s
}

fn num<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::parse(path, format!("not a number: {s:?}")))
}

pub fn density_from_csv(path: &Path, text: &str) -> Result<Density> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(path, "empty file"))?;
    let fields: Vec<&str> = header
        .strip_prefix("# grid ")
        .ok_or_else(|| Error::parse(path, "missing grid header"))?
        .split_whitespace()
        .collect();
    if fields.len() != 7 {
        return Err(Error::parse(path, "grid header needs 7 fields"));
    }
    let grid = Grid2D::new(
        num(path, fields[0])?,
        num(path, fields[1])?,
        num(path, fields[2])?,
        num(path, fields[3])?,
        num(path, fields[4])?,
        num(path, fields[5])?,
    )?;
    let time: f64 = num(path, fields[6])?;
    let mut values = vec![f64::NAN; grid.len()];
    let mut seen = 0;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split(',');
        let (Some(i), Some(j), Some(v), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(path, format!("bad row {line:?}")));
        };
        let (i, j): (usize, usize) = (num(path, i)?, num(path, j)?);
        if i >= grid.nx() || j >= grid.ny() {
            return Err(Error::parse(path, format!("cell ({i}, {j}) outside the grid")));
        }
        values[grid.index(i, j)] = num(path, v)?;
        seen += 1;
    }
    if seen != grid.len() || values.iter().any(|v| v.is_nan()) {
        return Err(Error::parse(path, "density rows do not cover the grid"));
    }
    Ok(Density::new(grid, values, time)?)
}

/// Row-major matrix with an 8-byte header of two little-endian u32 dims.
pub fn matrix_to_bytes(rows: usize, cols: usize, data: &[f64]) -> Vec<u8> {
    assert_eq!(rows * cols, data.len(), "matrix shape does not match its data");
    let mut out = Vec::with_capacity(8 + 8 * data.len());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn matrix_from_bytes(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 8 {
        return Err(Error::parse(path, "truncated matrix header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != rows * cols * 8 {
        return Err(Error::parse(path, format!("expected {rows}x{cols} values, found {} bytes", body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((rows, cols, data))
}

/// One line of the row-update log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowUpdateRecord {
    /// The epoch during which the update happened (1-based).
    pub epoch: u32,
    pub layer: u32,
    pub row: usize,
    pub pos: [f64; 2],
    pub update: [f64; 2],
}

impl RowUpdateRecord {
    pub fn sample(&self) -> RowUpdateSample {
        RowUpdateSample { position: self.pos, update: self.update, epoch_time: f64::from(self.epoch - 1) }
    }
}

/// One explicit density step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverLogRecord {
    pub epoch: u32,
    pub layer: u32,
    pub step: u32,
    pub time: f64,
    pub mass_error: f64,
    pub max_density: f64,
    pub advective_cfl: f64,
    pub diffusive_cfl: f64,
    pub renormalized: bool,
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn from_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, format!("line {}: {e}", k + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_csv_round_trip_is_exact() {
        let g = Grid2D::new(-1.25, 3.0, 0.1, 0.7, 9, 8).unwrap();
        let d = Density::gaussian(g, [0.3, 0.4], [0.7, 0.01]).unwrap().with_time(2.5);
        let text = density_to_csv(&d);
        assert!(text.starts_with("# grid -1.25e0 3e0 1e-1 7e-1 9 8 2.5e0\n"));
        assert_eq!(text.lines().count(), 1 + 72);
        assert_eq!(density_from_csv(Path::new("d.csv"), &text).unwrap(), d);
    }

    #[test]
    fn density_csv_rejects_gaps() {
        let g = Grid2D::square(0.0, 1.0, 8).unwrap();
        let text = density_to_csv(&Density::uniform(g));
        let cut: String = text.lines().take(40).map(|l| format!("{l}\n")).collect();
        assert!(density_from_csv(Path::new("d.csv"), &cut).is_err());
        assert!(density_from_csv(Path::new("d.csv"), "0,0,1\n").is_err());
    }

    #[test]
    fn matrix_round_trip() {
        let data = vec![1.0, -2.5, 3.25e-300, f64::MAX, 0.0, -0.0];
        let b = matrix_to_bytes(3, 2, &data);
        assert_eq!(&b[..8], &[3, 0, 0, 0, 2, 0, 0, 0]);
        let (r, c, back) = matrix_from_bytes(Path::new("m"), &b).unwrap();
        assert_eq!((r, c), (3, 2));
        assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(matrix_from_bytes(Path::new("m"), &b[..20]).is_err());
    }

    #[test]
    fn row_updates_round_trip() {
        let recs = vec![
            RowUpdateRecord { epoch: 1, layer: 1, row: 0, pos: [0.1, -0.2], update: [1e-3, 2e-4] },
            RowUpdateRecord { epoch: 2, layer: 2, row: 1, pos: [3.0, 4.0], update: [0.0, -1e-9] },
        ];
        let text = to_jsonl(&recs);
        assert!(text.lines().next().unwrap().contains("\"pos\":[0.1,-0.2]"));
        assert_eq!(from_jsonl::<RowUpdateRecord>(Path::new("r"), &text).unwrap(), recs);
        assert_eq!(recs[1].sample().epoch_time, 1.0);
    }
}
