//! Offline datasets: CSV persistence, standardization, low-value subset
//! selection and normalized scoring.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Matrix, NumericsError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid fraction {0}: must lie in (0, 1]")]
    InvalidFraction(f64),
    #[error("degenerate score bounds: y_max {y_max} <= y_min {y_min}")]
    DegenerateBounds { y_min: f64, y_max: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<NumericsError> for DataError {
    fn from(e: NumericsError) -> Self {
        DataError::Shape(e.to_string())
    }
}

/// Designs `x` (one per row) with scalar outputs `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineDataset {
    pub x: Matrix,
    pub z: Vec<f64>,
    pub names: Vec<String>,
}

impl OfflineDataset {
    pub fn new(x: Matrix, z: Vec<f64>) -> Result<Self, DataError> {
        if x.rows() != z.len() {
            return Err(DataError::Shape(format!(
                "{} designs but {} outputs",
                x.rows(),
                z.len()
            )));
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Parse {
                row: i + 1,
                col: x.cols(),
                msg: "non-finite output".into(),
            });
        }
        let names = default_names(x.cols());
        Ok(Self { x, z, names })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> OfflineDataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut z = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.x.row(i));
            z.push(self.z[i]);
        }
        OfflineDataset {
            x: Matrix::from_vec(indices.len(), d, data).expect("rows come from a valid matrix"),
            z,
            names: self.names.clone(),
        }
    }

    pub fn max_z(&self) -> f64 {
        self.z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_z(&self) -> f64 {
        self.z.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn default_names(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("x{i}")).collect()
}

/// Reads a dataset CSV with header `x0,…,x{d-1},y`.
///
/// Data rows are numbered from 1 in error messages; columns from 0.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<OfflineDataset, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    read_dataset(file)
}

pub fn read_dataset<R: std::io::Read>(reader: R) -> Result<OfflineDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(DataError::Parse {
            row: 0,
            col: header.len(),
            msg: "need at least one input column and a `y` column".into(),
        });
    }
    let d = header.len() - 1;
    if header.get(d).map(str::trim) != Some("y") {
        return Err(DataError::Parse {
            row: 0,
            col: d,
            msg: "last column must be named `y`".into(),
        });
    }
    let names: Vec<String> = header.iter().take(d).map(|s| s.trim().to_string()).collect();
    let mut data = Vec::new();
    let mut z = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| DataError::Parse {
            row,
            col: 0,
            msg: e.to_string(),
        })?;
        if rec.len() != d + 1 {
            return Err(DataError::Parse {
                row,
                col: rec.len().min(d),
                msg: format!("expected {} fields, found {}", d + 1, rec.len()),
            });
        }
        for (col, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| DataError::Parse {
                row,
                col,
                msg: format!("`{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    row,
                    col,
                    msg: format!("non-finite value `{field}`"),
                });
            }
            if col < d {
                data.push(v);
            } else {
                z.push(v);
            }
        }
    }
    if z.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let x = Matrix::from_vec(z.len(), d, data)?;
    Ok(OfflineDataset { x, z, names })
}

pub fn save_dataset(ds: &OfflineDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(ds, &mut w).map_err(|e| DataError::io(path, e))?;
    w.flush().map_err(|e| DataError::io(path, e))
}

pub fn write_dataset<W: Write>(ds: &OfflineDataset, w: &mut W) -> std::io::Result<()> {
    let names = if ds.names.len() == ds.dim() {
        ds.names.clone()
    } else {
        default_names(ds.dim())
    };
    writeln!(w, "{},y", names.join(","))?;
    for (row, z) in ds.x.iter_rows().zip(&ds.z) {
        for v in row {
            write!(w, "{v},")?;
        }
        writeln!(w, "{z}")?;
    }
    Ok(())
}

/// Affine per-dimension standardization of inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub z_mean: f64,
    pub z_std: f64,
}

impl Scaler {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
            z_mean: 0.0,
            z_std: 1.0,
        }
    }

    pub fn fit(ds: &OfflineDataset) -> Result<Self, DataError> {
        if ds.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let n = ds.len() as f64;
        let d = ds.dim();
        let mut mean = vec![0.0; d];
        for row in ds.x.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in ds.x.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| positive_std(s / n)).collect();
        let z_mean = ds.z.iter().sum::<f64>() / n;
        let z_var = ds.z.iter().map(|z| (z - z_mean) * (z - z_mean)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std,
            z_mean,
            z_std: positive_std(z_var),
        })
    }

    pub fn transform_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn inverse_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }

    pub fn transform_z(&self, z: f64) -> f64 {
        (z - self.z_mean) / self.z_std
    }

    pub fn inverse_z(&self, z: f64) -> f64 {
        z * self.z_std + self.z_mean
    }

    pub fn transform(&self, ds: &OfflineDataset) -> OfflineDataset {
        map_dataset(ds, |r| self.transform_x(r), |z| self.transform_z(z))
    }

    pub fn inverse(&self, ds: &OfflineDataset) -> OfflineDataset {
        map_dataset(ds, |r| self.inverse_x(r), |z| self.inverse_z(z))
    }

    /// Converts a gradient taken in standardized units into raw units.
    pub fn gradient_to_raw(&self, grad: &[f64]) -> Vec<f64> {
        grad.iter()
            .zip(&self.std)
            .map(|(g, s)| g * self.z_std / s)
            .collect()
    }
}

// Zero-variance dimensions keep std = 1 so the transform stays invertible.
fn positive_std(var: f64) -> f64 {
    let s = var.sqrt();
    if s > 1e-12 {
        s
    } else {
        1.0
    }
}

fn map_dataset(
    ds: &OfflineDataset,
    fx: impl Fn(&[f64]) -> Vec<f64>,
    fz: impl Fn(f64) -> f64,
) -> OfflineDataset {
    let mut data = Vec::with_capacity(ds.x.data().len());
    for row in ds.x.iter_rows() {
        data.extend(fx(row));
    }
    OfflineDataset {
        x: Matrix::from_vec(ds.len(), ds.dim(), data).expect("shape preserved"),
        z: ds.z.iter().map(|&z| fz(z)).collect(),
        names: ds.names.clone(),
    }
}

/// Standardizes inputs and outputs to zero mean, unit population variance.
pub fn standardize(ds: &OfflineDataset) -> Result<(OfflineDataset, Scaler), DataError> {
    let scaler = Scaler::fit(ds)?;
    Ok((scaler.transform(ds), scaler))
}

/// The `max(⌈frac·n⌉, 2)` rows with the smallest outputs (stable on ties),
/// returned in their original order.
pub fn select_bottom_fraction(ds: &OfflineDataset, frac: f64) -> Result<OfflineDataset, DataError> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(DataError::InvalidFraction(frac));
    }
    if ds.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let n = ds.len();
    let k = ((frac * n as f64 - 1e-9).ceil() as usize).max(2).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ds.z[a].total_cmp(&ds.z[b]));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    Ok(ds.subset(&keep))
}

/// `(y - y_min) / (y_max - y_min)`, deliberately unclipped.
pub fn normalized_score(y: f64, y_min: f64, y_max: f64) -> Result<f64, DataError> {
    if !(y_max > y_min) {
        return Err(DataError::DegenerateBounds { y_min, y_max });
    }
    Ok((y - y_min) / (y_max - y_min))
}

/// One benchmark run's headline numbers, in the score-report CSV schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub method: String,
    pub benchmark: String,
    pub seed: u64,
    pub percentile100: f64,
    pub best_raw: f64,
    pub runtime_s: f64,
}

pub const SCORE_HEADER: &str = "method,benchmark,seed,percentile100,best_raw,runtime_s";

pub fn write_score_rows<W: Write>(rows: &[ScoreRow], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{SCORE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.method, r.benchmark, r.seed, r.percentile100, r.best_raw, r.runtime_s
        )?;
    }
    Ok(())
}

pub fn read_score_rows<R: std::io::Read>(reader: R) -> Result<Vec<ScoreRow>, DataError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(x: &[&[f64]], z: &[f64]) -> OfflineDataset {
        OfflineDataset::new(Matrix::from_rows(x).unwrap(), z.to_vec()).unwrap()
    }

    #[test]
    fn loads_well_formed_csv() {
        let text = "x0,x1,y\n1,2,3\n4,5,6\n7,8,9.5\n";
        let d = read_dataset(text.as_bytes()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.z, vec![3.0, 6.0, 9.5]);
        assert_eq!(d.x.row(1), &[4.0, 5.0]);
    }

    #[test]
    fn nan_reports_row() {
        let text = "x0,y\n1,2\nNaN,3\n";
        match read_dataset(text.as_bytes()) {
            Err(DataError::Parse { row, col, .. }) => assert_eq!((row, col), (2, 0)),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn inf_rejected() {
        let text = "x0,y\n1,inf\n";
        assert!(matches!(
            read_dataset(text.as_bytes()),
            Err(DataError::Parse { row: 1, col: 1, .. })
        ));
    }

    #[test]
    fn header_only_is_empty() {
        assert!(matches!(
            read_dataset("x0,x1,y\n".as_bytes()),
            Err(DataError::EmptyDataset)
        ));
    }

    #[test]
    fn standardize_hand_example() {
        let d = ds(&[&[0.0], &[2.0]], &[1.0, 3.0]);
        let (s, sc) = standardize(&d).unwrap();
        assert_eq!(s.x.data(), &[-1.0, 1.0]);
        assert_eq!(sc.mean, vec![1.0]);
        assert_eq!(sc.std, vec![1.0]);
        assert_eq!(s.z, vec![-1.0, 1.0]);
    }

    #[test]
    fn standardize_is_idempotent_on_normalized_input() {
        let d = ds(&[&[-1.0, 1.0], &[1.0, -1.0]], &[-1.0, 1.0]);
        let (s, sc) = standardize(&d).unwrap();
        for (a, b) in s.x.data().iter().zip(d.x.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(sc.mean.iter().all(|m| m.abs() < 1e-10));
        assert!(sc.std.iter().all(|s| (s - 1.0).abs() < 1e-10));
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let d = ds(&[&[5.0, 1.0], &[5.0, 2.0], &[5.0, 3.0]], &[0.0, 1.0, 2.0]);
        let (s, sc) = standardize(&d).unwrap();
        assert_eq!(sc.std[0], 1.0);
        assert!(s.x.iter_rows().all(|r| r[0] == 0.0));
    }

    #[test]
    fn bottom_fraction_examples() {
        let d = ds(&[&[0.0], &[1.0], &[2.0], &[3.0]], &[5.0, 1.0, 3.0, 2.0]);
        assert_eq!(select_bottom_fraction(&d, 1.0).unwrap(), d);
        let half = select_bottom_fraction(&d, 0.5).unwrap();
        assert_eq!(half.z, vec![1.0, 2.0]);
        assert_eq!(half.x.data(), &[1.0, 3.0]);
        assert!(matches!(
            select_bottom_fraction(&d, 0.0),
            Err(DataError::InvalidFraction(_))
        ));
        // minimum of two rows
        assert_eq!(select_bottom_fraction(&d, 0.01).unwrap().len(), 2);
    }

    #[test]
    fn bottom_fraction_ties_are_stable() {
        let d = ds(&[&[0.0], &[1.0], &[2.0], &[3.0]], &[1.0, 1.0, 1.0, 0.0]);
        let s = select_bottom_fraction(&d, 0.5).unwrap();
        assert_eq!(s.x.data(), &[0.0, 3.0]);
    }

    #[test]
    fn normalized_score_examples() {
        assert_eq!(normalized_score(0.0, 0.0, 4.0).unwrap(), 0.0);
        assert_eq!(normalized_score(4.0, 0.0, 4.0).unwrap(), 1.0);
        assert_eq!(normalized_score(2.0, 0.0, 4.0).unwrap(), 0.5);
        assert_eq!(normalized_score(6.0, 0.0, 4.0).unwrap(), 1.5);
        assert!(matches!(
            normalized_score(1.0, 2.0, 2.0),
            Err(DataError::DegenerateBounds { .. })
        ));
    }

    #[test]
    fn score_rows_round_trip() {
        let rows = vec![ScoreRow {
            method: "ga".into(),
            benchmark: "sphere4".into(),
            seed: 3,
            percentile100: 0.75,
            best_raw: -1.25,
            runtime_s: 0.0,
        }];
        let mut buf = Vec::new();
        write_score_rows(&rows, &mut buf).unwrap();
        assert_eq!(read_score_rows(buf.as_slice()).unwrap(), rows);
    }
}
