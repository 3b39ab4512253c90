//! Numeric CSV tables and the dequantise/split/standardise pipeline.

use std::io::Read;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{DataError, Dataset, FeatureShape};
use crate::numerics::Float;

/// A numeric table read from CSV, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<f64>,
}

impl RawTable {
    pub fn num_columns(&self) -> usize {
        self.header.len()
    }

    pub fn num_rows(&self) -> usize {
        if self.header.is_empty() {
            0
        } else {
            self.rows.len() / self.header.len()
        }
    }

    fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Reads comma-separated values with a header row and `.` decimals.
pub fn read_csv<R: Read>(reader: R) -> Result<RawTable, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).delimiter(b',').from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().any(String::is_empty) {
        return Err(DataError::Csv("header row is missing or has empty names".into()));
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        for (cell, name) in record.iter().zip(&header) {
            let v: f64 = cell.trim().parse().map_err(|_| DataError::NonNumeric {
                line,
                column: name.clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonNumeric {
                    line,
                    column: name.clone(),
                    value: cell.to_string(),
                });
            }
            rows.push(v);
        }
    }
    Ok(RawTable { header, rows })
}

/// Column handling for one tabular benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPreset {
    /// Columns that must exist and are removed.
    pub drop: Vec<String>,
    /// Columns removed when present.
    pub drop_if_present: Vec<String>,
    /// Uniform `[0, scale)` noise added to named columns; others get none.
    pub noise: Vec<(String, f64)>,
    /// Required column count after dropping.
    pub expected_columns: Option<usize>,
}

impl TabularPreset {
    /// Keep every column, add no noise.
    pub fn plain() -> Self {
        Self {
            drop: Vec::new(),
            drop_if_present: Vec::new(),
            noise: Vec::new(),
            expected_columns: None,
        }
    }

    /// UCI household power consumption as prepared for the MAF benchmarks.
    pub fn power() -> Self {
        Self {
            drop: vec!["Global_reactive_power".into(), "Global_intensity".into()],
            drop_if_present: vec!["Date".into()],
            noise: vec![
                ("Global_active_power".into(), 0.001),
                ("Voltage".into(), 0.01),
                ("Sub_metering_1".into(), 1.0),
                ("Sub_metering_2".into(), 1.0),
                ("Sub_metering_3".into(), 1.0),
                ("Time".into(), 0.0),
            ],
            expected_columns: Some(6),
        }
    }
}

/// Standardised splits plus the training-split statistics used to produce them.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    pub columns: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl TabularDataset {
    /// Maps standardised values of one row back to raw units.
    pub fn inverse_transform(&self, row: &[Float]) -> Vec<f64> {
        row.iter().zip(self.mean.iter().zip(&self.std)).map(|(&v, (m, s))| v as f64 * s + m).collect()
    }
}

/// `(train, validation, test)` sizes: test is the last tenth, validation the last tenth of the rest.
pub fn maf_split_sizes(n: usize) -> (usize, usize, usize) {
    let test = n / 10;
    let val = (n - test) / 10;
    (n - test - val, val, test)
}

/// Drops columns, shuffles rows, dequantises, splits, and standardises with training statistics.
pub fn preprocess_tabular<R: Rng + ?Sized>(raw: &RawTable, preset: &TabularPreset, rng: &mut R) -> Result<TabularDataset, DataError> {
    for name in &preset.drop {
        raw.column_index(name).ok_or_else(|| DataError::MissingColumn(name.clone()))?;
    }
    let keep: Vec<usize> = (0..raw.num_columns())
        .filter(|&c| !preset.drop.contains(&raw.header[c]) && !preset.drop_if_present.contains(&raw.header[c]))
        .collect();
    let columns: Vec<String> = keep.iter().map(|&c| raw.header[c].clone()).collect();
    if let Some(want) = preset.expected_columns {
        if columns.len() != want {
            return Err(DataError::Format(format!("expected {want} columns after dropping, got {columns:?}")));
        }
    }
    for (name, _) in &preset.noise {
        if !columns.contains(name) {
            return Err(DataError::MissingColumn(name.clone()));
        }
    }
    let d = columns.len();
    let n = raw.num_rows();
    if d == 0 || n == 0 {
        return Err(DataError::Format("table has no data".into()));
    }
    let noise: Vec<f64> = columns
        .iter()
        .map(|c| preset.noise.iter().find(|(n, _)| n == c).map_or(0.0, |(_, s)| *s))
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut data = Vec::with_capacity(n * d);
    for &r in &order {
        let src = &raw.rows[r * raw.num_columns()..(r + 1) * raw.num_columns()];
        data.extend(keep.iter().map(|&c| src[c]));
    }
    for row in data.chunks_mut(d) {
        for (v, &s) in row.iter_mut().zip(&noise) {
            if s > 0.0 {
                *v += s * rng.gen::<f64>();
            }
        }
    }

    let (n_train, n_val, _) = maf_split_sizes(n);
    let train_rows = &data[..n_train * d];
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for c in 0..d {
        let col = train_rows.iter().skip(c).step_by(d);
        let m = col.clone().sum::<f64>() / n_train as f64;
        let var = col.map(|v| (v - m).powi(2)).sum::<f64>() / n_train as f64;
        if !(var.sqrt() > 1e-12 * m.abs().max(1.0)) {
            return Err(DataError::ZeroVariance(columns[c].clone()));
        }
        mean[c] = m;
        std[c] = var.sqrt();
    }
    let standardised: Vec<Float> = data
        .chunks(d)
        .flat_map(|row| row.iter().zip(mean.iter().zip(&std)).map(|(v, (m, s))| ((v - m) / s) as Float).collect::<Vec<_>>())
        .collect();
    let split = |lo: usize, hi: usize| Dataset::continuous(FeatureShape::Columns(d), standardised[lo * d..hi * d].to_vec());
    Ok(TabularDataset {
        columns,
        mean,
        std,
        train: split(0, n_train)?,
        validation: split(n_train, n_train + n_val)?,
        test: split(n_train + n_val, n)?,
    })
}
