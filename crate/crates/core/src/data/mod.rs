//! Dataset ingestion, preprocessing and synthetic ground-truth distributions.

mod idx;
mod images;
mod synthetic;
mod tabular;

pub use idx::{parse_idx, read_idx_file, write_idx, IdxArray};
pub use images::{binarize, load_mnist_split, Binarization, ImageSplits, MNIST_VALIDATION_COUNT};
pub use synthetic::{GaussianMixture1d, OracleNll, SyntheticJoint};
pub use tabular::{maf_split_sizes, preprocess_tabular, read_csv, RawTable, TabularDataset, TabularPreset};

use crate::model::{FeatureValue, IdentityLayout};
use crate::numerics::Float;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("{0}")]
    Io(String),
    #[error("IDX header is truncated")]
    IdxHeader,
    #[error("IDX: unsupported magic {0:#010x}")]
    IdxMagic(u32),
    #[error("IDX payload truncated: expected {expected} bytes, got {got}")]
    IdxTruncated { expected: usize, got: usize },
    #[error("IDX payload has {extra} trailing bytes")]
    IdxTrailing { extra: usize },
    #[error("CSV: {0}")]
    Csv(String),
    #[error("CSV line {line}, column {column}: {value:?} is not a number")]
    NonNumeric { line: usize, column: String, value: String },
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("column {0:?} has zero variance")]
    ZeroVariance(String),
    #[error("invalid probability table: {0}")]
    Probabilities(String),
    #[error("{0}")]
    Format(String),
}

/// Feature space a dataset lives in, independent of how a model encodes identities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureShape {
    Pixels { height: usize, width: usize },
    Columns(usize),
}

impl FeatureShape {
    pub fn num_features(&self) -> usize {
        match *self {
            FeatureShape::Pixels { height, width } => height * width,
            FeatureShape::Columns(d) => d,
        }
    }

    /// Whether a model with `layout` can score samples of this shape.
    pub fn matches(&self, layout: &IdentityLayout) -> bool {
        match (*self, *layout) {
            (FeatureShape::Pixels { height, width }, IdentityLayout::Pixels { height: h, width: w }) => height == h && width == w,
            (FeatureShape::Columns(d), IdentityLayout::Columns { count, .. }) => d == count,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Values {
    /// Row-major labels.
    Discrete(Vec<u8>),
    Continuous(Vec<Float>),
}

/// `len` samples of `shape.num_features()` values each, immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: FeatureShape,
    len: usize,
    values: Values,
}

impl Dataset {
    pub fn discrete(shape: FeatureShape, data: Vec<u8>) -> Result<Self, DataError> {
        Self::build(shape, data.len(), Values::Discrete(data))
    }

    pub fn continuous(shape: FeatureShape, data: Vec<Float>) -> Result<Self, DataError> {
        Self::build(shape, data.len(), Values::Continuous(data))
    }

    fn build(shape: FeatureShape, n: usize, values: Values) -> Result<Self, DataError> {
        let d = shape.num_features();
        if d == 0 {
            return Err(DataError::Format("datasets need at least one feature".into()));
        }
        if n % d != 0 {
            return Err(DataError::Format(format!("{n} values do not divide into rows of {d}")));
        }
        Ok(Self { shape, len: n / d, values })
    }

    pub fn shape(&self) -> FeatureShape {
        self.shape
    }

    pub fn num_features(&self) -> usize {
        self.shape.num_features()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn values(&self) -> &Values {
        &self.values
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.values, Values::Discrete(_))
    }

    /// Values of sample `i` in canonical feature order.
    pub fn row(&self, i: usize) -> Vec<FeatureValue> {
        let d = self.num_features();
        match &self.values {
            Values::Discrete(v) => v[i * d..(i + 1) * d].iter().map(|&l| FeatureValue::Discrete(l as usize)).collect(),
            Values::Continuous(v) => v[i * d..(i + 1) * d].iter().map(|&x| FeatureValue::Continuous(x)).collect(),
        }
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.num_features();
        let values = match &self.values {
            Values::Discrete(v) => Values::Discrete(indices.iter().flat_map(|&i| v[i * d..(i + 1) * d].iter().copied()).collect()),
            Values::Continuous(v) => Values::Continuous(indices.iter().flat_map(|&i| v[i * d..(i + 1) * d].iter().copied()).collect()),
        };
        Self {
            shape: self.shape,
            len: indices.len(),
            values,
        }
    }

    /// Samples `start..end`.
    pub fn range(&self, start: usize, end: usize) -> Self {
        self.subset(&(start..end).collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_and_subsets() {
        let ds = Dataset::discrete(FeatureShape::Columns(2), vec![0, 1, 1, 1, 1, 0]).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.row(2), vec![FeatureValue::Discrete(1), FeatureValue::Discrete(0)]);
        assert_eq!(ds.subset(&[2, 0]).row(1), ds.row(0));
        assert!(Dataset::discrete(FeatureShape::Columns(2), vec![0; 3]).is_err());
        assert!(FeatureShape::Columns(2).matches(&IdentityLayout::Columns { count: 2, embedding_dim: 20 }));
        assert!(!FeatureShape::Pixels { height: 2, width: 1 }.matches(&IdentityLayout::Columns { count: 2, embedding_dim: 20 }));
    }
}
