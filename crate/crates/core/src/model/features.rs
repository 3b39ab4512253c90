use rand::seq::SliceRandom;
use rand::Rng;

use super::ModelError;
use crate::numerics::Float;

/// What a feature is, independent of its value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureIdentity {
    Pixel { row: usize, col: usize },
    Column(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeatureValue {
    /// Class label in `0..C`.
    Discrete(usize),
    Continuous(Float),
}

impl FeatureValue {
    /// The value as the single scalar fed to the identity/value encoder.
    pub fn as_float(&self) -> Float {
        match *self {
            FeatureValue::Discrete(l) => l as Float,
            FeatureValue::Continuous(v) => v,
        }
    }
}

/// How features are identified and how identities are encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdentityLayout {
    /// Image pixels, encoded as coordinates scaled to `[0, 1]`.
    Pixels { height: usize, width: usize },
    /// Table columns, encoded by a learned embedding.
    Columns { count: usize, embedding_dim: usize },
}

impl IdentityLayout {
    pub fn num_features(&self) -> usize {
        match *self {
            IdentityLayout::Pixels { height, width } => height * width,
            IdentityLayout::Columns { count, .. } => count,
        }
    }

    /// Width of the identity encoding `e(i)`.
    pub fn encoding_width(&self) -> usize {
        match *self {
            IdentityLayout::Pixels { .. } => 2,
            IdentityLayout::Columns { embedding_dim, .. } => embedding_dim,
        }
    }

    /// Identity of the feature at canonical index `feature` (pixels are row-major).
    pub fn identity(&self, feature: usize) -> FeatureIdentity {
        match *self {
            IdentityLayout::Pixels { width, .. } => FeatureIdentity::Pixel {
                row: feature / width,
                col: feature % width,
            },
            IdentityLayout::Columns { .. } => FeatureIdentity::Column(feature),
        }
    }

    /// Canonical index of `id`, rejecting identities outside the layout.
    pub fn index_of(&self, id: FeatureIdentity) -> Result<usize, ModelError> {
        match (*self, id) {
            (IdentityLayout::Pixels { height, width }, FeatureIdentity::Pixel { row, col }) if row < height && col < width => {
                Ok(row * width + col)
            }
            (IdentityLayout::Columns { count, .. }, FeatureIdentity::Column(c)) if c < count => Ok(c),
            _ => Err(ModelError::InvalidIdentity(id)),
        }
    }

    /// Pixel coordinates divided by `(height - 1, width - 1)`.
    pub fn scaled_coordinates(&self, id: FeatureIdentity) -> Result<[Float; 2], ModelError> {
        self.index_of(id)?;
        match (*self, id) {
            (IdentityLayout::Pixels { height, width }, FeatureIdentity::Pixel { row, col }) => {
                let scale = |v: usize, n: usize| if n > 1 { v as Float / (n - 1) as Float } else { 0.0 };
                Ok([scale(row, height), scale(col, width)])
            }
            _ => Err(ModelError::InvalidIdentity(id)),
        }
    }
}

/// One data sample arranged under a feature ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderedSample {
    ordering: Vec<usize>,
    pairs: Vec<(FeatureIdentity, FeatureValue)>,
}

impl OrderedSample {
    /// Arranges `values` (in canonical feature order) so that position `k` holds feature `ordering[k]`.
    pub fn new(layout: &IdentityLayout, values: &[FeatureValue], ordering: Vec<usize>) -> Result<Self, ModelError> {
        let d = layout.num_features();
        if d == 0 || values.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if values.len() != d {
            return Err(ModelError::FeatureCount { expected: d, got: values.len() });
        }
        validate_permutation(&ordering, d)?;
        let pairs = ordering.iter().map(|&f| (layout.identity(f), values[f])).collect();
        Ok(Self { ordering, pairs })
    }

    /// Canonical order.
    pub fn identity_order(layout: &IdentityLayout, values: &[FeatureValue]) -> Result<Self, ModelError> {
        Self::new(layout, values, (0..values.len()).collect())
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    pub fn pairs(&self) -> &[(FeatureIdentity, FeatureValue)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Values back in canonical feature order.
    pub fn canonical_values(&self) -> Vec<FeatureValue> {
        let mut out = vec![FeatureValue::Discrete(0); self.pairs.len()];
        for (&f, &(_, v)) in self.ordering.iter().zip(&self.pairs) {
            out[f] = v;
        }
        out
    }
}

pub(crate) fn validate_permutation(ordering: &[usize], d: usize) -> Result<(), ModelError> {
    if ordering.len() != d {
        return Err(ModelError::InvalidOrdering(format!("length {} for {d} features", ordering.len())));
    }
    let mut seen = vec![false; d];
    for &f in ordering {
        if f >= d || std::mem::replace(&mut seen[f], true) {
            return Err(ModelError::InvalidOrdering(format!("{f} is out of range or repeated")));
        }
    }
    Ok(())
}

/// Uniform random permutation of `0..d` (Fisher-Yates).
pub fn shuffle_ordering<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Vec<usize>, ModelError> {
    if d == 0 {
        return Err(ModelError::EmptyInput);
    }
    let mut o: Vec<usize> = (0..d).collect();
    o.shuffle(rng);
    Ok(o)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    const MNIST: IdentityLayout = IdentityLayout::Pixels { height: 28, width: 28 };

    #[test]
    fn pixel_scaling_endpoints() {
        let at = |row, col| MNIST.scaled_coordinates(FeatureIdentity::Pixel { row, col }).unwrap();
        assert_eq!(at(0, 0), [0.0, 0.0]);
        assert_eq!(at(27, 27), [1.0, 1.0]);
        assert!(MNIST.scaled_coordinates(FeatureIdentity::Pixel { row: 28, col: 0 }).is_err());
        assert!(MNIST.scaled_coordinates(FeatureIdentity::Column(0)).is_err());
    }

    #[test]
    fn ordered_sample_round_trips_values() {
        let layout = IdentityLayout::Columns { count: 3, embedding_dim: 4 };
        let values = [0.5, -1.0, 2.0].map(FeatureValue::Continuous);
        let s = OrderedSample::new(&layout, &values, vec![2, 0, 1]).unwrap();
        assert_eq!(s.pairs()[0], (FeatureIdentity::Column(2), FeatureValue::Continuous(2.0)));
        assert_eq!(s.canonical_values(), values.to_vec());
    }

    #[test]
    fn bad_orderings_are_rejected() {
        let layout = IdentityLayout::Columns { count: 3, embedding_dim: 4 };
        let values = [FeatureValue::Continuous(0.0); 3];
        for bad in [vec![0, 1], vec![0, 1, 1], vec![0, 1, 3]] {
            assert!(matches!(OrderedSample::new(&layout, &values, bad), Err(ModelError::InvalidOrdering(_))));
        }
        assert!(matches!(OrderedSample::new(&layout, &values[..2], vec![0, 1]), Err(ModelError::FeatureCount { .. })));
    }

    #[test]
    fn zero_features_rejected() {
        let layout = IdentityLayout::Columns { count: 0, embedding_dim: 4 };
        assert_eq!(OrderedSample::new(&layout, &[], vec![]), Err(ModelError::EmptyInput));
        assert_eq!(shuffle_ordering(0, &mut ChaCha8Rng::seed_from_u64(0)), Err(ModelError::EmptyInput));
    }

    #[test]
    fn shuffle_single_feature() {
        assert_eq!(shuffle_ordering(1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), vec![0]);
    }

    #[test]
    fn shuffle_is_seed_deterministic() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            (0..5).map(|_| shuffle_ordering(10, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    /// Each of the 6 permutations of 3 items should appear ~10k times in 60k draws.
    #[test]
    fn shuffle_is_uniform_over_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = std::collections::HashMap::new();
        for _ in 0..60_000 {
            *counts.entry(shuffle_ordering(3, &mut rng).unwrap()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        let sigma = (60_000.0f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        for (perm, &c) in &counts {
            assert!((c as f64 - 10_000.0).abs() < 3.0 * sigma, "{perm:?}: {c}");
        }
    }
}
