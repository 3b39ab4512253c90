//! Small explicit distributions with exact likelihoods, used as ground truth.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, Dataset, FeatureShape};
use crate::numerics::{log_sum_exp, Float};

/// Exact NLL of a configuration; zero-probability configurations are flagged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OracleNll {
    Finite(f64),
    Infinite,
}

impl OracleNll {
    pub fn finite(self) -> Option<f64> {
        match self {
            OracleNll::Finite(v) => Some(v),
            OracleNll::Infinite => None,
        }
    }
}

/// A probability table over all `2^D` binary configurations.
///
/// Configurations are indexed lexicographically with `x_1` as the most significant bit.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticJoint {
    d: usize,
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl SyntheticJoint {
    pub fn new(d: usize, probs: Vec<f64>) -> Result<Self, DataError> {
        if d == 0 || d > 24 {
            return Err(DataError::Probabilities(format!("D must be in 1..=24, got {d}")));
        }
        if probs.len() != 1 << d {
            return Err(DataError::Probabilities(format!("D={d} needs {} entries, got {}", 1usize << d, probs.len())));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(DataError::Probabilities(format!("entry {p} is not a probability")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(DataError::Probabilities(format!("entries sum to {total}")));
        }
        let cdf = probs
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        Ok(Self { d, probs, cdf })
    }

    pub fn uniform(d: usize) -> Result<Self, DataError> {
        Self::new(d, vec![1.0 / (1u64 << d) as f64; 1 << d])
    }

    pub fn point_mass(d: usize, config: usize) -> Result<Self, DataError> {
        let mut probs = vec![0.0; 1 << d];
        *probs
            .get_mut(config)
            .ok_or_else(|| DataError::Probabilities(format!("configuration {config} out of range")))? = 1.0;
        Self::new(d, probs)
    }

    /// Table drawn from a flat Dirichlet.
    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Self, DataError> {
        let w: Vec<f64> = (0..1usize << d.min(24)).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        Self::from_weights(d, &w)
    }

    /// Normalises non-negative weights into a table.
    pub fn from_weights(d: usize, weights: &[f64]) -> Result<Self, DataError> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(DataError::Probabilities("weights must have positive mass".into()));
        }
        let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        // Fold the rounding residue into the largest entry.
        let residue = 1.0 - probs.iter().sum::<f64>();
        if let Some(max) = probs.iter_mut().max_by(|a, b| a.total_cmp(b)) {
            *max += residue;
        }
        Self::new(d, probs)
    }

    /// `x_1, x_2` uniform and `x_3 = x_1 XOR x_2`.
    pub fn xor() -> Self {
        let probs = (0..8usize).map(|c| if (c >> 2 ^ c >> 1 ^ c) & 1 == 0 { 0.25 } else { 0.0 }).collect();
        Self::new(3, probs).expect("valid table")
    }

    pub fn num_features(&self) -> usize {
        self.d
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn config_index(&self, sample: &[u8]) -> Result<usize, DataError> {
        if sample.len() != self.d || sample.iter().any(|&b| b > 1) {
            return Err(DataError::Format(format!("expected {} binary values, got {sample:?}", self.d)));
        }
        Ok(sample.iter().fold(0, |acc, &b| (acc << 1) | b as usize))
    }

    pub fn config_values(&self, index: usize) -> Vec<u8> {
        (0..self.d).map(|i| ((index >> (self.d - 1 - i)) & 1) as u8).collect()
    }

    pub fn probability(&self, sample: &[u8]) -> Result<f64, DataError> {
        Ok(self.probs[self.config_index(sample)?])
    }

    pub fn nll(&self, sample: &[u8]) -> Result<OracleNll, DataError> {
        let p = self.probability(sample)?;
        Ok(if p > 0.0 { OracleNll::Finite(-p.ln()) } else { OracleNll::Infinite })
    }

    /// `-sum p ln p`, in nats.
    pub fn entropy(&self) -> f64 {
        self.probs.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum()
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = rng.gen::<f64>() * self.cdf[self.cdf.len() - 1];
        let i = self.cdf.partition_point(|&c| c <= u);
        // Never land on a zero-probability entry through rounding at the top.
        if i < self.probs.len() && self.probs[i] > 0.0 {
            i
        } else {
            self.probs.iter().rposition(|&p| p > 0.0).expect("table has mass")
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u8> {
        self.config_values(self.sample_index(rng))
    }

    pub fn sample_dataset<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Dataset {
        let data = (0..n).flat_map(|_| self.sample(rng)).collect();
        Dataset::discrete(FeatureShape::Columns(self.d), data).expect("rows of D values")
    }

    /// Line 1 is `D`, then one probability per line in configuration order.
    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.d);
        for p in &self.probs {
            s.push_str(&format!("{p:e}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let d = lines
            .next()
            .and_then(|l| l.parse::<usize>().ok())
            .ok_or_else(|| DataError::Format("first line must be the feature count D".into()))?;
        let probs = lines
            .enumerate()
            .map(|(i, l)| l.parse::<f64>().map_err(|_| DataError::Format(format!("probability line {}: {l:?}", i + 2))))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(d, probs)
    }
}

/// A one-dimensional Gaussian mixture with known density.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture1d {
    weights: Vec<f64>,
    means: Vec<f64>,
    std_devs: Vec<f64>,
}

impl GaussianMixture1d {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, std_devs: Vec<f64>) -> Result<Self, DataError> {
        let ok = !weights.is_empty()
            && weights.len() == means.len()
            && weights.len() == std_devs.len()
            && weights.iter().all(|w| *w >= 0.0)
            && std_devs.iter().all(|s| *s > 0.0)
            && ((weights.iter().sum::<f64>()) - 1.0).abs() < 1e-12;
        if !ok {
            return Err(DataError::Probabilities("mixture needs matching lengths, weights summing to 1 and positive std devs".into()));
        }
        Ok(Self { weights, means, std_devs })
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let terms: Vec<Float> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.std_devs)
            .map(|((w, m), s)| {
                let z = (x - m) / s;
                (w.ln() - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * z * z) as Float
            })
            .collect();
        log_sum_exp(&terms) as f64
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mut u = rng.gen::<f64>();
        let mut j = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            if u < *w {
                j = i;
                break;
            }
            u -= w;
        }
        let z: f64 = StandardNormal.sample(rng);
        self.means[j] + self.std_devs[j] * z
    }

    pub fn sample_dataset<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Dataset {
        let data = (0..n).map(|_| self.sample(rng) as Float).collect();
        Dataset::continuous(FeatureShape::Columns(1), data).expect("one column")
    }

    /// Differential entropy (the expected NLL under the truth), by the trapezoid rule on `[lo, hi]`.
    pub fn entropy_by_quadrature(&self, lo: f64, hi: f64, step: f64) -> f64 {
        let n = ((hi - lo) / step).round() as usize;
        (0..=n)
            .map(|i| {
                let lp = self.log_density(lo + i as f64 * step);
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                let p = lp.exp();
                if p > 0.0 {
                    -w * p * lp
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            * step
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn uniform_nll_is_d_ln2() {
        let j = SyntheticJoint::uniform(3).unwrap();
        for c in 0..8 {
            let nll = j.nll(&j.config_values(c)).unwrap().finite().unwrap();
            assert!((nll - 2.0794).abs() < 1e-4);
        }
        assert!((j.entropy() - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn point_mass_flags_infinite() {
        let j = SyntheticJoint::point_mass(3, 0).unwrap();
        assert_eq!(j.nll(&[0, 0, 0]).unwrap(), OracleNll::Finite(0.0));
        for c in 1..8 {
            assert_eq!(j.nll(&j.config_values(c)).unwrap(), OracleNll::Infinite);
        }
        assert_eq!(j.entropy(), 0.0);
    }

    #[test]
    fn x1_is_the_most_significant_bit() {
        let j = SyntheticJoint::uniform(3).unwrap();
        assert_eq!(j.config_index(&[1, 0, 0]).unwrap(), 4);
        assert_eq!(j.config_values(1), vec![0, 0, 1]);
        assert!(j.config_index(&[1, 0]).is_err());
        assert!(j.config_index(&[2, 0, 0]).is_err());
    }

    #[test]
    fn invalid_tables_rejected() {
        assert!(SyntheticJoint::new(2, vec![0.5, 0.5, 0.0]).is_err());
        assert!(SyntheticJoint::new(1, vec![0.6, 0.6]).is_err());
        assert!(SyntheticJoint::new(1, vec![1.5, -0.5]).is_err());
        assert!(SyntheticJoint::new(0, vec![1.0]).is_err());
    }

    #[test]
    fn xor_table() {
        let j = SyntheticJoint::xor();
        for c in 0..8 {
            let v = j.config_values(c);
            let want = if v[2] == v[0] ^ v[1] { 0.25 } else { 0.0 };
            assert_eq!(j.probability(&v).unwrap(), want);
        }
    }

    #[test]
    fn text_round_trip() {
        let j = SyntheticJoint::random(4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(SyntheticJoint::from_text(&j.to_text()).unwrap(), j);
        assert!(SyntheticJoint::from_text("2\n0.5\nabc\n0\n0\n").is_err());
    }

    #[test]
    fn entropy_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let j = SyntheticJoint::random(4, &mut rng).unwrap();
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| -j.probabilities()[j.sample_index(&mut rng)].ln()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let sigma = (var / n as f64).sqrt();
        assert!((mean - j.entropy()).abs() < 3.0 * sigma, "{mean} vs {}", j.entropy());
    }

    #[test]
    fn sampling_frequencies_within_4_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let j = SyntheticJoint::random(3, &mut rng).unwrap();
        let n = 1_000_000;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            counts[j.sample_index(&mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip(j.probabilities()) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() <= 4.0 * sigma, "{c} vs {}", n as f64 * p);
        }
        let zero = SyntheticJoint::xor();
        assert!((0..10_000).all(|_| zero.probabilities()[zero.sample_index(&mut rng)] > 0.0));
    }

    #[test]
    fn mixture_density_and_entropy() {
        let g = GaussianMixture1d::new(vec![0.3, 0.7], vec![-2.0, 1.5], vec![0.5, 1.0]).unwrap();
        let mass: f64 = (0..=100_000).map(|i| g.log_density(-50.0 + i as f64 * 1e-3).exp()).sum::<f64>() * 1e-3;
        assert!((mass - 1.0).abs() < 1e-6);
        let h = g.entropy_by_quadrature(-50.0, 50.0, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mc = (0..n).map(|_| -g.log_density(g.sample(&mut rng))).sum::<f64>() / n as f64;
        assert!((mc - h).abs() < 0.01, "{mc} vs {h}");
        assert!(GaussianMixture1d::new(vec![1.0], vec![0.0], vec![0.0]).is_err());
    }
}
