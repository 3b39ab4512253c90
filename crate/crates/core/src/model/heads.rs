//! Per-feature predictive distributions read off the final linear layer.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FeatureValue, ModelError};
use crate::numerics::{log_sum_exp, sigmoid, softmax_into, Float};

/// Bounds on the mixture standard deviations.
pub const MIN_STD: Float = 1e-4;
pub const MAX_STD: Float = 1e4;

pub(crate) const HALF_LN_2PI: Float = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// One logit per feature; used for binary data.
    Bernoulli,
    Categorical(usize),
    /// `J` components, laid out as `[mixture logits | log std devs | means]`.
    GaussianMixture(usize),
}

impl HeadKind {
    pub fn output_width(&self) -> usize {
        match *self {
            HeadKind::Bernoulli => 1,
            HeadKind::Categorical(c) => c,
            HeadKind::GaussianMixture(j) => 3 * j,
        }
    }

    /// Width of the value part of the identity/value encoder input.
    pub fn value_width(&self) -> usize {
        match *self {
            HeadKind::Categorical(c) if c > 2 => c,
            _ => 1,
        }
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self, HeadKind::GaussianMixture(_))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match *self {
            HeadKind::Categorical(c) if c < 2 => Err(ModelError::Config(format!("categorical head needs at least 2 classes, got {c}"))),
            HeadKind::GaussianMixture(0) => Err(ModelError::Config("mixture head needs at least one component".into())),
            _ => Ok(()),
        }
    }

    /// Checks that `v` is a value this head can score.
    pub fn check_value(&self, v: &FeatureValue) -> Result<(), ModelError> {
        let ok = match (*self, *v) {
            (HeadKind::Bernoulli, FeatureValue::Discrete(l)) => l < 2,
            (HeadKind::Categorical(c), FeatureValue::Discrete(l)) => l < c,
            (HeadKind::GaussianMixture(_), FeatureValue::Continuous(x)) => x.is_finite(),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::ValueKind { head: *self, value: *v })
        }
    }

    /// Fills `out` (length `value_width`) with the encoder input for `v`.
    pub(crate) fn encode_value(&self, v: &FeatureValue, out: &mut [Float]) {
        match (*self, *v) {
            (HeadKind::Categorical(c), FeatureValue::Discrete(l)) if c > 2 => {
                out.fill(0.0);
                out[l] = 1.0;
            }
            _ => out[0] = v.as_float(),
        }
    }
}

/// Predictive distribution for one feature.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadOutput {
    Bernoulli { p: Float, logit: Float },
    Categorical { probs: Vec<Float>, log_probs: Vec<Float> },
    GaussianMixture { weights: Vec<Float>, log_weights: Vec<Float>, means: Vec<Float>, std_devs: Vec<Float> },
}

impl HeadOutput {
    /// Interprets one row of final-layer outputs.
    pub fn from_logits(kind: HeadKind, row: &[Float]) -> Self {
        debug_assert_eq!(row.len(), kind.output_width());
        match kind {
            HeadKind::Bernoulli => HeadOutput::Bernoulli { p: sigmoid(row[0]), logit: row[0] },
            HeadKind::Categorical(_) => {
                let lse = log_sum_exp(row);
                let log_probs: Vec<Float> = row.iter().map(|v| v - lse).collect();
                let mut probs = vec![0.0; row.len()];
                softmax_into(row, &mut probs);
                HeadOutput::Categorical { probs, log_probs }
            }
            HeadKind::GaussianMixture(j) => {
                let (mix, rest) = row.split_at(j);
                let (log_std, means) = rest.split_at(j);
                let lse = log_sum_exp(mix);
                let mut weights = vec![0.0; j];
                softmax_into(mix, &mut weights);
                HeadOutput::GaussianMixture {
                    weights,
                    log_weights: mix.iter().map(|v| v - lse).collect(),
                    means: means.to_vec(),
                    std_devs: log_std.iter().map(|&s| s.clamp(MIN_STD.ln(), MAX_STD.ln()).exp()).collect(),
                }
            }
        }
    }

    /// Natural-log probability (or density) of `v`.
    pub fn log_prob(&self, v: &FeatureValue) -> Result<Float, ModelError> {
        match (self, *v) {
            (HeadOutput::Bernoulli { logit, .. }, FeatureValue::Discrete(l)) if l < 2 => {
                // ln sigmoid(x) = x - ln(1 + e^x); ln(1 - sigmoid(x)) = -ln(1 + e^x)
                let lse = log_sum_exp(&[0.0, *logit]);
                Ok(if l == 1 { logit - lse } else { -lse })
            }
            (HeadOutput::Categorical { log_probs, .. }, FeatureValue::Discrete(l)) if l < log_probs.len() => Ok(log_probs[l]),
            (HeadOutput::GaussianMixture { log_weights, means, std_devs, .. }, FeatureValue::Continuous(x)) => {
                let terms: Vec<Float> = log_weights
                    .iter()
                    .zip(means)
                    .zip(std_devs)
                    .map(|((lw, mu), sd)| {
                        let z = (x - mu) / sd;
                        lw - sd.ln() - HALF_LN_2PI - 0.5 * z * z
                    })
                    .collect();
                Ok(log_sum_exp(&terms))
            }
            _ => Err(ModelError::ValueKind { head: self.kind(), value: *v }),
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            HeadOutput::Bernoulli { .. } => HeadKind::Bernoulli,
            HeadOutput::Categorical { probs, .. } => HeadKind::Categorical(probs.len()),
            HeadOutput::GaussianMixture { weights, .. } => HeadKind::GaussianMixture(weights.len()),
        }
    }

    /// Draws a value. Mixtures pick a component by weight, then draw from its Gaussian.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> FeatureValue {
        match self {
            HeadOutput::Bernoulli { p, .. } => FeatureValue::Discrete(usize::from(rng.gen::<f64>() < *p as f64)),
            HeadOutput::Categorical { probs, .. } => FeatureValue::Discrete(pick(probs, rng)),
            HeadOutput::GaussianMixture { weights, means, std_devs, .. } => {
                let j = pick(weights, rng);
                let z: f64 = StandardNormal.sample(rng);
                FeatureValue::Continuous(means[j] + std_devs[j] * z as Float)
            }
        }
    }

    /// Most probable label; for mixtures, the mean of the heaviest component.
    pub fn mode(&self) -> FeatureValue {
        match self {
            HeadOutput::Bernoulli { p, .. } => FeatureValue::Discrete(usize::from(*p > 0.5)),
            HeadOutput::Categorical { probs, .. } => FeatureValue::Discrete(argmax(probs)),
            HeadOutput::GaussianMixture { weights, means, .. } => FeatureValue::Continuous(means[argmax(weights)]),
        }
    }
}

fn argmax(v: &[Float]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, Float::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Index drawn with probability proportional to `weights`.
fn pick<R: Rng + ?Sized>(weights: &[Float], rng: &mut R) -> usize {
    let total: Float = weights.iter().sum();
    let mut u = rng.gen::<f64>() as Float * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn output_widths() {
        assert_eq!(HeadKind::Bernoulli.output_width(), 1);
        assert_eq!(HeadKind::Categorical(10).output_width(), 10);
        assert_eq!(HeadKind::GaussianMixture(150).output_width(), 450);
    }

    #[test]
    fn zero_logits_give_uniform_heads() {
        assert_eq!(HeadOutput::from_logits(HeadKind::Bernoulli, &[0.0]), HeadOutput::Bernoulli { p: 0.5, logit: 0.0 });
        let HeadOutput::GaussianMixture { weights, std_devs, .. } = HeadOutput::from_logits(HeadKind::GaussianMixture(4), &[0.0; 12]) else {
            unreachable!()
        };
        assert!(weights.iter().all(|&w| (w - 0.25).abs() < 1e-15));
        assert!(std_devs.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn bernoulli_half_scores_ln2() {
        let h = HeadOutput::from_logits(HeadKind::Bernoulli, &[0.0]);
        assert!((-h.log_prob(&FeatureValue::Discrete(1)).unwrap() - std::f64::consts::LN_2 as Float).abs() < 1e-12);
    }

    #[test]
    fn standard_normal_at_its_mean() {
        // J=1, mu=v, sigma=1 -> 0.5 ln(2 pi)
        let h = HeadOutput::from_logits(HeadKind::GaussianMixture(1), &[0.3, 0.0, 1.7]);
        let nll = -h.log_prob(&FeatureValue::Continuous(1.7)).unwrap();
        assert!((nll - 0.918939).abs() < 1e-6);
        // Two identical components reduce to one.
        let h = HeadOutput::from_logits(HeadKind::GaussianMixture(2), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let nll = -h.log_prob(&FeatureValue::Continuous(0.0)).unwrap();
        assert!((nll - 0.918939).abs() < 1e-6);
    }

    #[test]
    fn std_devs_are_clamped() {
        let HeadOutput::GaussianMixture { std_devs, .. } = HeadOutput::from_logits(HeadKind::GaussianMixture(2), &[0.0, 0.0, -50.0, 50.0, 0.0, 0.0]) else {
            unreachable!()
        };
        assert!((std_devs[0] - MIN_STD).abs() < 1e-15);
        assert!((std_devs[1] - MAX_STD).abs() < 1e-8);
    }

    #[test]
    fn value_kind_mismatch() {
        assert!(HeadKind::Bernoulli.check_value(&FeatureValue::Continuous(1.0)).is_err());
        assert!(HeadKind::Bernoulli.check_value(&FeatureValue::Discrete(2)).is_err());
        assert!(HeadKind::GaussianMixture(3).check_value(&FeatureValue::Discrete(0)).is_err());
        assert!(HeadKind::Categorical(3).check_value(&FeatureValue::Discrete(2)).is_ok());
    }

    #[test]
    fn categorical_sampling_frequencies() {
        let h = HeadOutput::from_logits(HeadKind::Categorical(3), &[0.0, (2.0 as Float).ln(), (3.0 as Float).ln()]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 3];
        for _ in 0..60_000 {
            let FeatureValue::Discrete(l) = h.sample(&mut rng) else { unreachable!() };
            counts[l] += 1;
        }
        for (c, want) in counts.iter().zip([10_000.0, 20_000.0, 30_000.0]) {
            assert!((*c as f64 - want).abs() < 600.0, "{counts:?}");
        }
        assert_eq!(h.mode(), FeatureValue::Discrete(2));
    }
}
