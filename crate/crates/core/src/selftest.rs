//! Built-in consistency checks: attention-mask rule, gradients, normalisation
//! and causality of small random models.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::{
    build_mask, shuffle_ordering, DeformerModel, FeatureValue, HeadKind, IdentityLayout, ModelConfig, ModelError, OrderedSample, SequenceBatch,
};
use crate::numerics::{finite_difference_report, Float, Tape, GRAD_CHECK_TOLERANCE};
use crate::seeds;
use crate::transformer::TransformerConfig;

#[cfg(not(feature = "f32"))]
const NORMALIZATION_TOLERANCE: f64 = 1e-6;
#[cfg(feature = "f32")]
const NORMALIZATION_TOLERANCE: f64 = 1e-3;

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn(u64) -> Result<(bool, String), ModelError>;

/// Runs every check with models initialised from `seed`.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let checks: [(&'static str, Check); 5] = [
        ("mask_rule", mask_rule),
        ("gradients", gradients),
        ("normalization", normalization),
        ("categorical_normalization", categorical_normalization),
        ("causality", causality),
    ];
    checks
        .iter()
        .map(|&(name, check)| {
            let started = Instant::now();
            let (passed, detail) = check(seed).unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckResult { name, passed, detail, seconds: started.elapsed().as_secs_f64() }
        })
        .collect()
}

fn tiny(layout: IdentityLayout, head: HeadKind) -> ModelConfig {
    ModelConfig {
        layout,
        head,
        transformer: TransformerConfig { d_model: 8, n_heads: 2, d_ff: 16, n_layers: 2, dropout_p: 0.0 },
        mlp_widths: vec![8, 8],
    }
}

fn columns(count: usize) -> IdentityLayout {
    IdentityLayout::Columns { count, embedding_dim: 4 }
}

fn init_rng(seed: u64, index: u64) -> ChaCha8Rng {
    seeds::substream(seed, seeds::INIT, index)
}

/// Every configuration of `d` features with `classes` values, first feature most significant.
fn all_configurations(d: usize, classes: usize) -> Vec<Vec<FeatureValue>> {
    let total = classes.pow(d as u32);
    (0..total)
        .map(|mut c| {
            let mut v = vec![FeatureValue::Discrete(0); d];
            for slot in v.iter_mut().rev() {
                *slot = FeatureValue::Discrete(c % classes);
                c /= classes;
            }
            v
        })
        .collect()
}

fn mask_rule(_seed: u64) -> Result<(bool, String), ModelError> {
    let mut mismatches = 0;
    for d in 1..=8 {
        let mask = build_mask(d)?;
        for r in 0..2 * d {
            for c in 0..2 * d {
                // Rows alternate z_k, u_k; z_k sees z_{<=k} and u_{<k}, u_k sees z_{<=k} and u_{<=k}.
                let (rk, r_is_u) = (r / 2, r % 2 == 1);
                let (ck, c_is_u) = (c / 2, c % 2 == 1);
                let allowed = if c_is_u && !r_is_u { ck < rk } else { ck <= rk };
                if mask.visible(r, c) != allowed {
                    mismatches += 1;
                }
            }
        }
    }
    Ok((mismatches == 0, format!("{mismatches} mismatches for D=1..8")))
}

fn gradient_error(model: &DeformerModel, samples: &[OrderedSample]) -> Result<Float, ModelError> {
    // Near-uniform attention at the initial scale leaves some gradients near the
    // finite-difference noise floor, so the check runs at doubled weights.
    let mut point = model.params().tensors().to_vec();
    for t in &mut point {
        t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
    }
    let report = finite_difference_report(&mut point, 1e-5, |tape: &mut Tape<'_>, vars| Ok::<_, ModelError>(model.batch_loss(tape, vars, samples, None)?.total))?;
    Ok(report.max_relative_error)
}

fn gradients(seed: u64) -> Result<(bool, String), ModelError> {
    let layout = IdentityLayout::Columns { count: 3, embedding_dim: 3 };
    let bits = |b: [usize; 3]| b.map(FeatureValue::Discrete);
    let bern = DeformerModel::new(tiny(layout, HeadKind::Bernoulli), &mut init_rng(seed, 0))?;
    let bern_samples = [
        OrderedSample::new(&layout, &bits([1, 0, 1]), vec![2, 0, 1])?,
        OrderedSample::new(&layout, &bits([0, 1, 1]), vec![1, 2, 0])?,
    ];
    let cont = |v: [Float; 3]| v.map(FeatureValue::Continuous);
    let mix = DeformerModel::new(tiny(layout, HeadKind::GaussianMixture(2)), &mut init_rng(seed, 1))?;
    let mix_samples = [
        OrderedSample::new(&layout, &cont([0.3, -0.8, 1.1]), vec![1, 2, 0])?,
        OrderedSample::new(&layout, &cont([-0.2, 0.5, 0.0]), vec![0, 2, 1])?,
    ];
    let e_bern = gradient_error(&bern, &bern_samples)?;
    let e_mix = gradient_error(&mix, &mix_samples)?;
    let passed = e_bern < GRAD_CHECK_TOLERANCE && e_mix < GRAD_CHECK_TOLERANCE;
    Ok((passed, format!("max relative error bernoulli {e_bern:.2e}, mixture {e_mix:.2e} (tolerance {GRAD_CHECK_TOLERANCE:.0e})")))
}

fn total_probability(model: &DeformerModel, classes: usize, ordering: &[usize]) -> Result<f64, ModelError> {
    let samples = all_configurations(model.num_features(), classes)
        .iter()
        .map(|v| OrderedSample::new(model.layout(), v, ordering.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(model.nll_batch(&samples)?.iter().map(|&n| (-(n as f64)).exp()).sum())
}

fn normalization(seed: u64) -> Result<(bool, String), ModelError> {
    let mut orderings = seeds::stream(seed, seeds::ORDERING);
    let mut worst: f64 = 0.0;
    for setting in 0..5u64 {
        for d in 3..=8 {
            let model = DeformerModel::new(tiny(columns(d), HeadKind::Bernoulli), &mut init_rng(seed, 10 * setting + d as u64))?;
            let ordering = shuffle_ordering(d, &mut orderings)?;
            worst = worst.max((total_probability(&model, 2, &ordering)? - 1.0).abs());
        }
    }
    Ok((worst <= NORMALIZATION_TOLERANCE, format!("max |sum - 1| {worst:.2e} over 30 binary models")))
}

fn categorical_normalization(seed: u64) -> Result<(bool, String), ModelError> {
    let mut orderings = seeds::stream(seed, seeds::ORDERING);
    let mut worst: f64 = 0.0;
    for (i, classes) in [3usize, 4].into_iter().enumerate() {
        let model = DeformerModel::new(tiny(columns(4), HeadKind::Categorical(classes)), &mut init_rng(seed, 100 + i as u64))?;
        let ordering = shuffle_ordering(4, &mut orderings)?;
        worst = worst.max((total_probability(&model, classes, &ordering)? - 1.0).abs());
    }
    Ok((worst <= NORMALIZATION_TOLERANCE, format!("max |sum - 1| {worst:.2e} for C=3,4")))
}

fn causality(seed: u64) -> Result<(bool, String), ModelError> {
    let mut rng = seeds::stream(seed, seeds::SAMPLING);
    let mut max_diff: Float = 0.0;
    let mut probes = 0;
    for d in [3usize, 5, 8] {
        let model = DeformerModel::new(tiny(columns(d), HeadKind::Bernoulli), &mut init_rng(seed, 200 + d as u64))?;
        let layout = *model.layout();
        for _ in 0..50 {
            let ordering = shuffle_ordering(d, &mut rng)?;
            let k = rng.gen_range(0..d);
            let values: Vec<FeatureValue> = (0..d).map(|_| FeatureValue::Discrete(rng.gen_range(0..2))).collect();
            // Flip values at positions >= k and permute identities after k.
            let mut other = ordering.clone();
            other[k + 1..].reverse();
            let mut other_values: Vec<FeatureValue> = other.iter().map(|&f| values[f]).collect();
            for v in &mut other_values[k..] {
                *v = FeatureValue::Discrete(1 - v.as_float() as usize);
            }
            let ids = ordering.iter().chain(&other).map(|&f| layout.identity(f)).collect();
            let vals = ordering.iter().map(|&f| values[f]).chain(other_values).collect();
            let heads = model.heads_at(&SequenceBatch::new(2, d, ids, vals)?, k)?;
            let a = heads[0].log_prob(&FeatureValue::Discrete(1))?;
            let b = heads[1].log_prob(&FeatureValue::Discrete(1))?;
            max_diff = max_diff.max((a - b).abs());
            probes += 1;
        }
    }
    Ok((max_diff == 0.0, format!("{probes} probes, max |difference| {max_diff:e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_all(11) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn configurations_enumerate_in_lexicographic_order() {
        let c = all_configurations(2, 3);
        assert_eq!(c.len(), 9);
        assert_eq!(c[5], vec![FeatureValue::Discrete(1), FeatureValue::Discrete(2)]);
    }
}
