use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::FeatureShape;
use crate::model::{IdentityLayout, ModelConfig};
use crate::transformer::TransformerConfig;

fn model(layout: IdentityLayout, head: HeadKind, seed: u64) -> DeformerModel {
    let config = ModelConfig {
        layout,
        head,
        transformer: TransformerConfig { d_model: 8, n_heads: 2, d_ff: 16, n_layers: 2, dropout_p: 0.0 },
        mlp_widths: vec![8, 8],
    };
    DeformerModel::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn binary(d: usize, seed: u64) -> DeformerModel {
    model(IdentityLayout::Columns { count: d, embedding_dim: 3 }, HeadKind::Bernoulli, seed)
}

fn zero_head(m: &mut DeformerModel) {
    let (w, b) = m.head_params();
    m.params_mut().get_mut(w).data_mut().fill(0.0);
    m.params_mut().get_mut(b).data_mut().fill(0.0);
}

fn bits(v: &[usize]) -> Vec<FeatureValue> {
    v.iter().map(|&b| FeatureValue::Discrete(b)).collect()
}

#[test]
fn single_feature_has_no_spread() {
    let m = binary(1, 1);
    let e = average_nll(&m, &bits(&[1]), 7, 3).unwrap();
    assert_eq!(e.std_nll, 0.0);
    assert!(average_nll(&m, &bits(&[1]), 0, 3).is_err());
}

#[test]
fn one_ordering_matches_direct_nll() {
    let m = binary(4, 2);
    let values = bits(&[1, 0, 1, 1]);
    let e = average_nll(&m, &values, 1, 9).unwrap();
    let ordering = shuffle_ordering(4, &mut seeds::substream(9, seeds::ORDERING, 0)).unwrap();
    let direct = m.nll_discrete(&OrderedSample::new(m.layout(), &values, ordering).unwrap()).unwrap();
    assert!((e.mean_nll - direct).abs() < 1e-12);
    assert_eq!(e.std_nll, 0.0);
    assert_eq!(average_nll(&m, &values, 5, 9).unwrap(), average_nll(&m, &values, 5, 9).unwrap());
}

#[test]
fn ordering_evaluation_order_does_not_matter() {
    let m = binary(4, 3);
    let values = bits(&[0, 1, 1, 0]);
    let orderings = all_orderings(4);
    assert_eq!(orderings.len(), 24);
    let forward = nll_over_orderings(&m, &values, &orderings).unwrap();
    let mut reversed_orderings = orderings.clone();
    reversed_orderings.reverse();
    let mut backward = nll_over_orderings(&m, &values, &reversed_orderings).unwrap();
    backward.reverse();
    for (a, b) in forward.iter().zip(&backward) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn evaluation_is_independent_of_thread_count() {
    let m = binary(3, 4);
    let data = Dataset::discrete(FeatureShape::Columns(3), vec![0, 1, 1, 1, 1, 1, 0, 0, 0, 1, 0, 1, 1, 0, 0]).unwrap();
    let one = evaluate_dataset(&m, &data, 4, 5, 1).unwrap();
    let three = evaluate_dataset(&m, &data, 4, 5, 3).unwrap();
    assert_eq!(one, three);
    assert_eq!(one.entries.len(), 5);
    let wrong = Dataset::discrete(FeatureShape::Columns(2), vec![0, 1]).unwrap();
    assert!(evaluate_dataset(&m, &wrong, 4, 5, 1).is_err());
}

#[test]
fn zero_head_generates_fair_coins() {
    let mut m = binary(10, 5);
    zero_head(&mut m);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let samples = generate(&m, 10_000, 500, None, &mut rng).unwrap();
    let ones: usize = samples.iter().flat_map(|g| &g.values).map(|v| v.as_float() as usize).sum();
    let frac = ones as f64 / 100_000.0;
    assert!((frac - 0.5).abs() < 0.01, "{frac}");
}

#[test]
fn generation_is_seeded_and_consistent_with_scoring() {
    let m = binary(5, 7);
    let draw = || generate(&m, 20, 8, None, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let samples = draw();
    assert_eq!(samples, draw());
    for g in &samples {
        let nll = m.nll(&OrderedSample::new(m.layout(), &g.values, g.ordering.clone()).unwrap()).unwrap();
        assert!((nll + g.log_prob).abs() < 1e-10, "{nll} vs {}", g.log_prob);
    }
    let cm = model(IdentityLayout::Columns { count: 3, embedding_dim: 3 }, HeadKind::GaussianMixture(4), 9);
    for g in generate(&cm, 10, 4, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap() {
        let nll = cm.nll(&OrderedSample::new(cm.layout(), &g.values, g.ordering.clone()).unwrap()).unwrap();
        assert!((nll + g.log_prob).abs() < 1e-8);
    }
}

#[test]
fn continuous_draws_are_clamped() {
    let mut m = model(IdentityLayout::Columns { count: 2, embedding_dim: 3 }, HeadKind::GaussianMixture(1), 10);
    let (w, b) = m.head_params();
    m.params_mut().get_mut(w).data_mut().fill(0.0);
    // Component mean 50, std 1.
    m.params_mut().get_mut(b).data_mut().copy_from_slice(&[0.0, 0.0, 50.0]);
    let g = generate(&m, 3, 3, Some(SAMPLE_CLAMP), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(g.iter().flat_map(|g| &g.values).all(|v| v.as_float() == 10.0));
    let raw = generate(&m, 3, 3, None, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(raw.iter().flat_map(|g| &g.values).all(|v| v.as_float() > 40.0));
}

#[test]
fn impute_without_missing_returns_input() {
    let m = binary(3, 11);
    let observed = vec![(2, FeatureValue::Discrete(1)), (0, FeatureValue::Discrete(0)), (1, FeatureValue::Discrete(1))];
    let task = ImputationTask { observed, missing: vec![], mode: FillMode::Sample };
    let out = impute(&m, &task, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(out.values, bits(&[0, 1, 1]));
}

#[test]
fn impute_validates_the_task() {
    let m = binary(3, 12);
    let obs = |f| (f, FeatureValue::Discrete(0));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let overlap = ImputationTask { observed: vec![obs(0), obs(1)], missing: vec![1, 2], mode: FillMode::Argmax };
    assert!(impute(&m, &overlap, &mut rng).is_err());
    let gap = ImputationTask { observed: vec![obs(0)], missing: vec![2], mode: FillMode::Argmax };
    assert!(impute(&m, &gap, &mut rng).is_err());
}

#[test]
fn argmax_imputation_ignores_the_rng() {
    let m = binary(6, 13);
    let task = ImputationTask {
        observed: vec![(4, FeatureValue::Discrete(1)), (1, FeatureValue::Discrete(0)), (0, FeatureValue::Discrete(1))],
        missing: vec![5, 2, 3],
        mode: FillMode::Argmax,
    };
    let a = impute(&m, &task, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = impute(&m, &task, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(&a.ordering[3..], &[5, 2, 3]);
    assert_eq!((a.values[4], a.values[1], a.values[0]), (FeatureValue::Discrete(1), FeatureValue::Discrete(0), FeatureValue::Discrete(1)));
    let sampled = impute(&m, &ImputationTask { mode: FillMode::Sample, ..task }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(sampled.values[4], FeatureValue::Discrete(1));
}

#[test]
fn large_image_imputation_completes() {
    let m = model(IdentityLayout::Pixels { height: 28, width: 28 }, HeadKind::Bernoulli, 14);
    let missing: Vec<usize> = (300..400).collect();
    let observed = (0..784).filter(|f| !(300..400).contains(f)).map(|f| (f, FeatureValue::Discrete(f % 3 / 2))).collect();
    let task = ImputationTask { observed, missing, mode: FillMode::Sample };
    let out = impute(&m, &task, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(out.values.len(), 784);
    assert!(out.values.iter().all(|v| matches!(v, FeatureValue::Discrete(0 | 1))));
}

#[test]
fn ood_identical_datasets_match() {
    let m = binary(3, 15);
    let data = Dataset::discrete(FeatureShape::Columns(3), vec![0, 1, 1, 1, 1, 1, 0, 0, 0]).unwrap();
    let r = ood_score(&m, &data, &data, 3, 1, 2).unwrap();
    assert_eq!(r.in_summary, r.out_summary);
    let other = Dataset::discrete(FeatureShape::Columns(2), vec![0, 1]).unwrap();
    assert!(ood_score(&m, &data, &other, 3, 1, 2).is_err());
    let k1 = evaluate_dataset(&m, &data, 1, 1, 1).unwrap();
    let k10 = evaluate_dataset(&m, &data, 10, 1, 1).unwrap();
    assert!(k1.mean_nll().is_finite() && k10.mean_nll().is_finite());
    assert_ne!(k1.mean_nll(), k10.mean_nll());
}

#[test]
fn summary_percentiles() {
    let s = summarize(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
    assert_eq!((s.min, s.p25, s.median, s.p75, s.max), (1.0, 2.0, 3.0, 4.0, 5.0));
    assert!((s.p05 - 1.2).abs() < 1e-12);
    assert!((s.std - 2.0f64.sqrt() as Float).abs() < 1e-12);
    assert!(summarize(&[]).is_none());
}

#[test]
fn writers_produce_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("a.pgm");
    write_pgm(&pgm, 2, 3, &[0, 1, 0, 1, 1, 0]).unwrap();
    let bytes = std::fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    assert_eq!(&bytes[bytes.len() - 6..], &[0, 255, 0, 255, 255, 0]);
    let csv = dir.path().join("n.csv");
    write_nll_csv(&csv, &[(3, EvalEntry { mean_nll: 1.5, std_nll: 0.25 })]).unwrap();
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), "sample_id,mean_nll,std_nll\n3,1.5,0.25\n");
}
