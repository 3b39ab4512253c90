use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{finite_difference_report, GRAD_CHECK_TOLERANCE};

fn tiny(layout: IdentityLayout, head: HeadKind) -> ModelConfig {
    ModelConfig {
        layout,
        head,
        transformer: TransformerConfig { d_model: 8, n_heads: 2, d_ff: 16, n_layers: 2, dropout_p: 0.0 },
        mlp_widths: vec![8, 8],
    }
}

fn binary_columns(d: usize) -> ModelConfig {
    tiny(IdentityLayout::Columns { count: d, embedding_dim: 3 }, HeadKind::Bernoulli)
}

fn model(config: ModelConfig, seed: u64) -> DeformerModel {
    DeformerModel::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn zero_head(m: &mut DeformerModel) {
    let (w, b) = m.head_params();
    m.params_mut().get_mut(w).data_mut().fill(0.0);
    m.params_mut().get_mut(b).data_mut().fill(0.0);
}

fn bits(d: usize, config: usize) -> Vec<FeatureValue> {
    (0..d).map(|i| FeatureValue::Discrete((config >> (d - 1 - i)) & 1)).collect()
}

#[test]
fn mask_for_one_and_two_features() {
    let m = build_mask(1).unwrap();
    assert_eq!((0..2).flat_map(|r| (0..2).map(move |c| (r, c))).filter(|&(r, c)| m.visible(r, c)).count(), 3);
    assert!(!m.visible(0, 1));
    let m = build_mask(2).unwrap();
    let want = [[1, 0, 0, 0], [1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 1, 1]];
    for (r, row) in want.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            assert_eq!(m.visible(r, c), v == 1, "({r}, {c})");
        }
    }
    assert_eq!(build_mask(0).unwrap_err(), ModelError::EmptyInput);
}

/// z_k sees z_1..z_k and u_1..u_{k-1}; u_k sees z_1..z_k and u_1..u_k.
#[test]
fn mask_matches_visibility_rule() {
    for d in 1..=8 {
        let m = build_mask(d).unwrap();
        for r in 0..2 * d {
            for c in 0..2 * d {
                let (k, row_is_u) = (r / 2 + 1, r % 2 == 1);
                let (j, col_is_u) = (c / 2 + 1, c % 2 == 1);
                let rule = match (row_is_u, col_is_u) {
                    (false, false) => j <= k,
                    (false, true) => j < k,
                    (true, _) => j <= k,
                };
                assert_eq!(m.visible(r, c), rule, "D={d} row {r} col {c}");
            }
        }
    }
}

#[test]
fn interleaved_rows_follow_the_ordering() {
    let d = 6;
    let m = model(binary_columns(d), 1);
    let values = bits(d, 0b101100);
    let mut other = values.clone();
    // Flip the feature at position 5 (1-based) of the ordering below.
    let ordering = vec![3, 1, 5, 0, 2, 4];
    other[2] = FeatureValue::Discrete(1 - match values[2] {
        FeatureValue::Discrete(l) => l,
        FeatureValue::Continuous(_) => unreachable!(),
    });
    let rows = |vals: &[FeatureValue]| {
        let s = OrderedSample::new(m.layout(), vals, ordering.clone()).unwrap();
        let mut tape = Tape::inference();
        let params = m.bind(&mut tape);
        let x = m.build_interleaved(&mut tape, &params, &s).unwrap();
        assert_eq!(tape.shape(x), &[2 * d, 8]);
        tape.value(x).to_vec()
    };
    let (a, b) = (rows(&values), rows(&other));
    let differing: Vec<usize> = (0..2 * d).filter(|&r| a[r * 8..(r + 1) * 8] != b[r * 8..(r + 1) * 8]).collect();
    assert_eq!(differing, vec![9]);

    // z rows depend on identity only: z_k equals the identity MLP applied to e(i_k).
    let enc = m.encode_identity(FeatureIdentity::Column(3)).unwrap();
    assert_eq!(enc, m.params().get(m.params().find("identity.embedding").unwrap()).data()[9..12].to_vec());
}

#[test]
fn pixel_inputs_use_scaled_coordinates() {
    let m = model(tiny(IdentityLayout::Pixels { height: 3, width: 5 }, HeadKind::Bernoulli), 2);
    assert_eq!(m.encode_identity(FeatureIdentity::Pixel { row: 2, col: 1 }).unwrap(), vec![1.0, 0.25]);
    assert!(matches!(m.encode_identity(FeatureIdentity::Column(0)), Err(ModelError::InvalidIdentity(_))));
}

#[test]
fn zero_head_is_uniform() {
    let mut m = model(binary_columns(4), 3);
    zero_head(&mut m);
    let s = OrderedSample::identity_order(m.layout(), &bits(4, 0b0110)).unwrap();
    for h in m.forward_heads(&s).unwrap() {
        assert_eq!(h, HeadOutput::Bernoulli { p: 0.5, logit: 0.0 });
    }
    let mut m = model(tiny(IdentityLayout::Columns { count: 2, embedding_dim: 3 }, HeadKind::GaussianMixture(5)), 3);
    zero_head(&mut m);
    let s = OrderedSample::identity_order(m.layout(), &[FeatureValue::Continuous(0.4); 2]).unwrap();
    for h in m.forward_heads(&s).unwrap() {
        let HeadOutput::GaussianMixture { weights, .. } = h else { unreachable!() };
        assert!(weights.iter().all(|&w| (w - 0.2).abs() < 1e-15));
    }
}

#[test]
fn zero_head_nll_is_d_ln2() {
    let mut m = model(binary_columns(1), 4);
    zero_head(&mut m);
    let s = OrderedSample::identity_order(m.layout(), &bits(1, 1)).unwrap();
    assert!((m.nll_discrete(&s).unwrap() - 0.693147).abs() < 1e-6);

    let mut m = model(tiny(IdentityLayout::Pixels { height: 28, width: 28 }, HeadKind::Bernoulli), 4);
    zero_head(&mut m);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let values: Vec<FeatureValue> = (0..784).map(|i| FeatureValue::Discrete((i * 7 + 3) % 5 / 3)).collect();
    let s = OrderedSample::new(m.layout(), &values, shuffle_ordering(784, &mut rng).unwrap()).unwrap();
    assert!((m.nll(&s).unwrap() - 543.43).abs() < 0.01);
}

/// Probabilities of all 2^D binary configurations sum to 1 under any ordering.
#[test]
fn discrete_likelihood_is_normalised() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for d in [1, 3, 6, 10] {
        let m = model(binary_columns(d), 5 + d as u64);
        let ordering = shuffle_ordering(d, &mut rng).unwrap();
        let samples: Vec<OrderedSample> = (0..1usize << d)
            .map(|c| OrderedSample::new(m.layout(), &bits(d, c), ordering.clone()).unwrap())
            .collect();
        let total: Float = m.nll_batch(&samples).unwrap().iter().map(|n| (-n).exp()).sum();
        assert!((total - 1.0).abs() < 1e-9, "D={d}: {total}");
    }
}

#[test]
fn categorical_likelihood_is_normalised() {
    let m = model(tiny(IdentityLayout::Columns { count: 3, embedding_dim: 2 }, HeadKind::Categorical(4)), 12);
    let samples: Vec<OrderedSample> = (0..64)
        .map(|c| {
            let vals = [c / 16, c / 4 % 4, c % 4].map(FeatureValue::Discrete);
            OrderedSample::new(m.layout(), &vals, vec![2, 0, 1]).unwrap()
        })
        .collect();
    let total: Float = m.nll_batch(&samples).unwrap().iter().map(|n| (-n).exp()).sum();
    assert!((total - 1.0).abs() < 1e-9, "{total}");
}

/// Predictions at positions <= j do not depend on values after position j.
#[test]
fn predictions_are_causal() {
    let d = 7;
    let m = model(binary_columns(d), 13);
    let ordering = vec![4, 6, 0, 2, 1, 5, 3];
    let base = bits(d, 0b1010011);
    for j in 0..d {
        let mut changed = base.clone();
        for &f in &ordering[j + 1..] {
            changed[f] = FeatureValue::Discrete(1 - changed[f].as_float() as usize);
        }
        let heads = |v: &[FeatureValue]| m.forward_heads(&OrderedSample::new(m.layout(), v, ordering.clone()).unwrap()).unwrap();
        let (a, b) = (heads(&base), heads(&changed));
        assert_eq!(a[..=j], b[..=j], "position {j}");
    }
}

#[test]
fn batched_and_single_nll_agree() {
    let d = 5;
    let m = model(binary_columns(d), 14);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<OrderedSample> = (0..6)
        .map(|c| OrderedSample::new(m.layout(), &bits(d, c * 5), shuffle_ordering(d, &mut rng).unwrap()).unwrap())
        .collect();
    let batched = m.nll_batch(&samples).unwrap();
    for (s, b) in samples.iter().zip(&batched) {
        assert!((m.nll(s).unwrap() - b).abs() < 1e-12);
    }
    // The head outputs reproduce the tape's log-probabilities.
    let s = &samples[2];
    let from_heads: Float = m
        .forward_heads(s)
        .unwrap()
        .iter()
        .zip(s.pairs())
        .map(|(h, (_, v))| -h.log_prob(v).unwrap())
        .sum();
    assert!((from_heads - batched[2]).abs() < 1e-10);
}

#[test]
fn mixture_density_integrates_to_one() {
    let m = model(tiny(IdentityLayout::Columns { count: 1, embedding_dim: 2 }, HeadKind::GaussianMixture(3)), 15);
    let s = OrderedSample::identity_order(m.layout(), &[FeatureValue::Continuous(0.0)]).unwrap();
    let head = &m.forward_heads(&s).unwrap()[0];
    let step = 1e-3;
    let n = 100_000;
    let mut total = 0.0;
    for i in 0..=n {
        let x = -50.0 + i as Float * step;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        total += w * head.log_prob(&FeatureValue::Continuous(x)).unwrap().exp();
    }
    total *= step;
    assert!((total - 1.0).abs() < 1e-4, "{total}");
    for x in [-1.3, 0.0, 2.5] {
        let s = OrderedSample::identity_order(m.layout(), &[FeatureValue::Continuous(x)]).unwrap();
        let want = -head.log_prob(&FeatureValue::Continuous(x)).unwrap();
        assert!((m.nll_continuous(&s).unwrap() - want).abs() < 1e-10);
    }
}

#[test]
fn wrong_value_kinds_are_rejected() {
    let m = model(binary_columns(2), 16);
    let s = OrderedSample::identity_order(m.layout(), &[FeatureValue::Discrete(0), FeatureValue::Continuous(0.5)]).unwrap();
    assert!(matches!(m.nll(&s), Err(ModelError::ValueKind { .. })));
    let s = OrderedSample::identity_order(m.layout(), &[FeatureValue::Discrete(0), FeatureValue::Discrete(1)]).unwrap();
    assert!(m.nll_continuous(&s).is_err());
    let bad = ModelConfig { mlp_widths: vec![8, 6], ..binary_columns(2) };
    assert!(matches!(DeformerModel::new(bad, &mut ChaCha8Rng::seed_from_u64(0)), Err(ModelError::Config(_))));
}

fn gradcheck(m: &DeformerModel, samples: &[OrderedSample]) {
    let mut point = m.params().tensors().to_vec();
    // At the initial scale attention is near-uniform and some query gradients sit close
    // to the finite-difference noise floor, so the check runs at doubled weights.
    for t in &mut point {
        t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
    }
    let report = finite_difference_report(&mut point, 1e-5, |tape, vars| -> Result<Var, ModelError> {
        Ok(m.batch_loss(tape, vars, samples, None)?.total)
    })
    .unwrap();
    assert!(report.max_relative_error < GRAD_CHECK_TOLERANCE, "{report:?} at {}", m.params().names()[report.worst.0]);
}

#[test]
fn discrete_loss_gradients() {
    let d = 3;
    let m = model(binary_columns(d), 17);
    let samples = [
        OrderedSample::new(m.layout(), &bits(d, 0b101), vec![2, 0, 1]).unwrap(),
        OrderedSample::new(m.layout(), &bits(d, 0b011), vec![1, 2, 0]).unwrap(),
    ];
    gradcheck(&m, &samples);
}

#[test]
fn continuous_loss_gradients() {
    let m = model(tiny(IdentityLayout::Columns { count: 3, embedding_dim: 3 }, HeadKind::GaussianMixture(2)), 18);
    let samples = [
        OrderedSample::new(m.layout(), &[0.3, -0.8, 1.1].map(FeatureValue::Continuous), vec![1, 2, 0]).unwrap(),
        OrderedSample::new(m.layout(), &[-0.2, 0.5, 0.0].map(FeatureValue::Continuous), vec![0, 2, 1]).unwrap(),
    ];
    gradcheck(&m, &samples);
}

#[test]
fn paper_presets() {
    let c = ModelConfig::paper_images();
    assert_eq!(c.layout.num_features(), 784);
    assert_eq!(c.transformer.d_model, 512);
    c.validate().unwrap();
    let c = ModelConfig::paper_tabular();
    assert_eq!((c.head.output_width(), c.layout.encoding_width(), c.transformer.dropout_p), (450, 20, 0.2));
    c.validate().unwrap();
}
