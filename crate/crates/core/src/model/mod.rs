//! The order-agnostic distribution estimator.
//!
//! A sample of `D` features under an ordering becomes `2D` rows: row `2k` is
//! the identity vector `z_k = g_z(e(i_k))` and row `2k + 1` is the
//! identity/value vector `u_k = g_u([e(i_k), v_k])`. With a plain
//! lower-triangular mask over those rows, `z_k` sees `z_1..z_k` and
//! `u_1..u_{k-1}`, while `u_k` sees everything up to and including itself.
//! The encoder output at each `z_k` row goes through one shared linear layer
//! that parameterises `p(v_k | v_<k)`.

mod features;
mod heads;

use rand::{Rng, RngCore};

pub use features::{shuffle_ordering, FeatureIdentity, FeatureValue, IdentityLayout, OrderedSample};
pub use heads::{HeadKind, HeadOutput, MAX_STD, MIN_STD};

use crate::numerics::{Float, NumericsError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::transformer::{init_weight, AttentionMask, Transformer, TransformerConfig, TransformerError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error("feature identity {0:?} is outside the model's layout")]
    InvalidIdentity(FeatureIdentity),
    #[error("{head:?} head cannot score value {value:?}")]
    ValueKind { head: HeadKind, value: FeatureValue },
    #[error("invalid ordering: {0}")]
    InvalidOrdering(String),
    #[error("expected {expected} features, got {got}")]
    FeatureCount { expected: usize, got: usize },
    #[error("samples must contain at least one feature")]
    EmptyInput,
    #[error("invalid model config: {0}")]
    Config(String),
}

/// Architecture of a [`DeformerModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layout: IdentityLayout,
    pub head: HeadKind,
    pub transformer: TransformerConfig,
    /// Layer widths shared by the identity MLP and the identity/value MLP; the last must equal `d_model`.
    pub mlp_widths: Vec<usize>,
}

impl ModelConfig {
    /// Binary 28x28 images at full size.
    pub fn paper_images() -> Self {
        Self {
            layout: IdentityLayout::Pixels { height: 28, width: 28 },
            head: HeadKind::Bernoulli,
            transformer: TransformerConfig::paper(),
            mlp_widths: vec![128, 256, 512],
        }
    }

    /// Six continuous columns at full size: 150-component mixtures, 20-dim column embeddings, dropout 0.2.
    pub fn paper_tabular() -> Self {
        Self {
            layout: IdentityLayout::Columns { count: 6, embedding_dim: 20 },
            head: HeadKind::GaussianMixture(150),
            transformer: TransformerConfig { dropout_p: 0.2, ..TransformerConfig::paper() },
            mlp_widths: vec![128, 256, 512],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.transformer.validate()?;
        self.head.validate()?;
        if self.layout.num_features() == 0 {
            return Err(ModelError::EmptyInput);
        }
        if self.layout.encoding_width() == 0 {
            return Err(ModelError::Config("identity encoding width must be positive".into()));
        }
        match self.mlp_widths.last() {
            Some(&w) if w == self.transformer.d_model && self.mlp_widths.iter().all(|&w| w > 0) => Ok(()),
            _ => Err(ModelError::Config(format!(
                "MLP widths {:?} must be positive and end in d_model = {}",
                self.mlp_widths, self.transformer.d_model
            ))),
        }
    }
}

/// Fully connected layers with ReLU between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut fan_in = input;
        let mut layers = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            let weight = store.add(format!("{prefix}.{i}.weight"), init_weight(fan_in, w, rng));
            let bias = store.add(format!("{prefix}.{i}.bias"), Tensor::zeros(&[w]));
            layers.push((weight, bias));
            fan_in = w;
        }
        Self { layers }
    }

    fn forward(&self, tape: &mut Tape<'_>, params: &[Var], x: Var) -> Result<Var, NumericsError> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.matmul(h, params[w.index()])?;
            h = tape.add(h, params[b.index()])?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// `len` identity/value positions for each of `batch` sequences, flattened batch-major.
///
/// Values at positions whose prediction is being read may hold any placeholder of
/// the right kind: the mask keeps `z_k` from seeing `v_k` or anything later.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    batch: usize,
    len: usize,
    identities: Vec<FeatureIdentity>,
    values: Vec<FeatureValue>,
}

impl SequenceBatch {
    pub fn new(batch: usize, len: usize, identities: Vec<FeatureIdentity>, values: Vec<FeatureValue>) -> Result<Self, ModelError> {
        if batch == 0 || len == 0 {
            return Err(ModelError::EmptyInput);
        }
        if identities.len() != batch * len || values.len() != batch * len {
            return Err(ModelError::FeatureCount {
                expected: batch * len,
                got: identities.len().min(values.len()),
            });
        }
        Ok(Self {
            batch,
            len,
            identities,
            values,
        })
    }

    pub fn from_samples(samples: &[OrderedSample]) -> Result<Self, ModelError> {
        let len = samples.first().ok_or(ModelError::EmptyInput)?.len();
        if let Some(bad) = samples.iter().find(|s| s.len() != len) {
            return Err(ModelError::FeatureCount { expected: len, got: bad.len() });
        }
        let (identities, values) = samples.iter().flat_map(|s| s.pairs().iter().copied()).unzip();
        Self::new(samples.len(), len, identities, values)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Loss over a batch of ordered samples.
#[derive(Debug)]
pub struct BatchLoss {
    /// Sum of the per-sample NLLs, in nats.
    pub total: Var,
    pub per_sample: Vec<Float>,
}

/// The lower-triangular `2D x 2D` visibility mask over interleaved rows.
pub fn build_mask(d: usize) -> Result<AttentionMask, ModelError> {
    if d == 0 {
        return Err(ModelError::EmptyInput);
    }
    Ok(AttentionMask::lower_triangular(2 * d))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformerModel {
    config: ModelConfig,
    params: ParamStore,
    embedding: Option<ParamId>,
    g_z: Mlp,
    g_u: Mlp,
    encoder: Transformer,
    head_weight: ParamId,
    head_bias: ParamId,
}

impl DeformerModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let embedding = match config.layout {
            IdentityLayout::Columns { count, embedding_dim } => {
                let data = (0..count * embedding_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                Some(params.add("identity.embedding", Tensor::new(vec![count, embedding_dim], data)?))
            }
            IdentityLayout::Pixels { .. } => None,
        };
        let enc_width = config.layout.encoding_width();
        let g_z = Mlp::new(&mut params, "g_z", enc_width, &config.mlp_widths, rng);
        let g_u = Mlp::new(&mut params, "g_u", enc_width + config.head.value_width(), &config.mlp_widths, rng);
        let encoder = Transformer::new(config.transformer, &mut params, "encoder", rng)?;
        let d_model = config.transformer.d_model;
        let head_weight = params.add("head.weight", init_weight(d_model, config.head.output_width(), rng));
        let head_bias = params.add("head.bias", Tensor::zeros(&[config.head.output_width()]));
        Ok(Self {
            config,
            params,
            embedding,
            g_z,
            g_u,
            encoder,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &IdentityLayout {
        &self.config.layout
    }

    pub fn head(&self) -> HeadKind {
        self.config.head
    }

    pub fn num_features(&self) -> usize {
        self.config.layout.num_features()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Final linear layer `(weight, bias)`.
    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.head_weight, self.head_bias)
    }

    /// Registers all parameters on `tape`.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Vec<Var> {
        self.params.bind(tape)
    }

    /// The identity encoding `e(i)`: scaled pixel coordinates or the column's embedding row.
    pub fn encode_identity(&self, id: FeatureIdentity) -> Result<Vec<Float>, ModelError> {
        match self.config.layout {
            IdentityLayout::Pixels { .. } => Ok(self.config.layout.scaled_coordinates(id)?.to_vec()),
            IdentityLayout::Columns { embedding_dim, .. } => {
                let c = self.config.layout.index_of(id)?;
                let table = self.params.get(self.embedding.expect("column layout has an embedding"));
                Ok(table.data()[c * embedding_dim..(c + 1) * embedding_dim].to_vec())
            }
        }
    }

    fn encode_identities(&self, tape: &mut Tape<'_>, params: &[Var], ids: &[FeatureIdentity]) -> Result<Var, ModelError> {
        match self.config.layout {
            IdentityLayout::Pixels { .. } => {
                let mut data = Vec::with_capacity(ids.len() * 2);
                for &id in ids {
                    data.extend_from_slice(&self.config.layout.scaled_coordinates(id)?);
                }
                Ok(tape.constant(Tensor::new(vec![ids.len(), 2], data)?))
            }
            IdentityLayout::Columns { .. } => {
                let idx = ids.iter().map(|&id| self.config.layout.index_of(id)).collect::<Result<Vec<_>, _>>()?;
                let table = params[self.embedding.expect("column layout has an embedding").index()];
                Ok(tape.embedding_lookup(table, &idx)?)
            }
        }
    }

    /// Interleaved `[B, 2n, F]` encoder input for a batch.
    fn interleave(&self, tape: &mut Tape<'_>, params: &[Var], batch: &SequenceBatch) -> Result<Var, ModelError> {
        let head = self.config.head;
        for v in &batch.values {
            head.check_value(v)?;
        }
        let n = batch.identities.len();
        let enc = self.encode_identities(tape, params, &batch.identities)?;
        let vw = head.value_width();
        let mut vals = vec![0.0; n * vw];
        for (v, out) in batch.values.iter().zip(vals.chunks_mut(vw)) {
            head.encode_value(v, out);
        }
        let vals = tape.constant(Tensor::new(vec![n, vw], vals)?);
        let u_in = tape.concat_cols(&[enc, vals])?;
        let z = self.g_z.forward(tape, params, enc)?;
        let u = self.g_u.forward(tape, params, u_in)?;
        let zu = tape.concat_cols(&[z, u])?;
        let f = self.config.transformer.d_model;
        Ok(tape.reshape(zu, &[batch.batch, 2 * batch.len, f])?)
    }

    /// The `2D x F` interleaved matrix `[z_1; u_1; z_2; u_2; ...]` for one sample.
    pub fn build_interleaved(&self, tape: &mut Tape<'_>, params: &[Var], sample: &OrderedSample) -> Result<Var, ModelError> {
        let batch = SequenceBatch::from_samples(std::slice::from_ref(sample))?;
        let x = self.interleave(tape, params, &batch)?;
        Ok(tape.reshape(x, &[2 * sample.len(), self.config.transformer.d_model])?)
    }

    /// Final-layer outputs `[B * n, output_width]`, one row per `z_k`.
    pub fn forward_logits(
        &self,
        tape: &mut Tape<'_>,
        params: &[Var],
        batch: &SequenceBatch,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var, ModelError> {
        let x = self.interleave(tape, params, batch)?;
        let mask = build_mask(batch.len)?;
        let h = self.encoder.forward(tape, params, x, &mask, dropout)?;
        let rows = 2 * batch.len;
        let z_rows: Vec<usize> = (0..batch.batch).flat_map(|b| (0..batch.len).map(move |k| b * rows + 2 * k)).collect();
        let hz = tape.gather_rows(h, &z_rows)?;
        let out = tape.matmul(hz, params[self.head_weight.index()])?;
        Ok(tape.add(out, params[self.head_bias.index()])?)
    }

    /// Log-probability (or log-density) of each position's value, `[B * n, 1]`.
    pub fn feature_log_probs(
        &self,
        tape: &mut Tape<'_>,
        params: &[Var],
        batch: &SequenceBatch,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var, ModelError> {
        let logits = self.forward_logits(tape, params, batch, dropout)?;
        let n = batch.values.len();
        let pick_label = |tape: &mut Tape<'_>, log_probs: Var, classes: usize| -> Result<Var, ModelError> {
            let mut onehot = vec![0.0; n * classes];
            for (i, v) in batch.values.iter().enumerate() {
                if let FeatureValue::Discrete(l) = v {
                    onehot[i * classes + l] = 1.0;
                }
            }
            let onehot = tape.constant(Tensor::new(vec![n, classes], onehot)?);
            let picked = tape.mul(log_probs, onehot)?;
            let ones = tape.constant(Tensor::full(&[classes, 1], 1.0));
            Ok(tape.matmul(picked, ones)?)
        };
        match self.config.head {
            HeadKind::Bernoulli => {
                // log sigmoid via a two-class softmax over [0, logit]
                let zeros = tape.constant(Tensor::zeros(&[n, 1]));
                let two = tape.concat_cols(&[zeros, logits])?;
                let ls = tape.log_softmax_rows(two);
                pick_label(tape, ls, 2)
            }
            HeadKind::Categorical(c) => {
                let ls = tape.log_softmax_rows(logits);
                pick_label(tape, ls, c)
            }
            HeadKind::GaussianMixture(j) => {
                let mix = tape.slice_cols(logits, 0, j)?;
                let raw_log_std = tape.slice_cols(logits, j, 2 * j)?;
                let means = tape.slice_cols(logits, 2 * j, 3 * j)?;
                let log_weights = tape.log_softmax_rows(mix);
                let log_std = tape.clamp(raw_log_std, MIN_STD.ln(), MAX_STD.ln());
                let neg_log_std = tape.scale(log_std, -1.0);
                let inv_std = tape.exp(neg_log_std);
                let values: Vec<Float> = batch.values.iter().map(FeatureValue::as_float).collect();
                let values = tape.constant(Tensor::new(vec![n, 1], values)?);
                let neg_means = tape.scale(means, -1.0);
                let diff = tape.add(neg_means, values)?;
                let z = tape.mul(diff, inv_std)?;
                let z2 = tape.mul(z, z)?;
                let half_z2 = tape.scale(z2, -0.5);
                let terms = tape.add(log_weights, neg_log_std)?;
                let terms = tape.add(terms, half_z2)?;
                let norm = tape.constant(Tensor::full(&[j], -heads::HALF_LN_2PI));
                let terms = tape.add(terms, norm)?;
                Ok(tape.logsumexp_rows(terms))
            }
        }
    }

    /// Teacher-forced NLL of each sample (sum over its features) and their total.
    pub fn batch_loss(
        &self,
        tape: &mut Tape<'_>,
        params: &[Var],
        samples: &[OrderedSample],
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<BatchLoss, ModelError> {
        let batch = SequenceBatch::from_samples(samples)?;
        let lp = self.feature_log_probs(tape, params, &batch, dropout)?;
        let per_sample = tape.value(lp).chunks(batch.len).map(|c| -c.iter().sum::<Float>()).collect();
        let total = tape.sum(lp);
        let total = tape.scale(total, -1.0);
        Ok(BatchLoss { total, per_sample })
    }

    /// NLL of each sample, in nats, without recording gradients.
    pub fn nll_batch(&self, samples: &[OrderedSample]) -> Result<Vec<Float>, ModelError> {
        let mut tape = Tape::inference();
        let params = self.bind(&mut tape);
        Ok(self.batch_loss(&mut tape, &params, samples, None)?.per_sample)
    }

    /// `sum_k -ln p(v_k | v_<k)` under the sample's ordering, for any head.
    pub fn nll(&self, sample: &OrderedSample) -> Result<Float, ModelError> {
        Ok(self.nll_batch(std::slice::from_ref(sample))?[0])
    }

    /// NLL for a Bernoulli or categorical head.
    pub fn nll_discrete(&self, sample: &OrderedSample) -> Result<Float, ModelError> {
        if !self.config.head.is_discrete() {
            return Err(ModelError::Config("nll_discrete needs a Bernoulli or categorical head".into()));
        }
        self.nll(sample)
    }

    /// NLL for a Gaussian-mixture head, accumulated in log space.
    pub fn nll_continuous(&self, sample: &OrderedSample) -> Result<Float, ModelError> {
        if self.config.head.is_discrete() {
            return Err(ModelError::Config("nll_continuous needs a Gaussian-mixture head".into()));
        }
        self.nll(sample)
    }

    /// Predictive distribution at every position of one sample.
    pub fn forward_heads(&self, sample: &OrderedSample) -> Result<Vec<HeadOutput>, ModelError> {
        let batch = SequenceBatch::from_samples(std::slice::from_ref(sample))?;
        let mut tape = Tape::inference();
        let params = self.bind(&mut tape);
        let logits = self.forward_logits(&mut tape, &params, &batch, None)?;
        let w = self.config.head.output_width();
        Ok(tape.value(logits).chunks(w).map(|row| HeadOutput::from_logits(self.config.head, row)).collect())
    }

    /// Predictive distribution at `position` for every sequence in `batch`.
    pub fn heads_at(&self, batch: &SequenceBatch, position: usize) -> Result<Vec<HeadOutput>, ModelError> {
        if position >= batch.len {
            return Err(ModelError::InvalidOrdering(format!("position {position} beyond length {}", batch.len)));
        }
        let mut tape = Tape::inference();
        let params = self.bind(&mut tape);
        let logits = self.forward_logits(&mut tape, &params, batch, None)?;
        let w = self.config.head.output_width();
        let values = tape.value(logits);
        Ok((0..batch.batch)
            .map(|b| {
                let row = b * batch.len + position;
                HeadOutput::from_logits(self.config.head, &values[row * w..(row + 1) * w])
            })
            .collect())
    }
}

#[cfg(test)]
mod tests;
