//! Masked multi-head self-attention encoder without positional encoding.
//!
//! Layers use the post-norm residual arrangement: each sublayer's output goes
//! through dropout, is added back to its input, and the sum is layer-normalised.

use rand::{Rng, RngCore};

use crate::numerics::{BoolMask, Float, NumericsError, ParamId, ParamStore, Tape, Tensor, Var};

const LAYER_NORM_EPS: Float = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransformerError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("attention mask row {row} has no visible column")]
    EmptyMaskRow { row: usize },
    #[error("attention mask is {mask}x{mask} but the sequence has length {len}")]
    MaskLength { mask: usize, len: usize },
    #[error("invalid transformer config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    /// Probability of zeroing a sublayer activation during training.
    pub dropout_p: Float,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TransformerConfig {
    /// Full-size encoder: 6 layers of width 512 with 8 heads and 2048 feed-forward units.
    pub fn paper() -> Self {
        Self {
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            n_layers: 6,
            dropout_p: 0.0,
        }
    }

    /// Small encoder that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_layers: 2,
            dropout_p: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), TransformerError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(TransformerError::Config("d_model, n_heads and d_ff must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(TransformerError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(TransformerError::Config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

/// Row-visibility matrix: `visible(r, c)` means position `r` may attend to position `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    visible: BoolMask,
    blocked: BoolMask,
}

impl AttentionMask {
    pub fn new(visible: BoolMask) -> Result<Self, TransformerError> {
        if visible.rows() != visible.cols() {
            return Err(TransformerError::MaskLength {
                mask: visible.cols(),
                len: visible.rows(),
            });
        }
        if let Some(row) = (0..visible.rows()).find(|&r| (0..visible.cols()).all(|c| !visible.get(r, c))) {
            return Err(TransformerError::EmptyMaskRow { row });
        }
        let blocked = visible.not();
        Ok(Self { visible, blocked })
    }

    /// Every position sees itself and all earlier positions.
    pub fn lower_triangular(len: usize) -> Self {
        Self::new(BoolMask::from_fn(len, len, |r, c| c <= r)).expect("diagonal is always visible")
    }

    pub fn full(len: usize) -> Self {
        Self::new(BoolMask::from_fn(len, len, |_, _| true)).expect("non-empty rows")
    }

    pub fn len(&self) -> usize {
        self.visible.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn visible(&self, row: usize, col: usize) -> bool {
        self.visible.get(row, col)
    }

    pub fn as_bool_mask(&self) -> &BoolMask {
        &self.visible
    }
}

/// Parameter handles for one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParameters {
    pub w_query: ParamId,
    pub b_query: ParamId,
    /// Keys carry no bias: a per-row constant added to every attention logit cancels in the softmax.
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub b_value: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub w_ff1: ParamId,
    pub b_ff1: ParamId,
    pub w_ff2: ParamId,
    pub b_ff2: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

/// Weight matrix with entries drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn init_weight<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as Float).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape")
}

impl LayerParameters {
    fn register<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &TransformerConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let mut linear = |name: &str, fan_in: usize, fan_out: usize| {
            let w = store.add(format!("{prefix}.{name}.weight"), init_weight(fan_in, fan_out, rng));
            let b = store.add(format!("{prefix}.{name}.bias"), Tensor::zeros(&[fan_out]));
            (w, b)
        };
        let (w_query, b_query) = linear("attn.query", d, d);
        let (w_value, b_value) = linear("attn.value", d, d);
        let (w_out, b_out) = linear("attn.out", d, d);
        let (w_ff1, b_ff1) = linear("ff.in", d, cfg.d_ff);
        let (w_ff2, b_ff2) = linear("ff.out", cfg.d_ff, d);
        let w_key = store.add(format!("{prefix}.attn.key.weight"), init_weight(d, d, rng));
        let norm1_gain = store.add(format!("{prefix}.norm1.gain"), Tensor::full(&[d], 1.0));
        let norm1_bias = store.add(format!("{prefix}.norm1.bias"), Tensor::zeros(&[d]));
        let norm2_gain = store.add(format!("{prefix}.norm2.gain"), Tensor::full(&[d], 1.0));
        let norm2_bias = store.add(format!("{prefix}.norm2.bias"), Tensor::zeros(&[d]));
        Self {
            w_query,
            b_query,
            w_key,
            w_value,
            b_value,
            w_out,
            b_out,
            w_ff1,
            b_ff1,
            w_ff2,
            b_ff2,
            norm1_gain,
            norm1_bias,
            norm2_gain,
            norm2_bias,
        }
    }
}

fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// Multi-head scaled dot-product self-attention over `x` of shape `[B, L, d_model]` (or `[L, d_model]`).
pub fn multi_head_attention(
    tape: &mut Tape<'_>,
    params: &[Var],
    layer: &LayerParameters,
    n_heads: usize,
    x: Var,
    mask: &AttentionMask,
) -> Result<Var, TransformerError> {
    let shape = tape.shape(x).to_vec();
    let (x3, restore) = match shape.len() {
        2 => (tape.reshape(x, &[1, shape[0], shape[1]])?, true),
        3 => (x, false),
        _ => return Err(NumericsError::ShapeMismatch { op: "multi_head_attention", lhs: shape, rhs: vec![] }.into()),
    };
    let dims = tape.shape(x3).to_vec();
    let (len, d_model) = (dims[1], dims[2]);
    if mask.len() != len {
        return Err(TransformerError::MaskLength { mask: mask.len(), len });
    }
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(TransformerError::Config(format!("d_model {d_model} not divisible into {n_heads} heads")));
    }
    let p = |id: ParamId| params[id.index()];
    let q = linear(tape, x3, p(layer.w_query), p(layer.b_query))?;
    let k = tape.matmul(x3, p(layer.w_key))?;
    let v = linear(tape, x3, p(layer.w_value), p(layer.b_value))?;
    let head_dim = d_model / n_heads;
    let scale = 1.0 / (head_dim as Float).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.masked_softmax_rows(scores, &mask.blocked)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let out = linear(tape, merged, p(layer.w_out), p(layer.b_out))?;
    Ok(if restore { tape.reshape(out, &shape)? } else { out })
}

/// A stack of post-norm encoder layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    config: TransformerConfig,
    layers: Vec<LayerParameters>,
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(
        config: TransformerConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self, TransformerError> {
        config.validate()?;
        let layers = (0..config.n_layers)
            .map(|i| LayerParameters::register(store, &format!("{prefix}.{i}"), &config, rng))
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerParameters] {
        &self.layers
    }

    /// Runs the stack on `x` (`[B, L, d_model]` or `[L, d_model]`). Dropout is applied only when
    /// an RNG is supplied.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        params: &[Var],
        x: Var,
        mask: &AttentionMask,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var, TransformerError> {
        let keep = 1.0 - self.config.dropout_p;
        let p = |id: ParamId| params[id.index()];
        let mut h = x;
        for layer in &self.layers {
            let attn = multi_head_attention(tape, params, layer, self.config.n_heads, h, mask)?;
            let attn = match dropout.as_deref_mut() {
                Some(rng) => tape.dropout(attn, keep, rng)?,
                None => attn,
            };
            let res = tape.add(h, attn)?;
            let h1 = tape.layer_norm_rows(res, p(layer.norm1_gain), p(layer.norm1_bias), LAYER_NORM_EPS)?;

            let ff = linear(tape, h1, p(layer.w_ff1), p(layer.b_ff1))?;
            let ff = tape.relu(ff);
            let ff = linear(tape, ff, p(layer.w_ff2), p(layer.b_ff2))?;
            let ff = match dropout.as_deref_mut() {
                Some(rng) => tape.dropout(ff, keep, rng)?,
                None => ff,
            };
            let res = tape.add(h1, ff)?;
            h = tape.layer_norm_rows(res, p(layer.norm2_gain), p(layer.norm2_bias), LAYER_NORM_EPS)?;
        }
        Ok(h)
    }
}
