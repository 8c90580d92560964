//! Encoder/decoder attention model for sequence regression.
//!
//! The stack follows the usual recipe: scaled dot-product attention, h
//! projected heads concatenated and re-projected, position-wise feed-forward
//! blocks, and residual + layer-norm wrappers. The decoder adds causal
//! self-attention plus cross-attention over the encoder output. A linear head
//! maps each position to one regression output; a sigmoid variant covers
//! per-patient classification.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::params::Parameters;
use crate::tape::Tape;
use crate::tensor::{Mask, Tensor, TensorError};

/// Fill value for masked attention logits; large enough that the masked
/// weight underflows to zero, finite enough to keep arithmetic clean.
pub const MASK_FILL: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds configured max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("expected feature width {expected}, got {got}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("positional encoding requires an even width, got {width}")]
    OddWidth { width: usize },
    #[error("sublayer changed width from {expected} to {got}")]
    SublayerWidth { expected: usize, got: usize },
    #[error("model has no decoder (mode is encoder_regression)")]
    NoDecoder,
}

/// How the model turns features into predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelMode {
    /// Encoder stack only; one regression output per input position.
    EncoderRegression,
    /// Full encoder/decoder with autoregressive decoding.
    EncoderDecoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    Linear,
    Sigmoid,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_input: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub mode: ModelMode,
    pub head: OutputHead,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: quick to train and verify on a laptop.
    pub fn desk(d_input: usize) -> Self {
        ModelConfig {
            d_input,
            d_model: 64,
            n_heads: 4,
            d_k: 16,
            d_v: 16,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ff: 256,
            dropout: 0.1,
            max_len: 512,
            mode: ModelMode::EncoderRegression,
            head: OutputHead::Linear,
            ln_eps: 1e-5,
        }
    }

    /// Full-size configuration (d_model 512, six layers per stack).
    pub fn full_scale(d_input: usize) -> Self {
        ModelConfig {
            d_input,
            d_model: 512,
            n_heads: 4,
            d_k: 128,
            d_v: 128,
            n_encoder_layers: 6,
            n_decoder_layers: 6,
            d_ff: 2048,
            dropout: 0.1,
            max_len: 512,
            mode: ModelMode::EncoderDecoder,
            head: OutputHead::Linear,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_input == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(ModelError::InvalidConfig(
                "widths and head count must be positive".into(),
            ));
        }
        if self.d_model != self.n_heads * self.d_k {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} != n_heads {} * d_k {}",
                self.d_model, self.n_heads, self.d_k
            )));
        }
        if self.d_model != self.n_heads * self.d_v {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} != n_heads {} * d_v {}",
                self.d_model, self.n_heads, self.d_v
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(ModelError::OddWidth { width: self.d_model });
        }
        if self.n_encoder_layers == 0 || self.n_decoder_layers == 0 {
            return Err(ModelError::InvalidConfig("layer counts must be >= 1".into()));
        }
        if self.max_len == 0 {
            return Err(ModelError::InvalidConfig("max_len must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(ModelError::InvalidConfig("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

// ── parameter containers ───────────────────────────────────────────────

/// Affine map `x·weight + bias` with `weight: [in×out]`, `bias: [out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    /// Per-head query projections, each `[d_model×d_k]`.
    pub w_q: Vec<Tensor>,
    /// Per-head key projections, each `[d_model×d_k]`.
    pub w_k: Vec<Tensor>,
    /// Per-head value projections, each `[d_model×d_v]`.
    pub w_v: Vec<Tensor>,
    /// Output projection `[h·d_v × d_model]`.
    pub w_o: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    fn unit(width: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::filled(vec![width], 1.0),
            beta: Tensor::zeros(vec![width]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNormParams,
    pub ffn: FeedForward,
    pub norm2: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNormParams,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNormParams,
    pub ffn: FeedForward,
    pub norm3: LayerNormParams,
}

/// The assembled model: input projection, fixed sinusoidal positions,
/// encoder stack, optional decoder stack, and the output head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionModel {
    pub config: ModelConfig,
    pub input_proj: Linear,
    /// Decoder-side projection of previous outputs; present in
    /// encoder_decoder mode only.
    pub target_proj: Option<Linear>,
    /// `[max_len×d_model]`, not trainable.
    pub positional: Tensor,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub output_head: Linear,
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(vec![rows, cols], -limit, limit, rng)
}

fn init_linear(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Linear {
    Linear {
        weight: xavier(d_in, d_out, rng),
        bias: Tensor::zeros(vec![d_out]),
    }
}

pub(crate) fn init_mha(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> MultiHeadAttention {
    let heads = |rng: &mut ChaCha8Rng, cols: usize| -> Vec<Tensor> {
        (0..cfg.n_heads).map(|_| xavier(cfg.d_model, cols, rng)).collect()
    };
    MultiHeadAttention {
        w_q: heads(rng, cfg.d_k),
        w_k: heads(rng, cfg.d_k),
        w_v: heads(rng, cfg.d_v),
        w_o: xavier(cfg.n_heads * cfg.d_v, cfg.d_model, rng),
    }
}

pub(crate) fn init_ffn(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> FeedForward {
    FeedForward {
        w1: xavier(cfg.d_model, cfg.d_ff, rng),
        b1: Tensor::zeros(vec![cfg.d_ff]),
        w2: xavier(cfg.d_ff, cfg.d_model, rng),
        b2: Tensor::zeros(vec![cfg.d_model]),
    }
}

impl AttentionModel {
    /// Draws every weight from a seeded Xavier-uniform distribution; biases
    /// start at zero, layer-norm scale at one. The same seed always produces
    /// bit-identical parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_proj = init_linear(config.d_input, config.d_model, &mut rng);
        let encoder = (0..config.n_encoder_layers)
            .map(|_| EncoderLayer {
                self_attn: init_mha(&config, &mut rng),
                norm1: LayerNormParams::unit(config.d_model),
                ffn: init_ffn(&config, &mut rng),
                norm2: LayerNormParams::unit(config.d_model),
            })
            .collect();
        let (decoder, target_proj) = match config.mode {
            ModelMode::EncoderRegression => (Vec::new(), None),
            ModelMode::EncoderDecoder => {
                let layers = (0..config.n_decoder_layers)
                    .map(|_| DecoderLayer {
                        self_attn: init_mha(&config, &mut rng),
                        norm1: LayerNormParams::unit(config.d_model),
                        cross_attn: init_mha(&config, &mut rng),
                        norm2: LayerNormParams::unit(config.d_model),
                        ffn: init_ffn(&config, &mut rng),
                        norm3: LayerNormParams::unit(config.d_model),
                    })
                    .collect();
                let proj = init_linear(1, config.d_model, &mut rng);
                (layers, Some(proj))
            }
        };
        let output_head = init_linear(config.d_model, 1, &mut rng);
        let positional = positional_encoding(config.max_len, config.d_model)?;
        Ok(AttentionModel {
            config,
            input_proj,
            target_proj,
            positional,
            encoder,
            decoder,
            output_head,
        })
    }

    /// Runs the model on an `[n×d_input]` feature sequence and returns one
    /// prediction per position. `rng: Some` means training mode (dropout on);
    /// `None` is deterministic inference. In encoder_decoder mode the decoder
    /// generates greedily, feeding each prediction back as the next input.
    pub fn forward(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        match self.config.mode {
            ModelMode::EncoderRegression => {
                let memory = self.encode(tape, features, rng)?;
                self.head(tape, &memory)
            }
            ModelMode::EncoderDecoder => {
                let n = features.dims2("forward")?.0;
                let memory = self.encode(tape, features, rng.as_deref_mut())?;
                self.greedy_decode(tape, &memory, n, rng)
            }
        }
    }

    /// Teacher-forced decoder pass: the decoder consumes the target sequence
    /// shifted right by one (a zero start token), so prediction t sees only
    /// targets before t. This is the training path in encoder_decoder mode.
    pub fn forward_teacher_forced(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        targets: &Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        if self.decoder.is_empty() {
            return Err(ModelError::NoDecoder);
        }
        let n = targets.dims2("forward_teacher_forced")?.0;
        let memory = self.encode(tape, features, rng.as_deref_mut())?;
        let start = tape.constant(Tensor::zeros(vec![1, 1]));
        let shifted = if n == 1 {
            start
        } else {
            let prefix = tape.slice_rows(targets, 0, n - 1)?;
            tape.concat_rows(&[&start, &prefix])?
        };
        self.decode(tape, &memory, &shifted, rng)
    }

    /// Projects features, adds positional encodings, and runs the encoder
    /// stack. Output is `[n×d_model]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let (n, width) = features.dims2("encode")?;
        if width != self.config.d_input {
            return Err(ModelError::FeatureWidth {
                expected: self.config.d_input,
                got: width,
            });
        }
        if n > self.config.max_len {
            return Err(ModelError::SequenceTooLong {
                len: n,
                max_len: self.config.max_len,
            });
        }
        let mut x = self.project(tape, features, &self.input_proj, n)?;
        for layer in &self.encoder {
            x = encoder_layer_forward(
                tape,
                layer,
                &x,
                self.config.ln_eps,
                self.config.dropout,
                rng.as_deref_mut(),
            )?;
        }
        Ok(x)
    }

    fn decode(
        &self,
        tape: &mut Tape,
        memory: &Tensor,
        shifted_targets: &Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let proj = self.target_proj.as_ref().ok_or(ModelError::NoDecoder)?;
        let n = shifted_targets.dims2("decode")?.0;
        let mask = causal_mask(n);
        let mut x = self.project(tape, shifted_targets, proj, n)?;
        for layer in &self.decoder {
            x = decoder_layer_forward(
                tape,
                layer,
                &x,
                memory,
                &mask,
                self.config.ln_eps,
                self.config.dropout,
                rng.as_deref_mut(),
            )?;
        }
        self.head(tape, &x)
    }

    fn greedy_decode(
        &self,
        tape: &mut Tape,
        memory: &Tensor,
        n: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let mut produced: Vec<Tensor> = Vec::with_capacity(n);
        for t in 0..n {
            let start = tape.constant(Tensor::zeros(vec![1, 1]));
            let mut rows = vec![start];
            rows.extend(produced.iter().cloned());
            let refs: Vec<&Tensor> = rows.iter().collect();
            let dec_in = tape.concat_rows(&refs)?;
            let out = self.decode(tape, memory, &dec_in, rng.as_deref_mut())?;
            let last = tape.slice_rows(&out, t, 1)?;
            produced.push(last);
        }
        let refs: Vec<&Tensor> = produced.iter().collect();
        Ok(tape.concat_rows(&refs)?)
    }

    /// Linear projection plus positional encoding for the first `n` positions.
    fn project(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        proj: &Linear,
        n: usize,
    ) -> Result<Tensor, ModelError> {
        let projected = tape.matmul(x, &proj.weight)?;
        let bias = tape.repeat_rows(&proj.bias, n)?;
        let biased = tape.add(&projected, &bias)?;
        let positions = self.positional.rows_range(0, n)?;
        Ok(tape.add(&biased, &positions)?)
    }

    /// Per-position output head `[n×d_model] -> [n×1]`.
    fn head(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, ModelError> {
        let n = x.dims2("head")?.0;
        let out = tape.matmul(x, &self.output_head.weight)?;
        let bias = tape.repeat_rows(&self.output_head.bias, n)?;
        let out = tape.add(&out, &bias)?;
        match self.config.head {
            OutputHead::Linear => Ok(out),
            OutputHead::Sigmoid => Ok(tape.sigmoid(&out)?),
        }
    }
}

// ── building blocks ────────────────────────────────────────────────────

/// `softmax(Q·K^T/sqrt(d_k))·V`, with masked positions forced to ~0 weight.
/// Returns `(output [n×d_v], weights [n×m])`.
pub fn scaled_dot_product_attention(
    tape: &mut Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Mask>,
) -> Result<(Tensor, Tensor), ModelError> {
    let (n, d_k) = q.dims2("scaled_dot_product_attention")?;
    let (m, d_k_k) = k.dims2("scaled_dot_product_attention")?;
    if d_k != d_k_k {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "scaled_dot_product_attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        }));
    }
    let (m_v, _) = v.dims2("scaled_dot_product_attention")?;
    if m_v != m {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "scaled_dot_product_attention",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        }));
    }
    let k_t = tape.transpose(k)?;
    let scores = tape.matmul(q, &k_t)?;
    let scaled = tape.scale(&scores, 1.0 / (d_k as f64).sqrt())?;
    let masked = match mask {
        Some(mask) => {
            if mask.shape() != [n, m] {
                return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                    op: "scaled_dot_product_attention",
                    lhs: vec![n, m],
                    rhs: mask.shape().to_vec(),
                }));
            }
            tape.masked_fill(&scaled, mask, MASK_FILL)?
        }
        None => scaled,
    };
    let weights = tape.softmax_lastdim(&masked)?;
    let output = tape.matmul(&weights, v)?;
    Ok((output, weights))
}

/// h projected attention heads, concatenated on the feature axis and
/// projected by `w_o`.
pub fn multi_head_attention(
    tape: &mut Tape,
    mha: &MultiHeadAttention,
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
    mask: Option<&Mask>,
) -> Result<Tensor, ModelError> {
    let mut heads = Vec::with_capacity(mha.w_q.len());
    for ((wq, wk), wv) in mha.w_q.iter().zip(&mha.w_k).zip(&mha.w_v) {
        let q = tape.matmul(q_in, wq)?;
        let k = tape.matmul(k_in, wk)?;
        let v = tape.matmul(v_in, wv)?;
        let (out, _) = scaled_dot_product_attention(tape, &q, &k, &v, mask)?;
        heads.push(out);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let joined = tape.concat_lastdim(&refs)?;
    Ok(tape.matmul(&joined, &mha.w_o)?)
}

/// `relu(x·W1 + b1)·W2 + b2`, applied identically at every position.
pub fn position_wise_ffn(
    tape: &mut Tape,
    ffn: &FeedForward,
    x: &Tensor,
) -> Result<Tensor, ModelError> {
    let n = x.dims2("position_wise_ffn")?.0;
    let h = tape.matmul(x, &ffn.w1)?;
    let b1 = tape.repeat_rows(&ffn.b1, n)?;
    let h = tape.add(&h, &b1)?;
    let h = tape.relu(&h)?;
    let out = tape.matmul(&h, &ffn.w2)?;
    let b2 = tape.repeat_rows(&ffn.b2, n)?;
    Ok(tape.add(&out, &b2)?)
}

/// Residual wrapper `layer_norm(x + f(x))`. When training (rng present) and
/// `dropout > 0`, dropout applies to `f(x)` before the addition.
pub fn sublayer<F>(
    tape: &mut Tape,
    x: &Tensor,
    f: F,
    norm: &LayerNormParams,
    eps: f64,
    dropout: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor, ModelError>
where
    F: FnOnce(&mut Tape, &Tensor) -> Result<Tensor, ModelError>,
{
    let y = f(tape, x)?;
    if y.last_extent() != x.last_extent() {
        return Err(ModelError::SublayerWidth {
            expected: x.last_extent(),
            got: y.last_extent(),
        });
    }
    let y = match rng {
        Some(r) if dropout > 0.0 => tape.dropout(&y, dropout, r)?,
        _ => y,
    };
    let sum = tape.add(x, &y)?;
    Ok(tape.layer_norm(&sum, &norm.gamma, &norm.beta, eps)?)
}

/// One encoder layer: self-attention and feed-forward blocks, each wrapped
/// in residual + layer norm.
pub fn encoder_layer_forward(
    tape: &mut Tape,
    layer: &EncoderLayer,
    x: &Tensor,
    eps: f64,
    dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor, ModelError> {
    let attended = sublayer(
        tape,
        x,
        |t, xx| multi_head_attention(t, &layer.self_attn, xx, xx, xx, None),
        &layer.norm1,
        eps,
        dropout,
        rng.as_deref_mut(),
    )?;
    sublayer(
        tape,
        &attended,
        |t, xx| position_wise_ffn(t, &layer.ffn, xx),
        &layer.norm2,
        eps,
        dropout,
        rng,
    )
}

/// One decoder layer: causal self-attention, cross-attention over the
/// encoder output, then feed-forward; all residual + layer norm.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer_forward(
    tape: &mut Tape,
    layer: &DecoderLayer,
    x: &Tensor,
    memory: &Tensor,
    causal: &Mask,
    eps: f64,
    dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor, ModelError> {
    let self_attended = sublayer(
        tape,
        x,
        |t, xx| multi_head_attention(t, &layer.self_attn, xx, xx, xx, Some(causal)),
        &layer.norm1,
        eps,
        dropout,
        rng.as_deref_mut(),
    )?;
    let cross_attended = sublayer(
        tape,
        &self_attended,
        |t, xx| multi_head_attention(t, &layer.cross_attn, xx, memory, memory, None),
        &layer.norm2,
        eps,
        dropout,
        rng.as_deref_mut(),
    )?;
    sublayer(
        tape,
        &cross_attended,
        |t, xx| position_wise_ffn(t, &layer.ffn, xx),
        &layer.norm3,
        eps,
        dropout,
        rng,
    )
}

/// `[n×n]` mask where entry `(i, j)` is masked iff `j > i`.
pub fn causal_mask(n: usize) -> Mask {
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push(j > i);
        }
    }
    Mask::from_vec(vec![n, n], data).expect("n >= 1 gives a valid mask")
}

/// Sinusoidal position table `[max_len×d_model]`:
/// `pe[p, 2i] = sin(p/10000^(2i/d))`, `pe[p, 2i+1] = cos(same)`.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Result<Tensor, ModelError> {
    if d_model % 2 != 0 {
        return Err(ModelError::OddWidth { width: d_model });
    }
    let mut data = Vec::with_capacity(max_len * d_model);
    for p in 0..max_len {
        for i in 0..d_model / 2 {
            let rate = 10000f64.powf(2.0 * i as f64 / d_model as f64);
            let angle = p as f64 / rate;
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Ok(Tensor::from_vec(vec![max_len, d_model], data)?)
}

// ── parameter traversal ────────────────────────────────────────────────

impl Parameters for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl Parameters for MultiHeadAttention {
    fn visit_params(&self, f: &mut dyn FnMut(&Tensor)) {
        for t in self.w_q.iter().chain(&self.w_k).chain(&self.w_v) {
            f(t);
        }
        f(&self.w_o);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for t in self
            .w_q
            .iter_mut()
            .chain(&mut self.w_k)
            .chain(&mut self.w_v)
        {
            f(t);
        }
        f(&mut self.w_o);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        MultiHeadAttention {
            w_q: self.w_q.iter().map(|t| f(t)).collect(),
            w_k: self.w_k.iter().map(|t| f(t)).collect(),
            w_v: self.w_v.iter().map(|t| f(t)).collect(),
            w_o: f(&self.w_o),
        }
    }
}

impl Parameters for LayerNormParams {
    fn visit_params(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        LayerNormParams {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }
}

impl Parameters for FeedForward {
    fn visit_params(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.w1);
        f(&self.b1);
        f(&self.w2);
        f(&self.b2);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        FeedForward {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }
}

impl Parameters for EncoderLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&Tensor)) {
        self.self_attn.visit_params(f);
        self.norm1.visit_params(f);
        self.ffn.visit_params(f);
        self.norm2.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.self_attn.visit_params_mut(f);
        self.norm1.visit_params_mut(f);
        self.ffn.visit_params_mut(f);
        self.norm2.visit_params_mut(f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        EncoderLayer {
            self_attn: self.self_attn.map_params(f),
            norm1: self.norm1.map_params(f),
            ffn: self.ffn.map_params(f),
            norm2: self.norm2.map_params(f),
        }
    }
}

impl Parameters for DecoderLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&Tensor)) {
        self.self_attn.visit_params(f);
        self.norm1.visit_params(f);
        self.cross_attn.visit_params(f);
        self.norm2.visit_params(f);
        self.ffn.visit_params(f);
        self.norm3.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.self_attn.visit_params_mut(f);
        self.norm1.visit_params_mut(f);
        self.cross_attn.visit_params_mut(f);
        self.norm2.visit_params_mut(f);
        self.ffn.visit_params_mut(f);
        self.norm3.visit_params_mut(f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        DecoderLayer {
            self_attn: self.self_attn.map_params(f),
            norm1: self.norm1.map_params(f),
            cross_attn: self.cross_attn.map_params(f),
            norm2: self.norm2.map_params(f),
            ffn: self.ffn.map_params(f),
            norm3: self.norm3.map_params(f),
        }
    }
}

impl Parameters for AttentionModel {
    fn visit_params(&self, f: &mut dyn FnMut(&Tensor)) {
        self.input_proj.visit_params(f);
        if let Some(p) = &self.target_proj {
            p.visit_params(f);
        }
        for layer in &self.encoder {
            layer.visit_params(f);
        }
        for layer in &self.decoder {
            layer.visit_params(f);
        }
        self.output_head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.input_proj.visit_params_mut(f);
        if let Some(p) = &mut self.target_proj {
            p.visit_params_mut(f);
        }
        for layer in &mut self.encoder {
            layer.visit_params_mut(f);
        }
        for layer in &mut self.decoder {
            layer.visit_params_mut(f);
        }
        self.output_head.visit_params_mut(f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        AttentionModel {
            config: self.config.clone(),
            input_proj: self.input_proj.map_params(f),
            target_proj: self.target_proj.as_ref().map(|p| p.map_params(f)),
            positional: self.positional.clone(),
            encoder: self.encoder.iter().map(|l| l.map_params(f)).collect(),
            decoder: self.decoder.iter().map(|l| l.map_params(f)).collect(),
            output_head: self.output_head.map_params(f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::tape::LossKind;

    fn seeded(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (i, (g, w)) in got.iter().zip(want).enumerate() {
            assert!((g - w).abs() <= tol, "element {i}: got {g}, want {w}");
        }
    }

    #[test]
    fn single_key_attention_copies_the_value_row() {
        let mut tape = Tape::new();
        let q = Tensor::matrix(&[[0.3, -0.8]]);
        let k = Tensor::matrix(&[[1.0, 2.0]]);
        let v = Tensor::matrix(&[[5.0, 6.0, 7.0]]);
        let (out, w) = scaled_dot_product_attention(&mut tape, &q, &k, &v, None).unwrap();
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn zero_queries_average_the_values() {
        let mut tape = Tape::new();
        let q = Tensor::zeros(vec![2, 3]);
        let mut rng = seeded(5);
        let k = Tensor::uniform(vec![4, 3], -1.0, 1.0, &mut rng);
        let v = Tensor::matrix(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]);
        let (out, w) = scaled_dot_product_attention(&mut tape, &q, &k, &v, None).unwrap();
        for &wi in w.data() {
            assert!((wi - 0.25).abs() < 1e-12);
        }
        assert_close(out.data(), &[4.0, 5.0, 4.0, 5.0], 1e-12);
    }

    #[test]
    fn attention_matches_naive_loop_reference() {
        let mut rng = seeded(17);
        let q = Tensor::uniform(vec![3, 4], -1.5, 1.5, &mut rng);
        let k = Tensor::uniform(vec![3, 4], -1.5, 1.5, &mut rng);
        let v = Tensor::uniform(vec![3, 2], -1.5, 1.5, &mut rng);
        let mut tape = Tape::new();
        let (out, weights) = scaled_dot_product_attention(&mut tape, &q, &k, &v, None).unwrap();

        // naive per-row softmax then weighted sum
        let scale = 1.0 / 4f64.sqrt();
        let mut want_w = vec![0.0; 9];
        let mut want_o = vec![0.0; 6];
        for i in 0..3 {
            let mut scores = [0.0; 3];
            for j in 0..3 {
                for l in 0..4 {
                    scores[j] += q.data()[i * 4 + l] * k.data()[j * 4 + l];
                }
                scores[j] *= scale;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..3 {
                want_w[i * 3 + j] = exps[j] / sum;
                for c in 0..2 {
                    want_o[i * 2 + c] += exps[j] / sum * v.data()[j * 2 + c];
                }
            }
        }
        assert_close(weights.data(), &want_w, 1e-12);
        assert_close(out.data(), &want_o, 1e-12);
    }

    #[test]
    fn attention_rejects_mismatched_key_width_and_mask_shape() {
        let mut tape = Tape::new();
        let q = Tensor::zeros(vec![2, 3]);
        let k = Tensor::zeros(vec![2, 4]);
        let v = Tensor::zeros(vec![2, 2]);
        assert!(scaled_dot_product_attention(&mut tape, &q, &k, &v, None).is_err());

        let k = Tensor::zeros(vec![2, 3]);
        let wrong = causal_mask(3);
        assert!(scaled_dot_product_attention(&mut tape, &q, &k, &v, Some(&wrong)).is_err());
    }

    #[test]
    fn attention_weight_rows_sum_to_one_even_under_masking() {
        let mut rng = seeded(23);
        let q = Tensor::uniform(vec![5, 4], -2.0, 2.0, &mut rng);
        let k = Tensor::uniform(vec![5, 4], -2.0, 2.0, &mut rng);
        let v = Tensor::uniform(vec![5, 4], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let mask = causal_mask(5);
        let (_, w) = scaled_dot_product_attention(&mut tape, &q, &k, &v, Some(&mask)).unwrap();
        for i in 0..5 {
            let row = &w.data()[i * 5..(i + 1) * 5];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
            for (j, &wj) in row.iter().enumerate() {
                assert!((0.0..=1.0).contains(&wj));
                if j > i {
                    assert!(wj < 1e-30, "masked weight ({i},{j}) = {wj}");
                }
            }
        }
    }

    #[test]
    fn unit_key_width_skips_scaling() {
        // with d_k = 1 the 1/sqrt(d_k) divisor is the identity, so the
        // logits are exactly the products q_i * k_j
        let q = Tensor::matrix(&[[2.0], [-1.0]]);
        let k = Tensor::matrix(&[[3.0], [0.5]]);
        let v = Tensor::matrix(&[[1.0], [2.0]]);
        let mut tape = Tape::new();
        let (_, w) = scaled_dot_product_attention(&mut tape, &q, &k, &v, None).unwrap();
        for i in 0..2 {
            let logits = [q.data()[i] * k.data()[0], q.data()[i] * k.data()[1]];
            let max = logits[0].max(logits[1]);
            let e = [(logits[0] - max).exp(), (logits[1] - max).exp()];
            let sum = e[0] + e[1];
            assert_close(&w.data()[i * 2..(i + 1) * 2], &[e[0] / sum, e[1] / sum], 1e-15);
        }
    }

    #[test]
    fn identity_single_head_collapses_to_plain_attention() {
        let d = 4;
        let eye = {
            let mut data = vec![0.0; d * d];
            for i in 0..d {
                data[i * d + i] = 1.0;
            }
            Tensor::from_vec(vec![d, d], data).unwrap()
        };
        let mha = MultiHeadAttention {
            w_q: vec![eye.clone()],
            w_k: vec![eye.clone()],
            w_v: vec![eye.clone()],
            w_o: eye,
        };
        let mut rng = seeded(31);
        let x = Tensor::uniform(vec![3, d], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let via_mha = multi_head_attention(&mut tape, &mha, &x, &x, &x, None).unwrap();
        let (direct, _) = scaled_dot_product_attention(&mut tape, &x, &x, &x, None).unwrap();
        assert_close(via_mha.data(), direct.data(), 1e-12);
    }

    #[test]
    fn multi_head_output_shape_is_input_shape() {
        for h in [1usize, 2, 4] {
            let cfg = ModelConfig {
                d_model: 8,
                n_heads: h,
                d_k: 8 / h,
                d_v: 8 / h,
                ..ModelConfig::desk(1)
            };
            cfg.validate().unwrap();
            let mut rng = seeded(7);
            let mha = init_mha(&cfg, &mut rng);
            let x = Tensor::uniform(vec![5, 8], -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let y = multi_head_attention(&mut tape, &mha, &x, &x, &x, None).unwrap();
            assert_eq!(y.shape(), &[5, 8]);
        }
    }

    #[test]
    fn two_heads_match_hand_assembled_computation() {
        let cfg = ModelConfig {
            d_model: 4,
            n_heads: 2,
            d_k: 2,
            d_v: 2,
            ..ModelConfig::desk(1)
        };
        let mut rng = seeded(41);
        let mha = init_mha(&cfg, &mut rng);
        let x = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let got = multi_head_attention(&mut tape, &mha, &x, &x, &x, None).unwrap();

        let mut tape2 = Tape::new();
        let mut heads = Vec::new();
        for i in 0..2 {
            let q = tape2.matmul(&x, &mha.w_q[i]).unwrap();
            let k = tape2.matmul(&x, &mha.w_k[i]).unwrap();
            let v = tape2.matmul(&x, &mha.w_v[i]).unwrap();
            let (o, _) = scaled_dot_product_attention(&mut tape2, &q, &k, &v, None).unwrap();
            heads.push(o);
        }
        let joined = tape2.concat_lastdim(&[&heads[0], &heads[1]]).unwrap();
        let want = tape2.matmul(&joined, &mha.w_o).unwrap();
        assert_close(got.data(), want.data(), 1e-12);
    }

    #[test]
    fn ffn_zero_parameters_give_zero_output() {
        let ffn = FeedForward {
            w1: Tensor::zeros(vec![3, 6]),
            b1: Tensor::zeros(vec![6]),
            w2: Tensor::zeros(vec![6, 3]),
            b2: Tensor::zeros(vec![3]),
        };
        let mut tape = Tape::new();
        let x = Tensor::matrix(&[[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]);
        let y = position_wise_ffn(&mut tape, &ffn, &x).unwrap();
        assert_eq!(y.data(), &[0.0; 6]);
    }

    #[test]
    fn ffn_is_position_wise() {
        let cfg = ModelConfig {
            d_model: 4,
            n_heads: 2,
            d_k: 2,
            d_v: 2,
            d_ff: 8,
            ..ModelConfig::desk(1)
        };
        let mut rng = seeded(43);
        let ffn = init_ffn(&cfg, &mut rng);
        let x = Tensor::uniform(vec![4, 4], -1.0, 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let mut permuted = Vec::new();
        for &p in &perm {
            permuted.extend_from_slice(&x.data()[p * 4..(p + 1) * 4]);
        }
        let xp = Tensor::from_vec(vec![4, 4], permuted).unwrap();

        let mut tape = Tape::new();
        let y = position_wise_ffn(&mut tape, &ffn, &x).unwrap();
        let yp = position_wise_ffn(&mut tape, &ffn, &xp).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(
                &yp.data()[i * 4..(i + 1) * 4],
                &y.data()[p * 4..(p + 1) * 4],
                "row permutation must commute with the ffn"
            );
        }
    }

    #[test]
    fn ffn_matches_per_row_reference() {
        let cfg = ModelConfig {
            d_model: 3,
            n_heads: 1,
            d_k: 3,
            d_v: 3,
            d_ff: 5,
            ..ModelConfig::desk(1)
        };
        let mut rng = seeded(47);
        let ffn = init_ffn(&cfg, &mut rng);
        let x = Tensor::uniform(vec![4, 3], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let y = position_wise_ffn(&mut tape, &ffn, &x).unwrap();

        for r in 0..4 {
            let row = &x.data()[r * 3..(r + 1) * 3];
            let mut hidden = [0.0; 5];
            for j in 0..5 {
                for l in 0..3 {
                    hidden[j] += row[l] * ffn.w1.data()[l * 5 + j];
                }
                hidden[j] = (hidden[j] + ffn.b1.data()[j]).max(0.0);
            }
            for c in 0..3 {
                let mut out = ffn.b2.data()[c];
                for j in 0..5 {
                    out += hidden[j] * ffn.w2.data()[j * 3 + c];
                }
                assert!((y.data()[r * 3 + c] - out).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sublayer_with_zero_function_is_layer_norm() {
        let norm = LayerNormParams::unit(3);
        let x = Tensor::matrix(&[[2.0, 4.0, 6.0]]);
        let mut tape = Tape::new();
        let y = sublayer(
            &mut tape,
            &x,
            |t, xx| Ok(t.scale(xx, 0.0)?),
            &norm,
            1e-5,
            0.0,
            None,
        )
        .unwrap();
        let want = tape.layer_norm(&x, &norm.gamma, &norm.beta, 1e-5).unwrap();
        assert_eq!(y.data(), want.data());
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn sublayer_residual_path_carries_gradient() {
        // f contributes nothing (zero scale) but the residual still moves
        let x = Tensor::matrix(&[[0.4, -0.2, 0.9], [1.0, 0.3, -0.5]]);
        let target = Tensor::filled(vec![2, 3], 0.3);
        let err = grad_check(
            |tape, inputs| {
                let norm = LayerNormParams::unit(3);
                let y = sublayer(tape, &inputs[0], |t, xx| Ok(t.scale(xx, 0.0)?), &norm, 1e-5, 0.0, None)
                    .map_err(|e| TensorError::Invalid {
                        op: "sublayer",
                        msg: e.to_string(),
                    })?;
                tape.loss(&y, &target, LossKind::Mse)
            },
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");

        let mut tape = Tape::new();
        let tracked = tape.leaf(x);
        let norm = LayerNormParams::unit(3);
        let y = sublayer(&mut tape, &tracked, |t, xx| Ok(t.scale(xx, 0.0)?), &norm, 1e-5, 0.0, None)
            .unwrap();
        let l = tape
            .loss(&y, &Tensor::filled(vec![2, 3], 0.3), LossKind::Mse)
            .unwrap();
        let grads = tape.backward(&l).unwrap();
        assert!(grads.grad(&tracked).unwrap().data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn causal_mask_examples() {
        assert_eq!(causal_mask(1).data(), &[false]);
        assert_eq!(
            causal_mask(3).data(),
            &[false, true, true, false, false, true, false, false, false]
        );
        let n = 7;
        let mask = causal_mask(n);
        for i in 0..n {
            let masked = mask.data()[i * n..(i + 1) * n].iter().filter(|&&m| m).count();
            assert_eq!(masked, n - 1 - i, "row {i}");
        }
    }

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encoding(8, 6).unwrap();
        // row p = 0 alternates sin 0 = 0, cos 0 = 1
        assert_eq!(&pe.data()[0..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[6] - 1f64.sin()).abs() < 1e-12, "pe[1,0] = sin 1");
        assert!(pe.data().iter().all(|&e| (-1.0..=1.0).contains(&e)));
        assert!(matches!(
            positional_encoding(4, 5),
            Err(ModelError::OddWidth { width: 5 })
        ));
    }

    #[test]
    fn forward_has_one_output_per_position() {
        let cfg = ModelConfig {
            d_model: 16,
            d_k: 4,
            d_v: 4,
            d_ff: 32,
            ..ModelConfig::desk(2)
        };
        let model = AttentionModel::init(cfg, 9).unwrap();
        let mut rng = seeded(1);
        let x = Tensor::uniform(vec![6, 2], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let y = model.forward(&mut tape, &x, None).unwrap();
        assert_eq!(y.shape(), &[6, 1]);
    }

    #[test]
    fn forward_validates_width_and_length() {
        let mut cfg = ModelConfig::desk(1);
        cfg.max_len = 4;
        let model = AttentionModel::init(cfg, 2).unwrap();
        let mut tape = Tape::new();
        let wide = Tensor::zeros(vec![3, 2]);
        assert!(matches!(
            model.forward(&mut tape, &wide, None).unwrap_err(),
            ModelError::FeatureWidth { expected: 1, got: 2 }
        ));
        let long = Tensor::zeros(vec![5, 1]);
        assert!(matches!(
            model.forward(&mut tape, &long, None).unwrap_err(),
            ModelError::SequenceTooLong { len: 5, max_len: 4 }
        ));
    }

    #[test]
    fn inference_forward_is_deterministic() {
        let model = AttentionModel::init(ModelConfig::desk(1), 33).unwrap();
        let x = Tensor::matrix(&[[0.1], [0.5], [0.9]]);
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = model.forward(&mut t1, &x, None).unwrap();
        let b = model.forward(&mut t2, &x, None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn teacher_forced_decoder_ignores_future_targets() {
        let cfg = ModelConfig {
            mode: ModelMode::EncoderDecoder,
            d_model: 16,
            d_k: 4,
            d_v: 4,
            d_ff: 32,
            n_encoder_layers: 1,
            n_decoder_layers: 2,
            ..ModelConfig::desk(1)
        };
        let model = AttentionModel::init(cfg, 55).unwrap();

        let features = Tensor::matrix(&[[0.2], [0.4], [0.6], [0.8]]);
        let targets = Tensor::matrix(&[[0.1], [0.2], [0.3], [0.4]]);
        // targets[2] becomes decoder input position 3 after the shift, so the
        // causal mask must keep predictions 0..=2 bit-identical
        let mut perturbed = targets.data().to_vec();
        perturbed[2] = 99.0;

        let mut t1 = Tape::new();
        let a = model
            .forward_teacher_forced(&mut t1, &features, &targets, None)
            .unwrap();
        let mut t2 = Tape::new();
        let b = model
            .forward_teacher_forced(
                &mut t2,
                &features,
                &Tensor::from_vec(vec![4, 1], perturbed).unwrap(),
                None,
            )
            .unwrap();

        for t in 0..3 {
            assert_eq!(a.data()[t], b.data()[t], "prediction {t} changed");
        }
        assert_ne!(a.data()[3], b.data()[3], "prediction 3 should see input 3");
    }

    #[test]
    fn greedy_generation_matches_sequence_length() {
        let cfg = ModelConfig {
            mode: ModelMode::EncoderDecoder,
            d_model: 8,
            d_k: 2,
            d_v: 2,
            d_ff: 16,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            ..ModelConfig::desk(1)
        };
        let model = AttentionModel::init(cfg, 77).unwrap();
        let x = Tensor::matrix(&[[0.1], [0.2], [0.3]]);
        let mut tape = Tape::new();
        let y = model.forward(&mut tape, &x, None).unwrap();
        assert_eq!(y.shape(), &[3, 1]);
        assert!(y.is_finite());
    }

    #[test]
    fn sigmoid_head_keeps_outputs_in_unit_interval() {
        let cfg = ModelConfig {
            head: OutputHead::Sigmoid,
            d_model: 16,
            d_k: 4,
            d_v: 4,
            d_ff: 32,
            ..ModelConfig::desk(1)
        };
        let model = AttentionModel::init(cfg, 12).unwrap();
        let x = Tensor::matrix(&[[0.0], [5.0], [-5.0], [1.0]]);
        let mut tape = Tape::new();
        let y = model.forward(&mut tape, &x, None).unwrap();
        assert!(y.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn full_scale_config_is_valid() {
        let cfg = ModelConfig::full_scale(1);
        cfg.validate().unwrap();
        assert_eq!(cfg.d_model, 512);
        assert_eq!(cfg.n_encoder_layers, 6);
        assert_eq!(cfg.n_decoder_layers, 6);
        assert_eq!(cfg.mode, ModelMode::EncoderDecoder);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = AttentionModel::init(ModelConfig::desk(1), 4).unwrap();
        let b = AttentionModel::init(ModelConfig::desk(1), 4).unwrap();
        let c = AttentionModel::init(ModelConfig::desk(1), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.collect_params(), c.collect_params());
    }

    #[test]
    fn init_draws_are_centred() {
        // one 128x128 matrix gives >10^4 draws; Xavier-uniform is zero-mean
        let mut rng = seeded(99);
        let w = xavier(128, 128, &mut rng);
        let mean = w.data().iter().sum::<f64>() / w.numel() as f64;
        assert!(mean.abs() < 0.01, "empirical mean {mean}");
    }

    #[test]
    fn encoder_layer_gradients_survive_a_finite_difference_check() {
        let cfg = ModelConfig {
            d_input: 1,
            d_model: 8,
            n_heads: 2,
            d_k: 4,
            d_v: 4,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ff: 16,
            dropout: 0.0,
            max_len: 16,
            mode: ModelMode::EncoderRegression,
            head: OutputHead::Linear,
            ln_eps: 1e-5,
        };
        let mut rng = seeded(13);
        let layer = EncoderLayer {
            self_attn: init_mha(&cfg, &mut rng),
            norm1: LayerNormParams::unit(8),
            ffn: init_ffn(&cfg, &mut rng),
            norm2: LayerNormParams::unit(8),
        };
        let x = Tensor::uniform(vec![4, 8], -1.0, 1.0, &mut rng);
        let target = Tensor::uniform(vec![4, 8], -1.0, 1.0, &mut rng);

        let inputs = {
            let mut v = vec![x];
            v.extend(layer.collect_params());
            v
        };
        let err = grad_check(
            move |tape, tracked| {
                let mut it = tracked[1..].iter().cloned();
                let bound = layer.map_params(&mut |_| it.next().expect("arity"));
                let y = encoder_layer_forward(tape, &bound, &tracked[0], 1e-5, 0.0, None).map_err(
                    |e| TensorError::Invalid {
                        op: "encoder_layer",
                        msg: e.to_string(),
                    },
                )?;
                tape.loss(&y, &target, LossKind::Mse)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }
}
