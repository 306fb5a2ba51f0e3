//! Encoder-decoder transformer.
//!
//! The encoder subsamples feature frames with two strided 1-D convolutions
//! and runs pre-norm self-attention blocks. The decoder reads a token
//! sequence that may contain `MASK` and predicts every position in one
//! parallel pass; its self-attention is bidirectional (sequences are packed,
//! so there is no padding to hide).

use nar_tensor::{AttentionWeights, Float, Segments, Tape, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::vocab::{TokenId, Vocabulary};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_blocks: usize,
    pub n_decoder_blocks: usize,
    pub feedforward_dim: usize,
    pub subsample_factor: usize,
    /// Includes the special tokens.
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            d_model: 64,
            n_heads: 2,
            n_encoder_blocks: 2,
            n_decoder_blocks: 2,
            feedforward_dim: 128,
            subsample_factor: 2,
            vocab_size: 35,
            max_positions: 256,
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let problems = [
            (self.feature_dim == 0, "feature_dim must be positive"),
            (self.n_heads == 0 || self.d_model % self.n_heads != 0, "d_model must be divisible by n_heads"),
            (self.d_model % 2 != 0, "d_model must be even"),
            (self.feedforward_dim == 0, "feedforward_dim must be positive"),
            (self.subsample_factor == 0, "subsample_factor must be positive"),
            (self.vocab_size < 4, "vocab_size must be >= 4"),
            (self.max_positions == 0, "max_positions must be positive"),
            (!(0.0..1.0).contains(&self.dropout_rate), "dropout_rate must lie in [0, 1)"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::Config(format!("model: {msg}"))),
            None => Ok(()),
        }
    }

    /// Kernel width of the strided convolution; covers the whole stride.
    pub fn subsample_kernel(&self) -> usize {
        2 * self.subsample_factor.div_ceil(2) + 1
    }

    pub fn subsampled_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.subsample_factor)
    }
}

/// Sinusoidal position table: `sin(p / 10000^(2i/d))` in even columns and the
/// matching cosine in odd columns.
pub fn positional_encoding<T: Float>(len: usize, d_model: usize, max_positions: usize) -> Result<Tensor<T>> {
    if len > max_positions {
        return Err(Error::Input(format!("sequence of {len} positions exceeds max_positions {max_positions}")));
    }
    if len == 0 || d_model == 0 {
        return Err(Error::Input("positional encoding needs a positive shape".into()));
    }
    Ok(Tensor::from_fn(&[len, d_model], |i| {
        let (p, c) = (i / d_model, i % d_model);
        let freq = 10000f64.powf(-((c - c % 2) as f64) / d_model as f64);
        let a = p as f64 * freq;
        T::from_f64_lossy(if c % 2 == 0 { a.sin() } else { a.cos() })
    }))
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttentionParams {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    ln_attn: Norm,
    attn: AttentionParams,
    ln_ff: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ln_self: Norm,
    self_attn: AttentionParams,
    ln_cross: Norm,
    cross_attn: AttentionParams,
    ln_ff: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    conv1: Linear,
    conv2: Linear,
    encoder: Vec<EncoderBlock>,
    encoder_norm: Norm,
    embedding: usize,
    decoder: Vec<DecoderBlock>,
    decoder_norm: Norm,
    output: Linear,
}

struct Builder<'r, T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    rng: &'r mut Rng,
}

impl<T: Float> Builder<'_, T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(&[fan_in, fan_out], |_| T::from_f64_lossy(rng.random_range(-limit..limit)));
        Linear {
            w: self.push(format!("{name}.weight"), w),
            b: self.push(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.push(format!("{name}.gain"), Tensor::full(&[d], T::one())),
            bias: self.push(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> AttentionParams {
        AttentionParams {
            q: self.linear(&format!("{name}.query"), d, d),
            k: self.linear(&format!("{name}.key"), d, d),
            v: self.linear(&format!("{name}.value"), d, d),
            o: self.linear(&format!("{name}.out"), d, d),
        }
    }

    fn feed_forward(&mut self, name: &str, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, hidden),
            down: self.linear(&format!("{name}.down"), hidden, d),
        }
    }
}

fn build_layout<T: Float>(cfg: &ModelConfig, b: &mut Builder<'_, T>) -> Layout {
    let d = cfg.d_model;
    let conv1 = b.linear("encoder.conv1", cfg.subsample_kernel() * cfg.feature_dim, d);
    let conv2 = b.linear("encoder.conv2", 3 * d, d);
    let encoder = (0..cfg.n_encoder_blocks)
        .map(|i| EncoderBlock {
            ln_attn: b.norm(&format!("encoder.{i}.ln_attn"), d),
            attn: b.attention(&format!("encoder.{i}.attn"), d),
            ln_ff: b.norm(&format!("encoder.{i}.ln_ff"), d),
            ff: b.feed_forward(&format!("encoder.{i}.ff"), d, cfg.feedforward_dim),
        })
        .collect();
    let encoder_norm = b.norm("encoder.ln_out", d);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let rng = &mut *b.rng;
    let table = Tensor::from_fn(&[cfg.vocab_size, d], |_| T::from_f64_lossy(normal.sample(rng)));
    let embedding = b.push("decoder.embedding".into(), table);
    let decoder = (0..cfg.n_decoder_blocks)
        .map(|i| DecoderBlock {
            ln_self: b.norm(&format!("decoder.{i}.ln_self"), d),
            self_attn: b.attention(&format!("decoder.{i}.self_attn"), d),
            ln_cross: b.norm(&format!("decoder.{i}.ln_cross"), d),
            cross_attn: b.attention(&format!("decoder.{i}.cross_attn"), d),
            ln_ff: b.norm(&format!("decoder.{i}.ln_ff"), d),
            ff: b.feed_forward(&format!("decoder.{i}.ff"), d, cfg.feedforward_dim),
        })
        .collect();
    let decoder_norm = b.norm("decoder.ln_out", d);
    let output = b.linear("decoder.output", d, cfg.vocab_size);
    Layout {
        conv1,
        conv2,
        encoder,
        encoder_norm,
        embedding,
        decoder,
        decoder_norm,
        output,
    }
}

/// Parameters plus the fixed architecture that consumes them.
#[derive(Debug, Clone)]
pub struct Transformer<T> {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    positions: Tensor<T>,
}

impl<T: Float> Transformer<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init", 0);
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: &mut rng,
        };
        let layout = build_layout(&config, &mut b);
        let (names, params) = (b.names, b.tensors);
        let positions = positional_encoding(config.max_positions, config.d_model, config.max_positions)?;
        Ok(Transformer {
            config,
            layout,
            names,
            params,
            positions,
        })
    }

    /// Rebuilds a model from named tensors (e.g. a checkpoint). Names and
    /// shapes must match the architecture implied by `config` exactly.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for ((name, t), (want, slot)) in tensors.into_iter().zip(model.names.iter().zip(&mut model.params)) {
            if &name != want || t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} {:?} does not match expected {want} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Float>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            positions: self.positions.cast(),
        }
    }

    /// Records every parameter on `tape`. With `trainable` the leaves collect
    /// gradients, and [`Bound::grads_into`] moves them back into the model.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound<'_, T> {
        let vars = self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect();
        Bound { model: self, vars }
    }
}

/// Dropout switch for a forward pass; inactive without a generator.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut Rng>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'r mut Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    fn apply<T: Float>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - self.rate));
        let factors = (0..tape.value(x).len())
            .map(|_| if rng.random_bool(self.rate) { T::zero() } else { keep })
            .collect();
        Ok(tape.mul_const(x, factors)?)
    }
}

/// Encoder output for a packed set of utterances.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub hidden: Var,
    pub segments: Segments,
    /// Per subsampled position: false when it covers only padding. Packed
    /// input has no padding, so every entry is true.
    pub valid: Vec<bool>,
}

/// Model parameters recorded on a tape.
pub struct Bound<'m, T> {
    model: &'m Transformer<T>,
    vars: Vec<Var>,
}

impl<'m, T: Float> Bound<'m, T> {
    pub fn model(&self) -> &'m Transformer<T> {
        self.model
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Accumulates leaf gradients from the last backward pass into the
    /// model's gradient buffers.
    pub fn grads_into(&self, tape: &Tape<T>, model: &mut Transformer<T>) -> Result<()> {
        for (&v, p) in self.vars.iter().zip(model.params_mut()) {
            if let Some(g) = tape.grad(v) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn linear(&self, tape: &mut Tape<T>, l: Linear, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.vars[l.w])?;
        Ok(tape.add_row(y, self.vars[l.b])?)
    }

    fn norm(&self, tape: &mut Tape<T>, n: Norm, x: Var) -> Result<Var> {
        let eps = T::from_f64_lossy(LN_EPS);
        Ok(tape.layer_norm(x, self.vars[n.gain], self.vars[n.bias], eps)?)
    }

    fn feed_forward(&self, tape: &mut Tape<T>, ff: FeedForward, x: Var) -> Result<Var> {
        let h = self.linear(tape, ff.up, x)?;
        let h = tape.relu(h);
        self.linear(tape, ff.down, h)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape<T>,
        p: AttentionParams,
        queries: Var,
        keys: Var,
        q_segments: &Segments,
        k_segments: &Segments,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.linear(tape, p.q, queries)?;
        let k = self.linear(tape, p.k, keys)?;
        let v = self.linear(tape, p.v, keys)?;
        let heads = self.model.config.n_heads;
        let ctx = tape.attention(q, k, v, heads, q_segments, k_segments, key_valid)?;
        self.linear(tape, p.o, ctx)
    }

    fn add_positions(&self, tape: &mut Tape<T>, x: Var, segments: &Segments) -> Result<Var> {
        let max = self.model.config.max_positions;
        let mut rows = Vec::with_capacity(segments.total());
        for len in segments.lengths() {
            if len > max {
                return Err(Error::Input(format!("sequence of {len} positions exceeds max_positions {max}")));
            }
            rows.extend(0..len);
        }
        let table = tape.constant(self.model.positions.clone());
        let pe = tape.gather(table, &rows)?;
        Ok(tape.add(x, pe)?)
    }

    /// Encodes packed frames `[Σ T_in, feature_dim]`; returns
    /// `ceil(T_in / subsample_factor)` positions per utterance.
    pub fn encode(&self, tape: &mut Tape<T>, frames: Var, segments: &Segments, dropout: &mut Dropout) -> Result<Encoded> {
        let cfg = &self.model.config;
        let lay = &self.model.layout;
        if segments.lengths().contains(&0) || segments.is_empty() {
            return Err(Error::Input("empty frame sequence".into()));
        }
        if tape.value(frames).cols() != cfg.feature_dim {
            return Err(Error::Input(format!(
                "frames have {} features, model expects {}",
                tape.value(frames).cols(),
                cfg.feature_dim
            )));
        }
        let (x, segs) = tape.unfold(frames, segments, cfg.subsample_kernel(), cfg.subsample_factor)?;
        let x = self.linear(tape, lay.conv1, x)?;
        let x = tape.relu(x);
        let (x, segs) = tape.unfold(x, &segs, 3, 1)?;
        let x = self.linear(tape, lay.conv2, x)?;
        let x = tape.relu(x);
        let mut x = self.add_positions(tape, x, &segs)?;
        x = dropout.apply(tape, x)?;
        for block in &lay.encoder {
            let h = self.norm(tape, block.ln_attn, x)?;
            let h = self.attention(tape, block.attn, h, h, &segs, &segs, None)?;
            let h = dropout.apply(tape, h)?;
            x = tape.add(x, h)?;
            let h = self.norm(tape, block.ln_ff, x)?;
            let h = self.feed_forward(tape, block.ff, h)?;
            let h = dropout.apply(tape, h)?;
            x = tape.add(x, h)?;
        }
        let hidden = self.norm(tape, lay.encoder_norm, x)?;
        Ok(Encoded {
            hidden,
            valid: vec![true; segs.total()],
            segments: segs,
        })
    }

    /// Decoder logits `[Σ T_out, vocab_size]` for packed token sequences;
    /// segment `i` of `tokens` attends to utterance `i` of `enc`.
    pub fn decode(
        &self,
        tape: &mut Tape<T>,
        enc: &Encoded,
        tokens: &[TokenId],
        segments: &Segments,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let cfg = &self.model.config;
        let lay = &self.model.layout;
        if segments.total() != tokens.len() || segments.len() != enc.segments.len() {
            return Err(Error::Input("token segments do not match the encoded batch".into()));
        }
        if segments.lengths().contains(&0) {
            return Err(Error::Input("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let x = tape.gather(self.vars[lay.embedding], &ids)?;
        let mut x = self.add_positions(tape, x, segments)?;
        x = dropout.apply(tape, x)?;
        for block in &lay.decoder {
            let h = self.norm(tape, block.ln_self, x)?;
            let h = self.attention(tape, block.self_attn, h, h, segments, segments, None)?;
            let h = dropout.apply(tape, h)?;
            x = tape.add(x, h)?;
            let h = self.norm(tape, block.ln_cross, x)?;
            let h = self.attention(tape, block.cross_attn, h, enc.hidden, segments, &enc.segments, Some(&enc.valid))?;
            let h = dropout.apply(tape, h)?;
            x = tape.add(x, h)?;
            let h = self.norm(tape, block.ln_ff, x)?;
            let h = self.feed_forward(tape, block.ff, h)?;
            let h = dropout.apply(tape, h)?;
            x = tape.add(x, h)?;
        }
        let x = self.norm(tape, lay.decoder_norm, x)?;
        self.linear(tape, lay.output, x)
    }
}

/// Per-position vocabulary posteriors of one decoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    vocab: usize,
    probs: Vec<f64>,
}

impl PosteriorGrid {
    pub fn new(vocab: usize, probs: Vec<f64>) -> Result<Self> {
        if vocab == 0 || probs.is_empty() || probs.len() % vocab != 0 {
            return Err(Error::Input(format!("{} probabilities do not form rows of {vocab}", probs.len())));
        }
        Ok(PosteriorGrid { vocab, probs })
    }

    /// Row-wise softmax of logits.
    pub fn from_logits<T: Float>(logits: &Tensor<T>) -> Result<Self> {
        let p = logits.softmax(logits.shape().len() - 1)?;
        Self::new(logits.cols(), p.data().iter().map(|x| x.to_f64_lossy()).collect())
    }

    pub fn len(&self) -> usize {
        self.probs.len() / self.vocab
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks_exact(self.vocab)
    }

    /// Rows `start..end` as a new grid.
    pub fn slice(&self, start: usize, end: usize) -> PosteriorGrid {
        PosteriorGrid {
            vocab: self.vocab,
            probs: self.probs[start * self.vocab..end * self.vocab].to_vec(),
        }
    }
}

/// Whether the decoder may emit `id` (everything but `MASK` and `PAD`).
pub fn is_legal_output(id: usize) -> bool {
    id != Vocabulary::MASK as usize && id != Vocabulary::PAD as usize
}

/// Per-utterance encoder states cached for repeated decoder passes.
pub struct EncoderCache<T> {
    hidden: Vec<Tensor<T>>,
}

impl<T: Float> EncoderCache<T> {
    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn hidden(&self, utterance: usize) -> &Tensor<T> {
        &self.hidden[utterance]
    }
}

impl<T: Float> Transformer<T> {
    /// Inference-mode encoding of each utterance's frames, one at a time so
    /// results do not depend on which utterances share a batch.
    pub fn encode_frames(&self, frames: &[&Tensor<f32>]) -> Result<EncoderCache<T>> {
        let hidden = frames
            .iter()
            .map(|f| {
                let mut tape = Tape::new();
                let bound = self.bind(&mut tape, false);
                let x = tape.constant(f.cast());
                let enc = bound.encode(&mut tape, x, &Segments::single(f.rows()), &mut Dropout::off())?;
                Ok(tape.value(enc.hidden).clone())
            })
            .collect::<Result<_>>()?;
        Ok(EncoderCache { hidden })
    }

    /// One inference decoder pass for several `(utterance, tokens)` requests,
    /// packed into a single forward.
    pub fn posteriors(&self, cache: &EncoderCache<T>, requests: &[(usize, &[TokenId])]) -> Result<Vec<PosteriorGrid>> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut hidden = Vec::new();
        let mut enc_lens = Vec::with_capacity(requests.len());
        let mut tokens = Vec::new();
        let mut tok_lens = Vec::with_capacity(requests.len());
        for &(u, toks) in requests {
            let h = cache
                .hidden
                .get(u)
                .ok_or_else(|| Error::Input(format!("no encoder state for utterance {u}")))?;
            hidden.extend_from_slice(h.data());
            enc_lens.push(h.rows());
            tokens.extend_from_slice(toks);
            tok_lens.push(toks.len());
        }
        let enc_segments = Segments::from_lengths(&enc_lens);
        let h = tape.constant(Tensor::new(vec![enc_segments.total(), self.config.d_model], hidden)?);
        let enc = Encoded {
            hidden: h,
            valid: vec![true; enc_segments.total()],
            segments: enc_segments,
        };
        let segments = Segments::from_lengths(&tok_lens);
        let logits = bound.decode(&mut tape, &enc, &tokens, &segments, &mut Dropout::off())?;
        let grid = PosteriorGrid::from_logits(tape.value(logits))?;
        Ok(segments.ranges().map(|r| grid.slice(r.start, r.end)).collect())
    }

    /// Cross-attention weights of decoder block `block` for one utterance.
    pub fn cross_attention_weights(
        &self,
        frames: &Tensor<f32>,
        tokens: &[TokenId],
        block: usize,
    ) -> Result<AttentionWeights<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(frames.cast());
        let enc = bound.encode(&mut tape, x, &Segments::single(frames.rows()), &mut Dropout::off())?;
        let first = tape.len();
        bound.decode(&mut tape, &enc, tokens, &Segments::single(tokens.len()), &mut Dropout::off())?;
        // each decoder block records self-attention then cross-attention
        let found = tape
            .attention_records()
            .filter(|(v, _)| v.index() >= first)
            .nth(2 * block + 1)
            .map(|(_, w)| w.clone());
        found.ok_or_else(|| Error::Input(format!("decoder has no block {block}")))
    }
}

/// Plain single-head attention of `queries` over `hidden`:
/// `context_t = Σ_t' w[t, t'] · hidden_t'`.
pub fn cross_attention<T: Float>(
    queries: &Tensor<T>,
    hidden: &Tensor<T>,
    key_valid: &[bool],
) -> Result<(Tensor<T>, AttentionWeights<T>)> {
    let mut tape = Tape::new();
    let q = tape.constant(queries.clone());
    let h = tape.constant(hidden.clone());
    let qs = Segments::single(queries.rows());
    let ks = Segments::single(hidden.rows());
    let out = tape.attention(q, h, h, 1, &qs, &ks, Some(key_valid))?;
    let weights = tape.attention_weights(out).expect("attention node").clone();
    Ok((tape.value(out).clone(), weights))
}
