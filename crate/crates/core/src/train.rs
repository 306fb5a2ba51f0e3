//! Masked training objectives and the training loop.
//!
//! Both frameworks decode a target of `S` slots: the reference tokens, their
//! EOS, and a random number of extra EOS filler slots. The fillers teach the
//! decoder to place EOS from the audio rather than from the slot count, which
//! length inference from an over-long all-`MASK` hypothesis relies on.

use nar_tensor::{Adam, AdamConfig, Segments, Tape, Tensor, Var};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::decode::{DecodeConfig, LengthMode, Strategy};
use crate::error::{Error, Result};
use crate::eval::{corpus_cer, decode_utterances, reference_pairs};
use crate::model::{Bound, Dropout, Encoded, PosteriorGrid, Transformer};
use crate::rng::{self, Rng};
use crate::synth::Utterance;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    Cmlm,
    Fmlm,
}

impl Framework {
    pub fn name(self) -> &'static str {
        match self {
            Framework::Cmlm => "cmlm",
            Framework::Fmlm => "fmlm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub framework: Framework,
    pub label_smoothing: f64,
    /// Upper bound of the uniform number of EOS filler slots per target.
    pub max_extra_slots: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Dev utterances used for the per-epoch error rate; 0 uses all.
    pub val_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            base_lr: 1.0,
            warmup_steps: 1000,
            seed: 1,
            framework: Framework::Cmlm,
            label_smoothing: 0.0,
            max_extra_slots: 12,
            grad_clip: 5.0,
            val_size: 200,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let problems = [
            (self.batch_size == 0, "batch_size must be >= 1"),
            (self.warmup_steps == 0, "warmup_steps must be >= 1"),
            (!(self.base_lr > 0.0), "base_lr must be positive"),
            (!(0.0..1.0).contains(&self.label_smoothing), "label_smoothing must lie in [0, 1)"),
            (!(self.grad_clip >= 0.0), "grad_clip must be >= 0"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::Config(format!("train: {msg}"))),
            None => Ok(()),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// `base · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn warmup_lr(step: usize, base_lr: f64, warmup_steps: usize, d_model: usize) -> Result<f64> {
    if step == 0 || warmup_steps == 0 {
        return Err(Error::Input("warmup schedule is defined for step >= 1".into()));
    }
    let s = step as f64;
    let rise = s * (warmup_steps as f64).powf(-1.5);
    Ok(base_lr * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(rise))
}

/// Split of the target slots into masked (`T_M`) and unmasked (`T_U`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPartition {
    pub masked: Vec<bool>,
}

impl MaskPartition {
    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.masked[p]).collect()
    }

    pub fn unmasked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| !self.masked[p]).collect()
    }
}

/// Mask count uniform on `1..=len`, then positions uniform without
/// replacement.
pub fn sample_cmlm_partition(len: usize, rng: &mut Rng) -> Result<MaskPartition> {
    if len == 0 {
        return Err(Error::Input("cannot mask an empty target".into()));
    }
    let count = rng.random_range(1..=len);
    let mut masked = vec![false; len];
    for p in index::sample(rng, len, count) {
        masked[p] = true;
    }
    Ok(MaskPartition { masked })
}

/// Number of low-confidence positions left for the second pass, uniform on
/// `0..=len`.
pub fn sample_fmlm_split(len: usize, rng: &mut Rng) -> usize {
    rng.random_range(0..=len)
}

/// Which pass supervises each position of one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FmlmPassPlan {
    /// True for positions in `Z1`: loss from pass 1, ground truth fed to
    /// pass 2. False positions stay `MASK` and take their loss from pass 2.
    pub from_first: Vec<bool>,
}

impl FmlmPassPlan {
    /// Sorts positions by ascending confidence (ties: lower index first) and
    /// puts all but the `split` least confident into `Z1`.
    pub fn from_confidences(conf: &[f64], split: usize) -> Self {
        let mut order: Vec<usize> = (0..conf.len()).collect();
        order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]).then(a.cmp(&b)));
        let mut from_first = vec![false; conf.len()];
        for &p in order.iter().skip(split.min(conf.len())) {
            from_first[p] = true;
        }
        FmlmPassPlan { from_first }
    }

    pub fn first_positions(&self) -> Vec<usize> {
        (0..self.from_first.len()).filter(|&p| self.from_first[p]).collect()
    }
}

/// Packed decoder targets for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBatch {
    pub tokens: Vec<TokenId>,
    pub segments: Segments,
}

impl TargetBatch {
    pub fn new(targets: &[Vec<TokenId>]) -> Result<Self> {
        if targets.is_empty() || targets.iter().any(Vec::is_empty) {
            return Err(Error::Input("batch needs non-empty targets".into()));
        }
        let lens: Vec<usize> = targets.iter().map(Vec::len).collect();
        Ok(TargetBatch {
            tokens: targets.concat(),
            segments: Segments::from_lengths(&lens),
        })
    }

    pub fn target(&self, i: usize) -> &[TokenId] {
        &self.tokens[self.segments.range(i)]
    }

    fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|&t| t as usize).collect()
    }
}

/// Reference tokens followed by `extra` EOS filler slots.
pub fn extend_with_fillers(tokens: &[TokenId], extra: usize) -> Vec<TokenId> {
    let mut t = tokens.to_vec();
    t.extend(std::iter::repeat_n(Vocabulary::EOS, extra));
    t
}

pub struct CmlmOutput {
    pub loss: Var,
    pub logits: Var,
    pub partitions: Vec<MaskPartition>,
}

/// Masked-LM loss: masked slots are replaced by `MASK` and only they carry
/// loss weight. `rngs[i]` drives utterance `i`'s partition.
#[allow(clippy::too_many_arguments)]
pub fn cmlm_loss(
    bound: &Bound<'_, f32>,
    tape: &mut Tape<f32>,
    enc: &Encoded,
    targets: &TargetBatch,
    rngs: &mut [Rng],
    dropout: &mut Dropout,
    smoothing: f64,
) -> Result<CmlmOutput> {
    let partitions = (0..targets.segments.len())
        .map(|i| sample_cmlm_partition(targets.segments.seg_len(i), &mut rngs[i]))
        .collect::<Result<Vec<_>>>()?;
    cmlm_loss_with(bound, tape, enc, targets, partitions, dropout, smoothing)
}

/// [`cmlm_loss`] with given partitions.
pub fn cmlm_loss_with(
    bound: &Bound<'_, f32>,
    tape: &mut Tape<f32>,
    enc: &Encoded,
    targets: &TargetBatch,
    partitions: Vec<MaskPartition>,
    dropout: &mut Dropout,
    smoothing: f64,
) -> Result<CmlmOutput> {
    let masked: Vec<bool> = partitions.iter().flat_map(|p| p.masked.iter().copied()).collect();
    if masked.len() != targets.tokens.len() {
        return Err(Error::Input("partitions do not cover the targets".into()));
    }
    let input: Vec<TokenId> = targets
        .tokens
        .iter()
        .zip(&masked)
        .map(|(&t, &m)| if m { Vocabulary::MASK } else { t })
        .collect();
    let logits = bound.decode(tape, enc, &input, &targets.segments, dropout)?;
    let weights: Vec<f32> = masked.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let loss = tape.cross_entropy_smoothed(logits, &targets.ids(), &weights, smoothing as f32)?;
    Ok(CmlmOutput {
        loss,
        logits,
        partitions,
    })
}

pub struct FmlmOutput {
    pub loss: Var,
    /// Row `t` from pass 1 when `plans[..].from_first[t]`, else from pass 2.
    pub combined: Var,
    pub first: Var,
    pub second: Var,
    pub plans: Vec<FmlmPassPlan>,
    pub second_input: Vec<TokenId>,
}

/// Two-pass factorized loss. Pass 1 sees only `MASK`; its most confident
/// positions are supervised directly and revealed to pass 2, which predicts
/// the rest.
#[allow(clippy::too_many_arguments)]
pub fn fmlm_forward(
    bound: &Bound<'_, f32>,
    tape: &mut Tape<f32>,
    enc: &Encoded,
    targets: &TargetBatch,
    rngs: &mut [Rng],
    dropout: &mut Dropout,
    smoothing: f64,
) -> Result<FmlmOutput> {
    let splits: Vec<usize> = (0..targets.segments.len())
        .map(|i| sample_fmlm_split(targets.segments.seg_len(i), &mut rngs[i]))
        .collect();
    fmlm_forward_with(bound, tape, enc, targets, &splits, dropout, smoothing)
}

/// [`fmlm_forward`] with given split sizes `Z` per utterance.
pub fn fmlm_forward_with(
    bound: &Bound<'_, f32>,
    tape: &mut Tape<f32>,
    enc: &Encoded,
    targets: &TargetBatch,
    splits: &[usize],
    dropout: &mut Dropout,
    smoothing: f64,
) -> Result<FmlmOutput> {
    let segs = &targets.segments;
    let all_mask = vec![Vocabulary::MASK; targets.tokens.len()];
    let first = bound.decode(tape, enc, &all_mask, segs, dropout)?;
    let grid = PosteriorGrid::from_logits(tape.value(first))?;
    let mut plans = Vec::with_capacity(segs.len());
    let mut second_input = all_mask;
    let mut take_first = Vec::with_capacity(targets.tokens.len());
    for (i, r) in segs.ranges().enumerate() {
        let conf: Vec<f64> = r.clone().map(|t| raw_confidence(grid.row(t))).collect();
        let plan = FmlmPassPlan::from_confidences(&conf, splits[i]);
        for (off, &f) in plan.from_first.iter().enumerate() {
            if f {
                second_input[r.start + off] = targets.tokens[r.start + off];
            }
        }
        take_first.extend_from_slice(&plan.from_first);
        plans.push(plan);
    }
    let second = bound.decode(tape, enc, &second_input, segs, dropout)?;
    let combined = tape.select_rows(first, second, &take_first)?;
    let weights = vec![1.0f32; targets.tokens.len()];
    let loss = tape.cross_entropy_smoothed(combined, &targets.ids(), &weights, smoothing as f32)?;
    Ok(FmlmOutput {
        loss,
        combined,
        first,
        second,
        plans,
        second_input,
    })
}

/// Highest posterior in a row, over the whole vocabulary.
pub fn raw_confidence(row: &[f64]) -> f64 {
    row.iter().copied().fold(0.0, f64::max)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_cer: Option<f64>,
}

pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub optimizer: Adam<f32>,
    pub step: usize,
}

fn val_decode_config(max_len: usize) -> DecodeConfig {
    DecodeConfig {
        iterations: 1,
        initial_length: max_len,
        strategy: Strategy::EasyFirst,
        length_mode: LengthMode::Fixed,
        stop_when_determined: false,
    }
}

/// Error rate of single-pass easy-first decoding on `dev`.
pub fn validation_cer(model: &Transformer<f32>, dev: &[Utterance], initial_length: usize) -> Result<f64> {
    let results = decode_utterances(model, dev, &val_decode_config(initial_length), 16)?;
    let hyps: Vec<Vec<TokenId>> = results.into_iter().map(|r| r.tokens).collect();
    corpus_cer(&reference_pairs(dev, &hyps))
}

/// Trains `model` in place. `on_epoch` sees each log record as it is made.
pub fn train(
    model: &mut Transformer<f32>,
    train_set: &[Utterance],
    dev: &[Utterance],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut optimizer = Adam::new(config.adam(), model.params());
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let max_slots = model.config().max_positions;
    let val: &[Utterance] = if config.val_size == 0 {
        dev
    } else {
        &dev[..config.val_size.min(dev.len())]
    };
    let val_len = val
        .iter()
        .map(|u| u.tokens.len())
        .max()
        .map_or(1, |m| (m + config.max_extra_slots).min(max_slots));
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            step += 1;
            lr = warmup_lr(step, config.base_lr, config.warmup_steps, model.config().d_model)?;
            let loss = train_step(model, train_set, chunk, config, epoch, step)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            clip_gradients(model.params_mut(), config.grad_clip);
            optimizer.step(model.params_mut(), lr)?;
            for p in model.params_mut() {
                p.clear_grad();
            }
            loss_sum += loss;
            batches += 1;
        }
        let val_cer = if val.is_empty() {
            None
        } else {
            Some(validation_cer(model, val, val_len)?)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            step,
            lr,
            loss: loss_sum / batches as f64,
            val_cer,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutcome { log, optimizer, step })
}

/// Forward and backward for one minibatch; gradients are accumulated into
/// the model. Returns the loss value.
pub fn train_step(
    model: &mut Transformer<f32>,
    data: &[Utterance],
    chunk: &[usize],
    config: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<f64> {
    let max_slots = model.config().max_positions;
    let sample_index = |u: usize| ((epoch as u64) << 32) | u as u64;
    let mut rngs: Vec<Rng> = chunk
        .iter()
        .map(|&u| rng::stream(config.seed, "mask", sample_index(u)))
        .collect();
    let targets: Vec<Vec<TokenId>> = chunk
        .iter()
        .zip(&mut rngs)
        .map(|(&u, rng)| {
            let toks = &data[u].tokens;
            let room = max_slots.saturating_sub(toks.len());
            let extra = rng.random_range(0..=config.max_extra_slots.min(room));
            extend_with_fillers(toks, extra)
        })
        .collect();
    let targets = TargetBatch::new(&targets)?;
    let frames: Vec<f32> = chunk.iter().flat_map(|&u| data[u].frames.data().iter().copied()).collect();
    let lens: Vec<usize> = chunk.iter().map(|&u| data[u].num_frames()).collect();
    let frame_segs = Segments::from_lengths(&lens);
    let feat = data[chunk[0]].frames.cols();

    let mut dropout_rng = rng::stream(config.seed, "dropout", step as u64);
    let mut dropout = Dropout::new(model.config().dropout_rate, &mut dropout_rng);
    let mut tape = Tape::new();
    let snapshot: &Transformer<f32> = model;
    let bound = snapshot.bind(&mut tape, true);
    let x = tape.constant(Tensor::new(vec![frame_segs.total(), feat], frames)?);
    let enc = bound.encode(&mut tape, x, &frame_segs, &mut dropout)?;
    let loss = match config.framework {
        Framework::Cmlm => {
            cmlm_loss(&bound, &mut tape, &enc, &targets, &mut rngs, &mut dropout, config.label_smoothing)?.loss
        }
        Framework::Fmlm => {
            fmlm_forward(&bound, &mut tape, &enc, &targets, &mut rngs, &mut dropout, config.label_smoothing)?.loss
        }
    };
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss)?;
    let vars = bound.vars().to_vec();
    for (v, p) in vars.into_iter().zip(model.params_mut()) {
        if let Some(g) = tape.grad(v) {
            p.accumulate_grad(g)?;
        }
    }
    Ok(value)
}

fn clip_gradients(params: &mut [Tensor<f32>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter().map(|&x| (x as f64) * (x as f64)))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::confidence;

    #[test]
    fn warmup_is_continuous_at_peak() {
        let a = warmup_lr(4000, 1.0, 4000, 64).unwrap();
        let rise = 4000.0 * 4000f64.powf(-1.5) / 8.0;
        assert!((a - rise).abs() < 1e-15);
        let first = warmup_lr(1, 2.0, 4000, 256).unwrap();
        assert!((first - 2.0 / 16.0 * 4000f64.powf(-1.5)).abs() < 1e-15);
        assert!(warmup_lr(0, 1.0, 10, 64).is_err());
    }

    #[test]
    fn single_slot_is_always_masked() {
        let mut r = rng::seeded(3);
        for _ in 0..20 {
            assert_eq!(sample_cmlm_partition(1, &mut r).unwrap().masked, vec![true]);
        }
        assert!(sample_cmlm_partition(0, &mut r).is_err());
    }

    #[test]
    fn plan_keeps_most_confident() {
        let plan = FmlmPassPlan::from_confidences(&[0.9, 0.2, 0.5, 0.2], 2);
        assert_eq!(plan.from_first, vec![true, false, true, false]);
        let all = FmlmPassPlan::from_confidences(&[0.3, 0.3], 0);
        assert_eq!(all.from_first, vec![true, true]);
        let none = FmlmPassPlan::from_confidences(&[0.3, 0.3], 2);
        assert_eq!(none.first_positions(), Vec::<usize>::new());
    }

    #[test]
    fn partition_sets_are_complementary() {
        let mut r = rng::seeded(5);
        let p = sample_cmlm_partition(9, &mut r).unwrap();
        let mut all = p.masked_positions();
        all.extend(p.unmasked_positions());
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn confidence_helpers_differ_on_mask_mass() {
        let row = [0.0, 0.6, 0.1, 0.3];
        assert_eq!(raw_confidence(&row), 0.6);
        assert!((confidence(&row) - 0.75).abs() < 1e-12);
    }
}
