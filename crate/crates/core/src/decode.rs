//! Iterative decoding over a parallel masked decoder.
//!
//! A [`DecodeSession`] holds one hypothesis and is driven by an external loop:
//! it exposes the decoder input it needs next, and absorbs the resulting
//! posterior grid. This keeps the strategies independent of how passes are
//! executed, so a batch of sessions can share decoder forwards.

use std::cell::RefCell;

use nar_tensor::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_legal_output, EncoderCache, PosteriorGrid, Transformer};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    EasyFirst,
    MaskPredict,
    LeftToRight,
    RightToLeft,
    /// Explicit commitment increments; their union must cover every position
    /// of the hypothesis exactly once.
    Schedule(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMode {
    Fixed,
    /// Resize the hypothesis to the first predicted EOS after the first pass.
    EosAfterFirstPass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Iteration budget `K` (easy-first and mask-predict).
    pub iterations: usize,
    pub initial_length: usize,
    pub strategy: Strategy,
    pub length_mode: LengthMode,
    /// Stop as soon as every position up to a committed EOS is committed.
    /// Only meaningful for strategies that never revise a commitment.
    pub stop_when_determined: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            iterations: 3,
            initial_length: 32,
            strategy: Strategy::EasyFirst,
            length_mode: LengthMode::EosAfterFirstPass,
            stop_when_determined: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("decode: iterations must be >= 1".into()));
        }
        if self.initial_length == 0 {
            return Err(Error::Config("decode: initial_length must be >= 1".into()));
        }
        if self.stop_when_determined && self.strategy == Strategy::MaskPredict {
            return Err(Error::Config("decode: stop_when_determined is not defined for mask_predict".into()));
        }
        if let Strategy::Schedule(steps) = &self.strategy {
            CommitmentSchedule::from_increments(steps.clone(), self.initial_length)?;
            if self.length_mode != LengthMode::Fixed {
                return Err(Error::Config("decode: an explicit schedule needs length_mode = fixed".into()));
            }
        }
        Ok(())
    }

    /// The autoregressive baseline: commit one position per pass from the
    /// left and stop at the first committed EOS.
    pub fn autoregressive(initial_length: usize) -> Self {
        DecodeConfig {
            iterations: 1,
            initial_length,
            strategy: Strategy::LeftToRight,
            length_mode: LengthMode::Fixed,
            stop_when_determined: true,
        }
    }
}

/// Chain `Z_0 = ∅ ⊂ Z_1 ⊂ ... ⊂ Z_N = {0..L-1}`, stored as increments
/// `Z_i \ Z_{i-1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitmentSchedule {
    increments: Vec<Vec<usize>>,
}

impl CommitmentSchedule {
    pub fn from_increments(increments: Vec<Vec<usize>>, len: usize) -> Result<Self> {
        let mut seen = vec![false; len];
        for step in &increments {
            if step.is_empty() {
                return Err(Error::Config("schedule: every step must commit a position".into()));
            }
            for &p in step {
                match seen.get_mut(p) {
                    None => return Err(Error::Config(format!("schedule: position {p} outside length {len}"))),
                    Some(true) => return Err(Error::Config(format!("schedule: position {p} committed twice"))),
                    Some(s) => *s = true,
                }
            }
        }
        if let Some(p) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("schedule: position {p} never committed")));
        }
        Ok(CommitmentSchedule { increments })
    }

    /// Validates a chain of cumulative sets `Z_1..Z_N`.
    pub fn from_chain(chain: &[Vec<usize>], len: usize) -> Result<Self> {
        let mut increments = Vec::with_capacity(chain.len());
        let mut prev: Vec<usize> = Vec::new();
        for z in chain {
            if !prev.iter().all(|p| z.contains(p)) || z.len() <= prev.len() {
                return Err(Error::Config("schedule: sets must form a strictly increasing chain".into()));
            }
            increments.push(z.iter().copied().filter(|p| !prev.contains(p)).collect());
            prev = z.clone();
        }
        Self::from_increments(increments, len)
    }

    pub fn left_to_right(len: usize) -> Self {
        CommitmentSchedule {
            increments: (0..len).map(|p| vec![p]).collect(),
        }
    }

    pub fn right_to_left(len: usize) -> Self {
        CommitmentSchedule {
            increments: (0..len).rev().map(|p| vec![p]).collect(),
        }
    }

    pub fn one_shot(len: usize) -> Self {
        CommitmentSchedule {
            increments: vec![(0..len).collect()],
        }
    }

    pub fn increments(&self) -> &[Vec<usize>] {
        &self.increments
    }

    /// Cumulative sets `Z_1..Z_N`, each sorted.
    pub fn chain(&self) -> Vec<Vec<usize>> {
        let mut acc: Vec<usize> = Vec::new();
        self.increments
            .iter()
            .map(|inc| {
                acc.extend(inc);
                let mut z = acc.clone();
                z.sort_unstable();
                z
            })
            .collect()
    }
}

/// Most probable legal token and its probability renormalized over the legal
/// vocabulary. Ties go to the lower token id.
pub fn legal_argmax(row: &[f64]) -> (TokenId, f64) {
    let mut best = (Vocabulary::EOS, f64::NEG_INFINITY);
    let mut legal_mass = 0.0;
    for (id, &p) in row.iter().enumerate() {
        if !is_legal_output(id) {
            continue;
        }
        legal_mass += p;
        if p > best.1 {
            best = (id as TokenId, p);
        }
    }
    let conf = if legal_mass > 0.0 { best.1 / legal_mass } else { 0.0 };
    (best.0, conf)
}

/// Maximum legal probability after renormalizing away `MASK` and `PAD`.
pub fn confidence(row: &[f64]) -> f64 {
    legal_argmax(row).1
}

/// `1 + index of the first position whose legal argmax is EOS`, or
/// `initial_length` when no position predicts EOS.
pub fn infer_length(first_pass: &PosteriorGrid, initial_length: usize) -> usize {
    first_pass
        .rows()
        .take(initial_length)
        .position(|row| legal_argmax(row).0 == Vocabulary::EOS)
        .map_or(initial_length, |p| p + 1)
}

/// Committed tokens up to (excluding) the first EOS.
pub fn truncate_at_eos(tokens: &[TokenId]) -> Vec<TokenId> {
    tokens.iter().copied().take_while(|&t| t != Vocabulary::EOS).collect()
}

/// Positions ordered by confidence. `descending` picks the most confident
/// first; ties always resolve to the lower position.
fn rank_positions(candidates: &[usize], conf: &[f64], descending: bool) -> Vec<usize> {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| {
        let c = if descending {
            conf[b].total_cmp(&conf[a])
        } else {
            conf[a].total_cmp(&conf[b])
        };
        c.then(a.cmp(&b))
    });
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// `None` marks a masked slot.
    pub slots: Vec<Option<TokenId>>,
    /// Posterior row each slot's token was taken from.
    pub retained: Vec<Option<Vec<f64>>>,
    pub confidence: Vec<f64>,
    pub iteration_committed: Vec<Option<usize>>,
}

impl Hypothesis {
    fn masked(len: usize) -> Self {
        Hypothesis {
            slots: vec![None; len],
            retained: vec![None; len],
            confidence: vec![0.0; len],
            iteration_committed: vec![None; len],
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_none()).count()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.slots[p].is_none()).collect()
    }

    pub fn decoder_input(&self) -> Vec<TokenId> {
        self.slots.iter().map(|s| s.unwrap_or(Vocabulary::MASK)).collect()
    }

    fn commit(&mut self, p: usize, row: &[f64], iteration: usize) {
        let (tok, conf) = legal_argmax(row);
        self.slots[p] = Some(tok);
        self.retained[p] = Some(row.to_vec());
        self.confidence[p] = conf;
        self.iteration_committed[p] = Some(iteration);
    }

    /// True once a committed EOS is preceded only by committed slots, i.e.
    /// later passes can no longer change the truncated output.
    fn determined(&self) -> bool {
        for s in &self.slots {
            match s {
                None => return false,
                Some(Vocabulary::EOS) => return true,
                Some(_) => {}
            }
        }
        true
    }
}

/// What one decoder pass did to the hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    /// 1-based iteration; 0 for a length probe that was followed by a resize.
    pub iteration: usize,
    pub length: usize,
    pub committed: Vec<usize>,
    pub masked_after: usize,
    /// Decoder input after the pass, with `MASK` at undecided slots.
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
enum Plan {
    EasyFirst,
    MaskPredict,
    Schedule(CommitmentSchedule),
}

/// Decoding state for a single utterance.
#[derive(Debug, Clone)]
pub struct DecodeSession {
    config: DecodeConfig,
    hyp: Hypothesis,
    plan: Plan,
    /// Iterations completed on the current hypothesis length.
    iteration: usize,
    passes: usize,
    length_pending: bool,
    done: bool,
    trace: Vec<IterationTrace>,
}

impl DecodeSession {
    pub fn new(config: &DecodeConfig) -> Result<Self> {
        config.validate()?;
        let len = config.initial_length;
        Ok(DecodeSession {
            plan: Self::plan_for(config, len)?,
            hyp: Hypothesis::masked(len),
            iteration: 0,
            passes: 0,
            length_pending: config.length_mode == LengthMode::EosAfterFirstPass,
            done: false,
            trace: Vec::new(),
            config: config.clone(),
        })
    }

    fn plan_for(config: &DecodeConfig, len: usize) -> Result<Plan> {
        Ok(match &config.strategy {
            Strategy::EasyFirst => Plan::EasyFirst,
            Strategy::MaskPredict => Plan::MaskPredict,
            Strategy::LeftToRight => Plan::Schedule(CommitmentSchedule::left_to_right(len)),
            Strategy::RightToLeft => Plan::Schedule(CommitmentSchedule::right_to_left(len)),
            Strategy::Schedule(steps) => Plan::Schedule(CommitmentSchedule::from_increments(steps.clone(), len)?),
        })
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn hypothesis(&self) -> &Hypothesis {
        &self.hyp
    }

    pub fn trace(&self) -> &[IterationTrace] {
        &self.trace
    }

    /// Decoder input for the next pass, or `None` when decoding has finished.
    pub fn pending_input(&self) -> Option<Vec<TokenId>> {
        (!self.done).then(|| self.hyp.decoder_input())
    }

    pub fn absorb(&mut self, grid: &PosteriorGrid) -> Result<()> {
        if self.done {
            return Err(Error::Input("decode session already finished".into()));
        }
        if grid.len() != self.hyp.len() {
            return Err(Error::Input(format!(
                "posterior grid has {} rows for a hypothesis of {}",
                grid.len(),
                self.hyp.len()
            )));
        }
        self.passes += 1;
        if std::mem::take(&mut self.length_pending) {
            let len = infer_length(grid, self.hyp.len());
            if len != self.hyp.len() {
                self.trace.push(IterationTrace {
                    iteration: 0,
                    length: self.hyp.len(),
                    committed: Vec::new(),
                    masked_after: len,
                    tokens: vec![Vocabulary::MASK; len],
                });
                self.hyp = Hypothesis::masked(len);
                self.plan = Self::plan_for(&self.config, len)?;
                return Ok(());
            }
        }
        self.iteration += 1;
        let k = self.iteration;
        let committed = match &self.plan {
            Plan::EasyFirst => self.step_easy_first(grid, k),
            Plan::MaskPredict => self.step_mask_predict(grid, k),
            Plan::Schedule(s) => {
                let inc = s.increments()[k - 1].clone();
                for &p in &inc {
                    self.hyp.commit(p, grid.row(p), k);
                }
                inc
            }
        };
        self.trace.push(IterationTrace {
            iteration: k,
            length: self.hyp.len(),
            committed,
            masked_after: self.hyp.masked_count(),
            tokens: self.hyp.decoder_input(),
        });
        // easy-first can run out of masked slots early (C(K-1) >= L); the
        // remaining iterations still run and commit nothing
        let finished = match &self.plan {
            Plan::EasyFirst | Plan::MaskPredict => k == self.config.iterations,
            Plan::Schedule(s) => k == s.increments().len(),
        };
        self.done = finished || (self.config.stop_when_determined && self.hyp.determined());
        Ok(())
    }

    fn step_easy_first(&mut self, grid: &PosteriorGrid, k: usize) -> Vec<usize> {
        let len = self.hyp.len();
        let masked = self.hyp.masked_positions();
        let take = if k >= self.config.iterations {
            masked.len()
        } else {
            len.div_ceil(self.config.iterations).min(masked.len())
        };
        let conf: Vec<f64> = grid.rows().map(confidence).collect();
        let mut chosen = rank_positions(&masked, &conf, true);
        chosen.truncate(take);
        chosen.sort_unstable();
        for &p in &chosen {
            self.hyp.commit(p, grid.row(p), k);
        }
        chosen
    }

    fn step_mask_predict(&mut self, grid: &PosteriorGrid, k: usize) -> Vec<usize> {
        let len = self.hyp.len();
        let kk = self.config.iterations;
        for p in self.hyp.masked_positions() {
            self.hyp.retained[p] = Some(grid.row(p).to_vec());
            self.hyp.iteration_committed[p] = Some(k);
        }
        let mut newly = Vec::new();
        for p in 0..len {
            let row = self.hyp.retained[p].as_ref().expect("every slot has a row after a pass");
            let (tok, conf) = legal_argmax(row);
            if self.hyp.slots[p].is_none() {
                newly.push(p);
            }
            self.hyp.slots[p] = Some(tok);
            self.hyp.confidence[p] = conf;
        }
        let remask = (len * (kk - k)).div_ceil(kk);
        let all: Vec<usize> = (0..len).collect();
        for &p in rank_positions(&all, &self.hyp.confidence, false).iter().take(remask) {
            self.hyp.slots[p] = None;
            self.hyp.iteration_committed[p] = None;
        }
        newly.retain(|&p| self.hyp.slots[p].is_some());
        newly
    }

    /// Final tokens truncated at the first EOS.
    pub fn output(&self) -> Result<Vec<TokenId>> {
        if !self.done {
            return Err(Error::Input("decode session has not finished".into()));
        }
        // with an early stop, slots after the committed EOS stay masked
        let tokens: Vec<TokenId> = self.hyp.slots.iter().map_while(|s| *s).collect();
        Ok(truncate_at_eos(&tokens))
    }
}

/// One decoder input to score for a given utterance.
#[derive(Debug, Clone, Copy)]
pub struct PassRequest<'a> {
    pub utterance: usize,
    pub tokens: &'a [TokenId],
}

/// Anything that can run one parallel decoder pass over several requests.
pub trait PassDecoder {
    fn posteriors(&self, requests: &[PassRequest<'_>]) -> Result<Vec<PosteriorGrid>>;
}

/// A transformer with encoder states cached for a fixed set of utterances.
pub struct ModelDecoder<'m, T> {
    model: &'m Transformer<T>,
    cache: EncoderCache<T>,
}

impl<'m, T: Float> ModelDecoder<'m, T> {
    pub fn new(model: &'m Transformer<T>, frames: &[&nar_tensor::Tensor<f32>]) -> Result<Self> {
        Ok(ModelDecoder {
            model,
            cache: model.encode_frames(frames)?,
        })
    }
}

impl<T: Float> PassDecoder for ModelDecoder<'_, T> {
    fn posteriors(&self, requests: &[PassRequest<'_>]) -> Result<Vec<PosteriorGrid>> {
        let reqs: Vec<(usize, &[TokenId])> = requests.iter().map(|r| (r.utterance, r.tokens)).collect();
        self.model.posteriors(&self.cache, &reqs)
    }
}

/// Counts decoder passes per utterance and forward calls overall.
pub struct CountingDecoder<D> {
    inner: D,
    passes: RefCell<Vec<usize>>,
    calls: RefCell<usize>,
}

impl<D: PassDecoder> CountingDecoder<D> {
    pub fn new(inner: D) -> Self {
        CountingDecoder {
            inner,
            passes: RefCell::new(Vec::new()),
            calls: RefCell::new(0),
        }
    }

    pub fn passes(&self, utterance: usize) -> usize {
        self.passes.borrow().get(utterance).copied().unwrap_or(0)
    }

    pub fn total_passes(&self) -> usize {
        self.passes.borrow().iter().sum()
    }

    pub fn calls(&self) -> usize {
        *self.calls.borrow()
    }

    pub fn reset(&self) {
        self.passes.borrow_mut().clear();
        *self.calls.borrow_mut() = 0;
    }

    pub fn inner(&self) -> &D {
        &self.inner
    }
}

impl<D: PassDecoder> PassDecoder for CountingDecoder<D> {
    fn posteriors(&self, requests: &[PassRequest<'_>]) -> Result<Vec<PosteriorGrid>> {
        {
            let mut passes = self.passes.borrow_mut();
            for r in requests {
                if passes.len() <= r.utterance {
                    passes.resize(r.utterance + 1, 0);
                }
                passes[r.utterance] += 1;
            }
            *self.calls.borrow_mut() += 1;
        }
        self.inner.posteriors(requests)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub utterance: usize,
    pub tokens: Vec<TokenId>,
    pub passes: usize,
    pub length: usize,
    pub trace: Vec<IterationTrace>,
}

/// Decodes `utterances` (indices understood by `decoder`), sharing each
/// decoder pass among up to `batch_size` live hypotheses.
pub fn decode_batch<D: PassDecoder + ?Sized>(
    decoder: &D,
    utterances: &[usize],
    config: &DecodeConfig,
    batch_size: usize,
) -> Result<Vec<DecodeResult>> {
    let batch_size = batch_size.max(1);
    let mut results = Vec::with_capacity(utterances.len());
    for group in utterances.chunks(batch_size) {
        let mut sessions = group
            .iter()
            .map(|_| DecodeSession::new(config))
            .collect::<Result<Vec<_>>>()?;
        loop {
            let pending: Vec<(usize, Vec<TokenId>)> = sessions
                .iter()
                .enumerate()
                .filter_map(|(i, s)| s.pending_input().map(|t| (i, t)))
                .collect();
            if pending.is_empty() {
                break;
            }
            let requests: Vec<PassRequest> = pending
                .iter()
                .map(|(i, t)| PassRequest {
                    utterance: group[*i],
                    tokens: t,
                })
                .collect();
            let grids = decoder.posteriors(&requests)?;
            for ((i, _), grid) in pending.iter().zip(&grids) {
                sessions[*i].absorb(grid)?;
            }
        }
        for (s, &u) in sessions.iter().zip(group) {
            results.push(DecodeResult {
                utterance: u,
                tokens: s.output()?,
                passes: s.passes(),
                length: s.hypothesis().len(),
                trace: s.trace().to_vec(),
            });
        }
    }
    Ok(results)
}

pub fn decode_one<D: PassDecoder + ?Sized>(decoder: &D, utterance: usize, config: &DecodeConfig) -> Result<DecodeResult> {
    Ok(decode_batch(decoder, &[utterance], config, 1)?.remove(0))
}
