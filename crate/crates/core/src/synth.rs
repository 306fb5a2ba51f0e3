//! Synthetic frames-to-tokens corpora.
//!
//! Every content token owns a fixed base embedding. An utterance renders each
//! of its tokens as a run of 2..4 noisy copies of that embedding. A fraction
//! of tokens is rendered ambiguously, as the midpoint between the embeddings
//! of a token pair `(2i, 2i+1)`; the true member is then fixed by the parity
//! of the token's position, so only a model that tracks output positions can
//! resolve it.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nar_tensor::{Segments, Tensor};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// Number of content tokens (specials are added on top).
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Inclusive range of frames emitted per token.
    pub frames_per_token: [usize; 2],
    pub noise_sigma: f64,
    /// Inclusive range of content tokens per utterance (EOS excluded).
    pub length_range: [usize; 2],
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Held-out split with lengths in `[2·max, 3·max]`.
    pub stress_size: usize,
    pub seed: u64,
    pub ambiguity_rate: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            vocab_size: 32,
            feature_dim: 16,
            frames_per_token: [2, 4],
            noise_sigma: 0.3,
            length_range: [3, 20],
            train_size: 20_000,
            dev_size: 1_000,
            test_size: 1_000,
            stress_size: 500,
            seed: 1,
            ambiguity_rate: 0.2,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let [rmin, rmax] = self.frames_per_token;
        let [lmin, lmax] = self.length_range;
        let problems = [
            (self.vocab_size == 0, "vocab_size must be positive"),
            (self.feature_dim == 0, "feature_dim must be positive"),
            (rmin == 0 || rmin > rmax, "frames_per_token must satisfy 1 <= min <= max"),
            (lmin == 0 || lmin > lmax, "length_range must satisfy 1 <= min <= max"),
            (!(0.0..=1.0).contains(&self.ambiguity_rate), "ambiguity_rate must lie in [0, 1]"),
            (!(self.noise_sigma >= 0.0), "noise_sigma must be >= 0"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::Config(format!("task: {msg}"))),
            None => Ok(()),
        }
    }

    pub fn stress_range(&self) -> [usize; 2] {
        [2 * self.length_range[1], 3 * self.length_range[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    Stress,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Dev, Split::Test, Split::Stress];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Stress => "stress",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown split {s:?}")))
    }
}

/// One `(frames, tokens)` pair. `tokens` ends with exactly one EOS and
/// `durations[i]` is the number of frames emitted by content token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub durations: Vec<usize>,
    pub frames: Tensor<f32>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[TokenId] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn check(&self) -> Result<()> {
        let eos = self.tokens.iter().filter(|&&t| t == Vocabulary::EOS).count();
        if eos != 1 || self.tokens.last() != Some(&Vocabulary::EOS) {
            return Err(Error::Format(format!("{}: tokens must end with a single EOS", self.id)));
        }
        if self.durations.len() + 1 != self.tokens.len()
            || self.durations.iter().sum::<usize>() != self.num_frames()
        {
            return Err(Error::Format(format!("{}: durations disagree with frames", self.id)));
        }
        Ok(())
    }
}

/// Generator state derived from a [`TaskConfig`]: vocabulary and the fixed
/// per-token base embeddings.
#[derive(Debug, Clone)]
pub struct SynthTask {
    config: TaskConfig,
    vocab: Vocabulary,
    embeddings: Vec<Vec<f32>>,
}

impl SynthTask {
    pub fn new(config: TaskConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::synthetic(config.vocab_size)?;
        let mut rng = rng::stream(config.seed, "embeddings", 0);
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let embeddings = (0..config.vocab_size)
            .map(|_| (0..config.feature_dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        Ok(SynthTask {
            config,
            vocab,
            embeddings,
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Base embedding of content token `index`.
    pub fn embedding(&self, index: usize) -> &[f32] {
        &self.embeddings[index]
    }

    /// Pair partner of a content index, if the vocabulary has one.
    pub fn partner(&self, index: usize) -> Option<usize> {
        let p = index ^ 1;
        (p < self.config.vocab_size).then_some(p)
    }

    pub fn min_embedding_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.embeddings.len() {
            for j in i + 1..self.embeddings.len() {
                let d: f64 = self.embeddings[i]
                    .iter()
                    .zip(&self.embeddings[j])
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum();
                best = best.min(d.sqrt());
            }
        }
        best
    }

    pub fn gen_utterance(&self, rng: &mut Rng, length_range: [usize; 2], id: String) -> Utterance {
        let cfg = &self.config;
        let d = cfg.feature_dim;
        let len = rng.random_range(length_range[0]..=length_range[1]);
        let noise = Normal::new(0.0f64, cfg.noise_sigma).expect("sigma >= 0");
        let mut tokens = Vec::with_capacity(len + 1);
        let mut durations = Vec::with_capacity(len);
        let mut frames = Vec::new();
        for pos in 0..len {
            let mut index = rng.random_range(0..cfg.vocab_size);
            let ambiguous = rng.random_bool(cfg.ambiguity_rate) && self.partner(index).is_some();
            let base: Vec<f32> = if ambiguous {
                let pair = index & !1;
                index = pair | (pos & 1);
                self.embeddings[pair]
                    .iter()
                    .zip(&self.embeddings[pair | 1])
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect()
            } else {
                self.embeddings[index].clone()
            };
            let r = rng.random_range(cfg.frames_per_token[0]..=cfg.frames_per_token[1]);
            for _ in 0..r {
                frames.extend(base.iter().map(|&b| b + noise.sample(rng) as f32));
            }
            tokens.push(self.vocab.content_id(index));
            durations.push(r);
        }
        tokens.push(Vocabulary::EOS);
        let n = frames.len() / d;
        Utterance {
            id,
            tokens,
            durations,
            frames: Tensor::new(vec![n, d], frames).expect("at least one frame"),
        }
    }

    pub fn gen_split(&self, split: Split) -> Vec<Utterance> {
        let cfg = &self.config;
        let (size, range) = match split {
            Split::Train => (cfg.train_size, cfg.length_range),
            Split::Dev => (cfg.dev_size, cfg.length_range),
            Split::Test => (cfg.test_size, cfg.length_range),
            Split::Stress => (cfg.stress_size, cfg.stress_range()),
        };
        (0..size)
            .map(|i| {
                let mut rng = rng::stream(cfg.seed, split.name(), i as u64);
                self.gen_utterance(&mut rng, range, format!("{}-{i:06}", split.name()))
            })
            .collect()
    }

    pub fn gen_corpus(&self) -> Corpus {
        Corpus {
            train: self.gen_split(Split::Train),
            dev: self.gen_split(Split::Dev),
            test: self.gen_split(Split::Test),
            stress: self.gen_split(Split::Stress),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub stress: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
            Split::Stress => &self.stress,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for split in Split::ALL {
            write_split(&dir.join(format!("{}.bin", split.name())), self.split(split))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |s: Split| read_split(&dir.join(format!("{}.bin", s.name())));
        Ok(Corpus {
            train: read(Split::Train)?,
            dev: read(Split::Dev)?,
            test: read(Split::Test)?,
            stress: read(Split::Stress)?,
        })
    }
}

/// Padded minibatch. Row `b` holds utterance `b`; validity masks mark the
/// true extents and padding is zero frames / `PAD` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[batch, max_frames, feature_dim]`
    pub frames: Tensor<f32>,
    pub frame_valid: Vec<bool>,
    pub frame_lengths: Vec<usize>,
    /// `[batch, max_tokens]` flattened.
    pub targets: Vec<TokenId>,
    pub target_valid: Vec<bool>,
    pub target_lengths: Vec<usize>,
    pub durations: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_frames(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn max_tokens(&self) -> usize {
        self.targets.len() / self.len()
    }

    pub fn target(&self, b: usize) -> &[TokenId] {
        let m = self.max_tokens();
        &self.targets[b * m..b * m + self.target_lengths[b]]
    }

    /// Valid frames of every utterance stacked into `[Σ frames, dim]`.
    pub fn packed_frames(&self) -> (Tensor<f32>, Segments) {
        let d = self.frames.cols();
        let t = self.max_frames();
        let mut data = Vec::with_capacity(self.frame_lengths.iter().sum::<usize>() * d);
        for (b, &len) in self.frame_lengths.iter().enumerate() {
            let start = b * t * d;
            data.extend_from_slice(&self.frames.data()[start..start + len * d]);
        }
        let segments = Segments::from_lengths(&self.frame_lengths);
        let frames = Tensor::new(vec![segments.total(), d], data).expect("non-empty batch");
        (frames, segments)
    }
}

pub fn make_batch(utterances: &[&Utterance]) -> Result<Batch> {
    let first = utterances
        .first()
        .ok_or_else(|| Error::Input("cannot batch an empty list".into()))?;
    let d = first.frames.cols();
    if utterances.iter().any(|u| u.frames.cols() != d) {
        return Err(Error::Input("utterances disagree on feature_dim".into()));
    }
    let max_frames = utterances.iter().map(|u| u.num_frames()).max().unwrap_or(0);
    let max_tokens = utterances.iter().map(|u| u.tokens.len()).max().unwrap_or(0);
    let n = utterances.len();
    let mut frames = vec![0.0f32; n * max_frames * d];
    let mut frame_valid = vec![false; n * max_frames];
    let mut targets = vec![Vocabulary::PAD; n * max_tokens];
    let mut target_valid = vec![false; n * max_tokens];
    for (b, u) in utterances.iter().enumerate() {
        let f0 = b * max_frames;
        frames[f0 * d..(f0 + u.num_frames()) * d].copy_from_slice(u.frames.data());
        frame_valid[f0..f0 + u.num_frames()].fill(true);
        let t0 = b * max_tokens;
        targets[t0..t0 + u.tokens.len()].copy_from_slice(&u.tokens);
        target_valid[t0..t0 + u.tokens.len()].fill(true);
    }
    Ok(Batch {
        ids: utterances.iter().map(|u| u.id.clone()).collect(),
        frames: Tensor::new(vec![n, max_frames, d], frames)?,
        frame_valid,
        frame_lengths: utterances.iter().map(|u| u.num_frames()).collect(),
        targets,
        target_valid,
        target_lengths: utterances.iter().map(|u| u.tokens.len()).collect(),
        durations: utterances.iter().map(|u| u.durations.clone()).collect(),
    })
}

pub fn unbatch(batch: &Batch) -> Vec<Utterance> {
    let d = batch.frames.cols();
    let t = batch.max_frames();
    (0..batch.len())
        .map(|b| {
            let len = batch.frame_lengths[b];
            let data = batch.frames.data()[b * t * d..(b * t + len) * d].to_vec();
            Utterance {
                id: batch.ids[b].clone(),
                tokens: batch.target(b).to_vec(),
                durations: batch.durations[b].clone(),
                frames: Tensor::new(vec![len, d], data).expect("valid frames"),
            }
        })
        .collect()
}

// Binary split layout, all integers little-endian:
//
//   magic    8 bytes  "NARCORP\0"
//   version  u32      = 1
//   dim      u32      feature dimension
//   count    u32      number of records
//   record*  { id_len u16, id utf-8, n_tokens u32, tokens u32 * n_tokens,
//              durations u32 * (n_tokens - 1), n_frames u32,
//              frames f32 * (n_frames * dim) }
const MAGIC: &[u8; 8] = b"NARCORP\0";
pub const CORPUS_FORMAT_VERSION: u32 = 1;

pub fn write_split(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let ctx = || path.display().to_string();
    let file = fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    let dim = utterances.first().map_or(0, |u| u.frames.cols()) as u32;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CORPUS_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    buf.extend_from_slice(&(utterances.len() as u32).to_le_bytes());
    for u in utterances {
        u.check()?;
        buf.extend_from_slice(&(u.id.len() as u16).to_le_bytes());
        buf.extend_from_slice(u.id.as_bytes());
        buf.extend_from_slice(&(u.tokens.len() as u32).to_le_bytes());
        u.tokens.iter().for_each(|t| buf.extend_from_slice(&t.to_le_bytes()));
        u.durations
            .iter()
            .for_each(|&r| buf.extend_from_slice(&(r as u32).to_le_bytes()));
        buf.extend_from_slice(&(u.num_frames() as u32).to_le_bytes());
        u.frames.data().iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
        w.write_all(&buf).map_err(|e| Error::io(ctx(), e))?;
        buf.clear();
    }
    w.write_all(&buf).map_err(|e| Error::io(ctx(), e))?;
    w.flush().map_err(|e| Error::io(ctx(), e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::Format("corpus file truncated".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_split(path: &Path) -> Result<Vec<Utterance>> {
    let ctx = || path.display().to_string();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map(BufReader::new)
        .and_then(|mut r| r.read_to_end(&mut bytes))
        .map_err(|e| Error::io(ctx(), e))?;
    let mut c = Cursor {
        data: &bytes,
        pos: 0,
    };
    if c.take(8)? != MAGIC {
        return Err(Error::Format(format!("{}: not a corpus file", ctx())));
    }
    let version = c.u32()?;
    if version != CORPUS_FORMAT_VERSION {
        return Err(Error::Format(format!("{}: unsupported corpus version {version}", ctx())));
    }
    let dim = c.u32()? as usize;
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = c.u16()? as usize;
        let id = String::from_utf8(c.take(id_len)?.to_vec())
            .map_err(|_| Error::Format("utterance id is not utf-8".into()))?;
        let n_tokens = c.u32()? as usize;
        let tokens = (0..n_tokens).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let durations = (0..n_tokens.saturating_sub(1))
            .map(|_| c.u32().map(|x| x as usize))
            .collect::<Result<Vec<_>>>()?;
        let n_frames = c.u32()? as usize;
        let raw = c.take(n_frames * dim * 4)?;
        let frames = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let u = Utterance {
            id,
            tokens,
            durations,
            frames: Tensor::new(vec![n_frames, dim], frames)?,
        };
        u.check()?;
        out.push(u);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{}: trailing bytes", ctx())));
    }
    Ok(out)
}

/// Human-readable manifest: `id<TAB>n_frames<TAB>tokens`.
pub fn manifest(utterances: &[Utterance], vocab: &Vocabulary) -> String {
    let mut s = String::from("id\tn_frames\ttokens\n");
    for u in utterances {
        s.push_str(&format!("{}\t{}\t{}\n", u.id, u.num_frames(), vocab.render(&u.tokens)));
    }
    s
}
