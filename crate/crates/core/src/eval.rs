//! Error rates and decoder-pass benchmarking.

use std::time::Instant;

use nar_tensor::Float;
use serde::{Deserialize, Serialize};

use crate::decode::{decode_batch, CountingDecoder, DecodeConfig, DecodeResult, ModelDecoder};
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::synth::Utterance;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub correct: usize,
    pub ref_len: usize,
}

impl AlignmentStats {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn hyp_len(&self) -> usize {
        self.substitutions + self.insertions + self.correct
    }

    fn add(&mut self, o: &AlignmentStats) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.correct += o.correct;
        self.ref_len += o.ref_len;
    }
}

/// Unit-cost Levenshtein alignment. The backtrace prefers a diagonal step
/// (match or substitution), then a deletion, then an insertion.
pub fn levenshtein_align<S: PartialEq>(reference: &[S], hypothesis: &[S]) -> AlignmentStats {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut stats = AlignmentStats {
        ref_len: n,
        ..AlignmentStats::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                if same {
                    stats.correct += 1;
                } else {
                    stats.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            stats.deletions += 1;
            i -= 1;
        } else {
            stats.insertions += 1;
            j -= 1;
        }
    }
    stats
}

/// Summed alignment statistics over `(reference, hypothesis)` pairs.
pub fn corpus_stats<S: PartialEq>(pairs: &[(&[S], &[S])]) -> AlignmentStats {
    let mut total = AlignmentStats::default();
    for (r, h) in pairs {
        total.add(&levenshtein_align(r, h));
    }
    total
}

/// `(ΣS + ΣD + ΣI) / Σ ref_len`.
pub fn corpus_cer<S: PartialEq>(pairs: &[(&[S], &[S])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("error rate of an empty corpus".into()));
    }
    let total = corpus_stats(pairs);
    if total.ref_len == 0 {
        return Err(Error::Input("error rate with zero reference length".into()));
    }
    Ok(total.distance() as f64 / total.ref_len as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    /// Reference lengths in `[lower, upper)`.
    pub lower: usize,
    pub upper: usize,
    pub n: usize,
    pub stats: AlignmentStats,
    pub sub_rate: Option<f64>,
    pub del_rate: Option<f64>,
    pub ins_rate: Option<f64>,
    pub cer: Option<f64>,
}

impl BucketRow {
    pub const HEADER: &'static str = "lower\tupper\tn\tref_len\tsub_rate\tdel_rate\tins_rate\tcer";

    pub fn to_tsv(&self) -> String {
        let f = |x: Option<f64>| x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.lower,
            self.upper,
            self.n,
            self.stats.ref_len,
            f(self.sub_rate),
            f(self.del_rate),
            f(self.ins_rate),
            f(self.cer)
        )
    }
}

/// Error decomposition per reference-length bucket. Bucket `i` holds
/// references with length in `[edges[i], edges[i+1])`; pairs outside every
/// bucket are ignored. Empty buckets report `None` rates.
pub fn length_bucket_report<S: PartialEq>(pairs: &[(&[S], &[S])], edges: &[usize]) -> Result<Vec<BucketRow>> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input("bucket edges must be strictly increasing with at least two entries".into()));
    }
    let mut rows: Vec<BucketRow> = edges
        .windows(2)
        .map(|w| BucketRow {
            lower: w[0],
            upper: w[1],
            n: 0,
            stats: AlignmentStats::default(),
            sub_rate: None,
            del_rate: None,
            ins_rate: None,
            cer: None,
        })
        .collect();
    for (r, h) in pairs {
        if let Some(row) = rows.iter_mut().find(|b| (b.lower..b.upper).contains(&r.len())) {
            row.n += 1;
            row.stats.add(&levenshtein_align(r, h));
        }
    }
    for row in &mut rows {
        let len = row.stats.ref_len;
        if row.n > 0 && len > 0 {
            let rate = |x: usize| Some(x as f64 / len as f64);
            row.sub_rate = rate(row.stats.substitutions);
            row.del_rate = rate(row.stats.deletions);
            row.ins_rate = rate(row.stats.insertions);
            row.cer = rate(row.stats.distance());
        }
    }
    Ok(rows)
}

/// Decodes every utterance and returns results in input order.
pub fn decode_utterances<T: Float>(
    model: &Transformer<T>,
    utterances: &[Utterance],
    config: &DecodeConfig,
    batch_size: usize,
) -> Result<Vec<DecodeResult>> {
    let frames: Vec<_> = utterances.iter().map(|u| &u.frames).collect();
    let decoder = ModelDecoder::new(model, &frames)?;
    let ids: Vec<usize> = (0..utterances.len()).collect();
    decode_batch(&decoder, &ids, config, batch_size)
}

/// Content references (EOS stripped) paired with hypotheses.
pub fn reference_pairs<'a>(utterances: &'a [Utterance], hyps: &'a [Vec<TokenId>]) -> Vec<(&'a [TokenId], &'a [TokenId])> {
    utterances.iter().zip(hyps).map(|(u, h)| (u.content(), h.as_slice())).collect()
}

/// A named decoding setup to benchmark.
#[derive(Debug, Clone)]
pub struct BenchSystem<'m, T> {
    pub name: String,
    pub model: &'m Transformer<T>,
    pub decode: DecodeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub name: String,
    pub decode: DecodeConfig,
    pub utterances: usize,
    pub total_passes: usize,
    pub mean_passes: f64,
    pub max_passes: usize,
    /// Mean committed output length including the EOS slot.
    pub mean_output_length: f64,
    pub median_wall_seconds: f64,
    pub speedup_vs_baseline: f64,
    pub cer: f64,
    pub stats: AlignmentStats,
    pub buckets: Vec<BucketRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub baseline: String,
    pub repetitions: usize,
    pub systems: Vec<SystemReport>,
}

impl BenchReport {
    pub const HEADER: &'static str =
        "system\tutterances\ttotal_passes\tmean_passes\tmax_passes\tmean_output_length\tmedian_wall_s\tspeedup\tcer";

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.systems {
            s.push_str(&format!(
                "{}\t{}\t{}\t{:.4}\t{}\t{:.4}\t{:.6}\t{:.4}\t{:.6}\n",
                r.name,
                r.utterances,
                r.total_passes,
                r.mean_passes,
                r.max_passes,
                r.mean_output_length,
                r.median_wall_seconds,
                r.speedup_vs_baseline,
                r.cer
            ));
        }
        s
    }
}

/// Length of the committed output including the EOS slot, or the full
/// hypothesis when no EOS was committed.
pub fn output_length(result: &DecodeResult) -> usize {
    (result.tokens.len() + 1).min(result.length)
}

/// Runs every system over `test_set`, counting decoder passes exactly and
/// timing `repetitions` runs. The first system is the speedup baseline.
pub fn bench<T: Float>(
    systems: &[BenchSystem<'_, T>],
    test_set: &[Utterance],
    repetitions: usize,
    bucket_edges: &[usize],
) -> Result<BenchReport> {
    if test_set.is_empty() {
        return Err(Error::Input("benchmark needs a non-empty test set".into()));
    }
    if systems.is_empty() || repetitions == 0 {
        return Err(Error::Input("benchmark needs at least one system and repetition".into()));
    }
    let frames: Vec<_> = test_set.iter().map(|u| &u.frames).collect();
    let ids: Vec<usize> = (0..test_set.len()).collect();
    let mut reports = Vec::with_capacity(systems.len());
    for sys in systems {
        let mut times = Vec::with_capacity(repetitions);
        let mut results = Vec::new();
        let mut counted = 0;
        for _ in 0..repetitions {
            let start = Instant::now();
            let decoder = CountingDecoder::new(ModelDecoder::new(sys.model, &frames)?);
            results = decode_batch(&decoder, &ids, &sys.decode, 1)?;
            times.push(start.elapsed().as_secs_f64());
            counted = decoder.total_passes();
        }
        times.sort_by(f64::total_cmp);
        let n = test_set.len() as f64;
        let hyps: Vec<Vec<TokenId>> = results.iter().map(|r| r.tokens.clone()).collect();
        let pairs = reference_pairs(test_set, &hyps);
        let stats = corpus_stats(&pairs);
        reports.push(SystemReport {
            name: sys.name.clone(),
            decode: sys.decode.clone(),
            utterances: test_set.len(),
            total_passes: counted,
            mean_passes: counted as f64 / n,
            max_passes: results.iter().map(|r| r.passes).max().unwrap_or(0),
            mean_output_length: results.iter().map(output_length).sum::<usize>() as f64 / n,
            median_wall_seconds: times[times.len() / 2],
            speedup_vs_baseline: 0.0,
            cer: stats.distance() as f64 / stats.ref_len.max(1) as f64,
            stats,
            buckets: length_bucket_report(&pairs, bucket_edges)?,
        });
    }
    let base = reports[0].mean_passes;
    for r in &mut reports {
        r.speedup_vs_baseline = base / r.mean_passes;
    }
    Ok(BenchReport {
        baseline: reports[0].name.clone(),
        repetitions,
        systems: reports,
    })
}
