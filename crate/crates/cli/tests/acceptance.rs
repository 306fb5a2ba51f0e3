//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p nar-cli --test acceptance -- 3 5`.

use std::cell::OnceCell;
use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, VecDeque};
use std::hash::{Hash, Hasher};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use nar_cli::checkpoint;
use nar_cli::commands::{cmd_decode, cmd_gen, cmd_train, read_hyps, Context};
use nar_cli::config::RunConfig;
use nar_core::decode::{
    decode_batch, decode_one, CountingDecoder, DecodeConfig, DecodeResult, LengthMode, ModelDecoder, PassDecoder,
    PassRequest, Strategy,
};
use nar_core::eval::{self, corpus_cer, levenshtein_align, AlignmentStats, BenchSystem};
use nar_core::model::{Dropout, ModelConfig, PosteriorGrid, Transformer};
use nar_core::synth::{Corpus, Split, Utterance};
use nar_core::train::{sample_cmlm_partition, sample_fmlm_split, Framework};
use nar_core::{rng, TokenId, Vocabulary};
use nar_tensor::check::{central_differences, max_relative_error};
use nar_tensor::{Segments, Tape, Tensor, Var};
use rand::Rng as _;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, detail: String) -> Check {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn random_tensor(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut r = rng::stream(seed, "acceptance-grad", shape.iter().product::<usize>() as u64);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Worst relative error of `d/dx sum(op(x) ⊙ R)` over all inputs.
fn op_error(seed: u64, shapes: &[&[usize]], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let values: Vec<Tensor<f64>> = shapes.iter().enumerate().map(|(i, s)| random_tensor(seed + i as u64, s)).collect();
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = build(&mut tape, &vars);
        random_tensor(seed ^ 0xff, tape.shape(out))
    };
    let eval = |vals: &[Tensor<f64>], grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let weighted = tape.mul_const(out, probe.data().to_vec()).unwrap();
        let loss = tape.sum(weighted);
        let value = tape.value(loss).data()[0];
        let grads = grad.then(|| {
            tape.backward(loss).unwrap();
            vars.iter()
                .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec))
                .collect::<Vec<_>>()
        });
        (value, grads)
    };
    let analytic = eval(&values, true).1.unwrap();
    let mut worst = 0.0f64;
    for (i, v) in values.iter().enumerate() {
        let numeric = central_differences(v.data(), 1e-5, |x| {
            let mut vals = values.clone();
            vals[i] = Tensor::new(v.shape().to_vec(), x.to_vec()).unwrap();
            eval(&vals, false).0
        });
        worst = worst.max(max_relative_error(&analytic[i], &numeric, 1e-6));
    }
    worst
}

fn toy_model_error() -> f64 {
    let config = ModelConfig {
        feature_dim: 3,
        d_model: 8,
        n_heads: 2,
        n_encoder_blocks: 1,
        n_decoder_blocks: 1,
        feedforward_dim: 16,
        subsample_factor: 2,
        vocab_size: 7,
        max_positions: 16,
        dropout_rate: 0.0,
    };
    let model = Transformer::<f64>::new(config, 11).unwrap();
    let frames = random_tensor(3, &[11, 3]);
    let fsegs = Segments::from_lengths(&[5, 6]);
    let tokens: Vec<TokenId> = vec![Vocabulary::MASK, 4, Vocabulary::MASK, 6, Vocabulary::MASK, Vocabulary::MASK];
    let segs = Segments::from_lengths(&[3, 3]);
    let targets = [3usize, 4, 2, 6, 5, 2];
    let weights = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
    let loss_of = |m: &Transformer<f64>, grad: bool| {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true);
        let x = tape.constant(frames.clone());
        let enc = bound.encode(&mut tape, x, &fsegs, &mut Dropout::off()).unwrap();
        let logits = bound.decode(&mut tape, &enc, &tokens, &segs, &mut Dropout::off()).unwrap();
        let loss = tape.cross_entropy_smoothed(logits, &targets, &weights, 0.1).unwrap();
        let value = tape.value(loss).data()[0];
        let grads = grad.then(|| {
            tape.backward(loss).unwrap();
            bound
                .vars()
                .iter()
                .zip(m.params())
                .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
                .collect::<Vec<_>>()
        });
        (value, grads)
    };
    let analytic = loss_of(&model, true).1.unwrap();
    let mut worst = 0.0f64;
    for (i, p) in model.params().iter().enumerate() {
        let numeric = central_differences(p.data(), 1e-5, |x| {
            let mut m = model.clone();
            m.params_mut()[i].data_mut().copy_from_slice(x);
            loss_of(&m, false).0
        });
        worst = worst.max(max_relative_error(&analytic[i], &numeric, 1e-6));
    }
    worst
}

fn gradient_integrity() -> Check {
    let start = Instant::now();
    let qs = Segments::from_lengths(&[3, 2]);
    let ks = Segments::from_lengths(&[4, 3]);
    let valid = [true, true, false, true, true, true, false];
    let ops: Vec<(&str, Vec<&[usize]>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>)> = vec![
        ("matmul", vec![&[4, 3], &[3, 5]], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("add", vec![&[3, 4], &[3, 4]], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("add_row", vec![&[5, 3], &[3]], Box::new(|t, v| t.add_row(v[0], v[1]).unwrap())),
        ("mul", vec![&[3, 4], &[3, 4]], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("mul_const", vec![&[2, 5]], Box::new(|t, v| t.mul_const(v[0], (0..10).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap())),
        ("scale", vec![&[3, 3]], Box::new(|t, v| t.scale(v[0], -2.5))),
        ("relu", vec![&[4, 4]], Box::new(|t, v| t.relu(v[0]))),
        ("sum", vec![&[3, 5]], Box::new(|t, v| t.sum(v[0]))),
        ("softmax_rows", vec![&[3, 6]], Box::new(|t, v| t.softmax(v[0], 1).unwrap())),
        ("softmax_cols", vec![&[4, 3]], Box::new(|t, v| t.softmax(v[0], 0).unwrap())),
        ("layer_norm", vec![&[4, 6], &[6], &[6]], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap())),
        (
            "cross_entropy",
            vec![&[5, 7]],
            Box::new(|t, v| t.cross_entropy(v[0], &[0, 6, 3, 3, 1], &[1.0, 0.0, 2.0, 0.5, 1.0]).unwrap()),
        ),
        (
            "cross_entropy_smoothed",
            vec![&[4, 6]],
            Box::new(|t, v| t.cross_entropy_smoothed(v[0], &[5, 0, 2, 2], &[1.0, 1.0, 0.0, 3.0], 0.1).unwrap()),
        ),
        (
            "attention",
            vec![&[5, 4], &[7, 4], &[7, 4]],
            Box::new(move |t, v| t.attention(v[0], v[1], v[2], 2, &qs, &ks, Some(&valid)).unwrap()),
        ),
        ("gather", vec![&[5, 3]], Box::new(|t, v| t.gather(v[0], &[4, 0, 4, 2]).unwrap())),
        (
            "unfold",
            vec![&[9, 2]],
            Box::new(|t, v| t.unfold(v[0], &Segments::from_lengths(&[5, 4]), 3, 2).unwrap().0),
        ),
        (
            "select_rows",
            vec![&[3, 2], &[3, 2]],
            Box::new(|t, v| t.select_rows(v[0], v[1], &[false, true, false]).unwrap()),
        ),
    ];
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for (i, (name, shapes, build)) in ops.iter().enumerate() {
        let e = op_error(100 + i as u64 * 10, shapes, build.as_ref());
        worst = worst.max(e);
        if !(e < 1e-4) {
            failures.push(format!("{name}={e:.1e}"));
        }
    }
    let model_err = toy_model_error();
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{} ops worst rel err {worst:.1e}, toy model {model_err:.1e}, {secs:.1}s{}",
        ops.len(),
        if failures.is_empty() { String::new() } else { format!(", failing: {}", failures.join(" ")) }
    );
    ensure(failures.is_empty() && model_err < 1e-4 && secs < 120.0, detail)
}

// ---------------------------------------------------------------- 2

fn tiny_model(seed: u64) -> Transformer<f64> {
    let config = ModelConfig {
        feature_dim: 4,
        d_model: 8,
        n_heads: 2,
        n_encoder_blocks: 1,
        n_decoder_blocks: 1,
        feedforward_dim: 16,
        subsample_factor: 2,
        vocab_size: 7,
        max_positions: 64,
        dropout_rate: 0.0,
    };
    let mut model = Transformer::new(config, seed).unwrap();
    let mut r = rng::stream(seed, "sharpen", 0);
    let names = model.names().to_vec();
    for (name, t) in names.iter().zip(model.params_mut()) {
        if name.starts_with("decoder.output") {
            for x in t.data_mut() {
                *x = 4.0 * (r.random::<f64>() - 0.5);
            }
        }
    }
    model
}

fn random_frames(seed: u64, rows: usize) -> Tensor<f32> {
    let mut r = rng::stream(seed, "frames", 0);
    Tensor::new(vec![rows, 4], (0..rows * 4).map(|_| r.random::<f32>() * 2.0 - 1.0).collect()).unwrap()
}

/// Greedy decoding written out directly.
fn naive_greedy(model: &Transformer<f64>, frames: &Tensor<f32>, len: usize) -> Vec<TokenId> {
    let cache = model.encode_frames(&[frames]).unwrap();
    let mut prefix: Vec<TokenId> = Vec::new();
    while prefix.len() < len {
        let mut input = prefix.clone();
        input.resize(len, Vocabulary::MASK);
        let grid = model.posteriors(&cache, &[(0, &input)]).unwrap().remove(0);
        let row = grid.row(prefix.len());
        let mut best = Vocabulary::EOS as usize;
        for v in Vocabulary::EOS as usize..row.len() {
            if row[v] > row[best] {
                best = v;
            }
        }
        if best == Vocabulary::EOS as usize {
            break;
        }
        prefix.push(best as TokenId);
    }
    prefix
}

fn autoregressive_equivalence() -> Check {
    let cases = 150u64;
    let mut mismatches = 0;
    let mut early = 0;
    for case in 0..cases {
        let model = tiny_model(1000 + case);
        let frames = random_frames(case, 3 + (case as usize * 7) % 25);
        let len = 1 + (case as usize * 5) % 16;
        let want = naive_greedy(&model, &frames, len);
        let dec = ModelDecoder::new(&model, &[&frames]).unwrap();
        let schedule = DecodeConfig {
            iterations: 1,
            initial_length: len,
            strategy: Strategy::LeftToRight,
            length_mode: LengthMode::Fixed,
            stop_when_determined: false,
        };
        let full = decode_one(&dec, 0, &schedule).unwrap();
        let stopped = decode_one(&dec, 0, &DecodeConfig::autoregressive(len)).unwrap();
        if full.tokens != want || stopped.tokens != want {
            mismatches += 1;
        }
        early += usize::from(want.len() < len);
    }
    ensure(
        mismatches == 0,
        format!("{cases} random (model, input) pairs, {mismatches} mismatches ({early} ended at EOS before L)"),
    )
}

// ---------------------------------------------------------------- 3, 5

struct Hashed {
    seed: u64,
}

impl PassDecoder for Hashed {
    fn posteriors(&self, requests: &[PassRequest<'_>]) -> nar_core::Result<Vec<PosteriorGrid>> {
        Ok(requests
            .iter()
            .map(|r| {
                let mut h = DefaultHasher::new();
                (self.seed, r.utterance, r.tokens).hash(&mut h);
                let mut g = rng::seeded(h.finish());
                let mut probs = Vec::new();
                for _ in 0..r.tokens.len() {
                    let row: Vec<f64> = (0..9).map(|_| g.random::<f64>() + 1e-3).collect();
                    let z: f64 = row.iter().sum();
                    probs.extend(row.iter().map(|p| p / z));
                }
                PosteriorGrid::new(9, probs).unwrap()
            })
            .collect())
    }
}

fn fixed(strategy: Strategy, k: usize, len: usize) -> DecodeConfig {
    DecodeConfig {
        iterations: k,
        initial_length: len,
        strategy,
        length_mode: LengthMode::Fixed,
        stop_when_determined: false,
    }
}

fn schedule_counts() -> Check {
    let dec = Hashed { seed: 1 };
    let mut deviations = 0;
    let mut checked = 0;
    for len in 1..=64usize {
        for kk in 1..=8usize {
            let c = len.div_ceil(kk);
            let ef = decode_one(&dec, len * 8 + kk, &fixed(Strategy::EasyFirst, kk, len)).unwrap();
            let mut left = len;
            deviations += usize::from(ef.trace.len() != kk);
            for (k, t) in (1..=kk).zip(&ef.trace) {
                let want = if k == kk { left } else { c.min(left) };
                left -= want;
                checked += 1;
                deviations += usize::from(t.committed.len() != want || t.masked_after != left);
            }
            let mp = decode_one(&dec, len * 8 + kk, &fixed(Strategy::MaskPredict, kk, len)).unwrap();
            deviations += usize::from(mp.trace.len() != kk);
            for (k, t) in (1..=kk).zip(&mp.trace) {
                // least m with m*K >= L*(K-k)
                let need = len * (kk - k);
                let m = t.masked_after;
                checked += 1;
                deviations += usize::from(m * kk < need || (m > 0 && (m - 1) * kk >= need));
            }
        }
    }
    ensure(deviations == 0, format!("L 1..=64 x K 1..=8: {checked} iterations checked, {deviations} deviations"))
}

fn worked_example() -> Check {
    let dec = Hashed { seed: 5 };
    let ef = decode_one(&dec, 0, &fixed(Strategy::EasyFirst, 3, 5)).unwrap();
    let commits: Vec<usize> = ef.trace.iter().map(|t| t.committed.len()).collect();
    let mp = decode_one(&dec, 0, &fixed(Strategy::MaskPredict, 3, 5)).unwrap();
    let masked: Vec<usize> = mp.trace.iter().map(|t| t.masked_after).collect();
    ensure(
        commits == [2, 2, 1] && masked == [4, 2, 0],
        format!("easy-first commits {commits:?}, mask-predict masked after each iteration {masked:?}"),
    )
}

// ---------------------------------------------------------------- 6

fn within_three_sigma(observed: usize, n: usize, p: f64) -> bool {
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (observed as f64 - n as f64 * p).abs() <= 3.0 * sd
}

fn mask_distribution() -> Check {
    let n = 100_000;
    let mut bad = Vec::new();
    for len in [1usize, 5, 12] {
        let mut r = rng::stream(6, "acceptance-mask", len as u64);
        let mut counts = vec![0usize; len + 1];
        let mut positions = vec![0usize; len];
        for _ in 0..n {
            let p = sample_cmlm_partition(len, &mut r).unwrap();
            let m = p.masked_positions();
            counts[m.len()] += 1;
            for i in m {
                positions[i] += 1;
            }
        }
        if counts[0] != 0 {
            bad.push(format!("cmlm T={len} drew an empty mask"));
        }
        for (c, &k) in counts.iter().enumerate().skip(1) {
            if !within_three_sigma(k, n, 1.0 / len as f64) {
                bad.push(format!("cmlm T={len} count {c}"));
            }
        }
        let p_slot = (len + 1) as f64 / (2 * len) as f64;
        for (i, &k) in positions.iter().enumerate() {
            if !within_three_sigma(k, n, p_slot) {
                bad.push(format!("cmlm T={len} position {i}"));
            }
        }
        let mut z = vec![0usize; len + 1];
        let mut r = rng::stream(6, "acceptance-split", len as u64);
        for _ in 0..n {
            z[sample_fmlm_split(len, &mut r)] += 1;
        }
        for (v, &k) in z.iter().enumerate() {
            if !within_three_sigma(k, n, 1.0 / (len + 1) as f64) {
                bad.push(format!("fmlm T={len} Z={v}"));
            }
        }
    }
    ensure(
        bad.is_empty(),
        format!("100k draws each at T in {{1,5,12}}: {}", if bad.is_empty() { "all within 3 sigma".into() } else { bad.join(", ") }),
    )
}

// ---------------------------------------------------------------- 7, 4, 8, 9

struct Trained {
    _dir: tempfile::TempDir,
    corpus: Corpus,
    cmlm: Transformer<f32>,
    fmlm: Transformer<f32>,
    seconds: [f64; 2],
}

fn train_default() -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let base = RunConfig::default();
    cmd_gen(&Context::new(base.clone(), dir.path().to_path_buf())).unwrap();
    let mut seconds = [0.0; 2];
    let mut models = Vec::new();
    for (i, fw) in [Framework::Cmlm, Framework::Fmlm].into_iter().enumerate() {
        let mut cfg = base.clone();
        cfg.train.framework = fw;
        cfg.paths.checkpoint = PathBuf::from(fw.name());
        let ctx = Context::new(cfg, dir.path().to_path_buf());
        let start = Instant::now();
        let summary = cmd_train(&ctx, |r| {
            eprintln!("  [{}] epoch {:>2} loss {:.4} val_cer {:.4}", fw.name(), r.epoch, r.loss, r.val_cer.unwrap_or(f64::NAN));
        })
        .unwrap();
        seconds[i] = start.elapsed().as_secs_f64();
        models.push(checkpoint::load(&summary.checkpoint, None).unwrap().model);
    }
    let fmlm = models.pop().unwrap();
    let cmlm = models.pop().unwrap();
    Trained {
        corpus: Corpus::load(&dir.path().join("corpus")).unwrap(),
        _dir: dir,
        cmlm,
        fmlm,
        seconds,
    }
}

fn decode_all(model: &Transformer<f32>, utts: &[Utterance], cfg: &DecodeConfig) -> Vec<DecodeResult> {
    eval::decode_utterances(model, utts, cfg, 32).unwrap()
}

fn cer_of(utts: &[Utterance], results: &[DecodeResult]) -> f64 {
    let hyps: Vec<Vec<TokenId>> = results.iter().map(|r| r.tokens.clone()).collect();
    corpus_cer(&eval::reference_pairs(utts, &hyps)).unwrap()
}

fn easy_first(k: usize, initial_length: usize) -> DecodeConfig {
    DecodeConfig {
        iterations: k,
        initial_length,
        strategy: Strategy::EasyFirst,
        length_mode: LengthMode::EosAfterFirstPass,
        stop_when_determined: false,
    }
}

fn end_to_end(t: &Trained) -> Check {
    let test = &t.corpus.test;
    let ar = cer_of(test, &decode_all(&t.cmlm, test, &DecodeConfig::autoregressive(32)));
    let cmlm = cer_of(test, &decode_all(&t.cmlm, test, &easy_first(3, 32)));
    let fmlm = cer_of(test, &decode_all(&t.fmlm, test, &easy_first(1, 32)));
    let fmlm_ar = cer_of(test, &decode_all(&t.fmlm, test, &DecodeConfig::autoregressive(32)));
    let [sc, sf] = t.seconds;
    let detail = format!(
        "test CER: AR {:.2}%, CMLM easy-first K=3 {:.2}%, FMLM easy-first K=1 {:.2}% (FMLM model AR {:.2}%); training {:.0}s / {:.0}s",
        ar * 100.0,
        cmlm * 100.0,
        fmlm * 100.0,
        fmlm_ar * 100.0,
        sc,
        sf
    );
    ensure(ar <= 0.02 && cmlm <= ar + 0.03 && fmlm <= ar + 0.03 && sc < 1800.0 && sf < 1800.0, detail)
}

fn one_pass_degeneracy(t: &Trained) -> Check {
    let mut differing = 0;
    let mut total = 0;
    for (name, model) in [("cmlm", &t.cmlm), ("fmlm", &t.fmlm)] {
        let _ = name;
        for split in [Split::Test, Split::Dev] {
            let utts = t.corpus.split(split);
            let len = 32;
            let ef = decode_all(model, utts, &fixed(Strategy::EasyFirst, 1, len));
            let mp = decode_all(model, utts, &fixed(Strategy::MaskPredict, 1, len));
            let shot = decode_all(model, utts, &fixed(Strategy::Schedule(vec![(0..len).collect()]), 1, len));
            let ef_eos = decode_all(model, utts, &easy_first(1, len));
            let mp_eos = decode_all(model, utts, &DecodeConfig { strategy: Strategy::MaskPredict, ..easy_first(1, len) });
            for i in 0..utts.len() {
                total += 1;
                let same = ef[i].tokens == mp[i].tokens && ef[i].tokens == shot[i].tokens && ef_eos[i].tokens == mp_eos[i].tokens;
                differing += usize::from(!same);
            }
        }
    }
    ensure(differing == 0, format!("{total} decodes (test+dev, both models), {differing} differ"))
}

fn speedup_structure(t: &Trained) -> Check {
    let test = &t.corpus.test;
    let k = 3;
    let frames: Vec<_> = test.iter().map(|u| &u.frames).collect();
    let counting = CountingDecoder::new(ModelDecoder::new(&t.cmlm, &frames).unwrap());
    let ids: Vec<usize> = (0..test.len()).collect();
    let mut wrong = 0;
    for strategy in [Strategy::EasyFirst, Strategy::MaskPredict] {
        counting.reset();
        let cfg = DecodeConfig { strategy, ..easy_first(k, 32) };
        for r in decode_batch(&counting, &ids, &cfg, 32).unwrap() {
            let resized = r.length != cfg.initial_length;
            wrong += usize::from(r.passes != k + usize::from(resized) || counting.passes(r.utterance) != r.passes);
        }
    }
    let systems = [
        BenchSystem { name: "ar".into(), model: &t.cmlm, decode: DecodeConfig::autoregressive(32) },
        BenchSystem { name: "easy_first_k3".into(), model: &t.cmlm, decode: easy_first(k, 32) },
    ];
    let report = eval::bench(&systems, test, 1, &[1, 6, 11, 16, 21]).unwrap();
    let ar = &report.systems[0];
    let nat = &report.systems[1];
    ensure(
        wrong == 0 && ar.mean_output_length >= 12.0 && nat.speedup_vs_baseline >= 3.0,
        format!(
            "{wrong} utterances off K(+1); AR mean passes {:.2} (mean output length {:.2}), K=3 mean passes {:.2}, speedup {:.2}x",
            ar.mean_passes, ar.mean_output_length, nat.mean_passes, nat.speedup_vs_baseline
        ),
    )
}

fn deletion_rate(s: &AlignmentStats) -> f64 {
    s.deletions as f64 / s.ref_len as f64
}

fn long_sequence_trend(t: &Trained) -> Check {
    let len = 64;
    let nat = easy_first(3, len);
    let ar = DecodeConfig::autoregressive(len);
    let edges = [1, 6, 11, 16, 21, 41, 61];
    let mut rates = HashMap::new();
    for (split, utts) in [("test", &t.corpus.test), ("stress", &t.corpus.stress)] {
        for (sys, cfg) in [("nat", &nat), ("ar", &ar)] {
            let results = decode_all(&t.cmlm, utts, cfg);
            let hyps: Vec<Vec<TokenId>> = results.iter().map(|r| r.tokens.clone()).collect();
            let pairs = eval::reference_pairs(utts, &hyps);
            let rows = eval::length_bucket_report(&pairs, &edges).unwrap();
            let total = rows.iter().fold(AlignmentStats::default(), |mut acc, r| {
                acc.substitutions += r.stats.substitutions;
                acc.deletions += r.stats.deletions;
                acc.insertions += r.stats.insertions;
                acc.correct += r.stats.correct;
                acc.ref_len += r.stats.ref_len;
                acc
            });
            rates.insert((sys, split), deletion_rate(&total));
        }
    }
    let (nt, ns) = (rates[&("nat", "test")], rates[&("nat", "stress")]);
    let (at, as_) = (rates[&("ar", "test")], rates[&("ar", "stress")]);
    ensure(
        ns >= 2.0 * nt && (as_ - at) < (ns - nt),
        format!(
            "deletion rate NAT {:.2}% -> {:.2}% on stress (+{:.2} points), AR {:.2}% -> {:.2}% (+{:.2} points)",
            nt * 100.0,
            ns * 100.0,
            (ns - nt) * 100.0,
            at * 100.0,
            as_ * 100.0,
            (as_ - at) * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 10

fn levenshtein_exhaustive() -> Check {
    let mut strings: Vec<Vec<u8>> = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..6 {
        let next: Vec<Vec<u8>> = frontier
            .iter()
            .flat_map(|s: &Vec<u8>| (0..3u8).map(move |c| [s.as_slice(), &[c]].concat()))
            .collect();
        strings.extend(next.iter().cloned());
        frontier = next;
    }
    let index: HashMap<Vec<u8>, usize> = strings.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    // one edit away, never longer than 6 symbols
    let adj: Vec<Vec<usize>> = strings
        .iter()
        .map(|s| {
            let mut out = Vec::new();
            for i in 0..s.len() {
                let mut d = s.clone();
                d.remove(i);
                out.push(index[&d]);
                for c in 0..3u8 {
                    if c != s[i] {
                        let mut t = s.clone();
                        t[i] = c;
                        out.push(index[&t]);
                    }
                }
            }
            if s.len() < 6 {
                for i in 0..=s.len() {
                    for c in 0..3u8 {
                        let mut t = s.clone();
                        t.insert(i, c);
                        out.push(index[&t]);
                    }
                }
            }
            out
        })
        .collect();
    let mut mismatches = 0usize;
    for (a, r) in strings.iter().enumerate() {
        let mut dist = vec![usize::MAX; strings.len()];
        dist[a] = 0;
        let mut q = VecDeque::from([a]);
        while let Some(u) = q.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    q.push_back(v);
                }
            }
        }
        for (b, h) in strings.iter().enumerate() {
            let s = levenshtein_align(r, h);
            let consistent = s.substitutions + s.deletions + s.correct == r.len()
                && s.substitutions + s.insertions + s.correct == h.len();
            mismatches += usize::from(s.distance() != dist[b] || !consistent);
        }
    }
    let kitten = levenshtein_align(b"kitten", b"sitting").distance();
    ensure(
        mismatches == 0 && kitten == 3,
        format!("{} pairs over {{a,b,c}} up to length 6, {mismatches} mismatches; kitten/sitting = {kitten}", strings.len().pow(2)),
    )
}

// ---------------------------------------------------------------- 11

fn determinism() -> Check {
    let mut cfg = RunConfig::default();
    cfg.task.train_size = 400;
    cfg.task.dev_size = 40;
    cfg.task.test_size = 40;
    cfg.train.epochs = 2;
    cfg.train.val_size = 20;
    let mut files: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for fw in [Framework::Cmlm, Framework::Fmlm] {
        let mut runs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().unwrap();
            let mut c = cfg.clone();
            c.train.framework = fw;
            let ctx = Context::new(c, dir.path().to_path_buf());
            cmd_gen(&ctx).unwrap();
            cmd_train(&ctx, |_| {}).unwrap();
            let hyps = cmd_decode(&ctx, None, Split::Test).unwrap();
            read_hyps(&hyps).unwrap();
            let mut out = Vec::new();
            for f in ["checkpoint/tensors.bin", "checkpoint/manifest.txt", "checkpoint/model.toml", "reports/hyps_test.jsonl"] {
                out.push((format!("{}:{f}", fw.name()), std::fs::read(dir.path().join(f)).unwrap()));
            }
            runs.push(out);
        }
        files.extend(runs);
    }
    let differing: Vec<String> = files
        .chunks(2)
        .flat_map(|pair| pair[0].iter().zip(&pair[1]).filter(|(a, b)| a.1 != b.1).map(|(a, _)| a.0.clone()))
        .collect();
    ensure(
        differing.is_empty(),
        format!(
            "two runs per framework: {}",
            if differing.is_empty() { "checkpoints and hypotheses bit-identical".into() } else { format!("differ: {}", differing.join(", ")) }
        ),
    )
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let trained: OnceCell<Trained> = OnceCell::new();
    let model = || trained.get_or_init(train_default);
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Check + '_>)> = vec![
        (1, "gradient integrity", Box::new(gradient_integrity)),
        (2, "autoregressive equivalence", Box::new(autoregressive_equivalence)),
        (3, "schedule-count exactness", Box::new(schedule_counts)),
        (4, "one-pass degeneracy", Box::new(|| one_pass_degeneracy(model()))),
        (5, "worked example", Box::new(worked_example)),
        (6, "mask distributions", Box::new(mask_distribution)),
        (7, "end-to-end training", Box::new(|| end_to_end(model()))),
        (8, "speedup structure", Box::new(|| speedup_structure(model()))),
        (9, "long-sequence degradation", Box::new(|| long_sequence_trend(model()))),
        (10, "levenshtein correctness", Box::new(levenshtein_exhaustive)),
        (11, "determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (n, name, run) in &criteria {
        if !selected(*n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {status} {name}: {detail} [{:.1}s]", start.elapsed().as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
