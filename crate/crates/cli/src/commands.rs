use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nar_core::decode::{DecodeConfig, IterationTrace, Strategy};
use nar_core::eval::{self, AlignmentStats, BenchReport, BenchSystem, BucketRow};
use nar_core::model::Transformer;
use nar_core::synth::{self, Corpus, Split, SynthTask};
use nar_core::train::{self, EpochRecord};
use nar_core::{TokenId, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Effective configuration plus the directory every relative path hangs off.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn new(config: RunConfig, out: PathBuf) -> Self {
        Context { config, out }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.out.join(&self.config.paths.corpus_dir)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out.join(&self.config.paths.checkpoint)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out.join(&self.config.paths.report_dir)
    }

    pub fn hyps_path(&self, split: Split) -> PathBuf {
        self.report_dir().join(format!("hyps_{}.jsonl", split.name()))
    }

    fn vocab(&self) -> Result<Vocabulary> {
        Ok(Vocabulary::synthetic(self.config.task.vocab_size)?)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())
}

pub struct GenSummary {
    pub dir: PathBuf,
    pub sizes: Vec<(Split, usize)>,
}

pub fn cmd_gen(ctx: &Context) -> Result<GenSummary> {
    let task = SynthTask::new(ctx.config.task.clone())?;
    let corpus = task.gen_corpus();
    let dir = ctx.corpus_dir();
    corpus.save(&dir)?;
    for split in Split::ALL {
        let text = synth::manifest(corpus.split(split), task.vocab());
        write_file(&dir.join(format!("{}.tsv", split.name())), text.as_bytes())?;
    }
    write_config(&dir, &ctx.config)?;
    Ok(GenSummary {
        dir,
        sizes: Split::ALL.iter().map(|&s| (s, corpus.split(s).len())).collect(),
    })
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: Vec<EpochRecord>,
    pub parameters: usize,
}

pub fn cmd_train(ctx: &Context, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainSummary> {
    let cfg = &ctx.config;
    let corpus = Corpus::load(&ctx.corpus_dir())?;
    let mut model = Transformer::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let report_dir = ctx.report_dir();
    create_dir(&report_dir)?;
    let metrics_path = report_dir.join(format!("metrics_{}.jsonl", cfg.train.framework.name()));
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    let mut write_err = None;
    let outcome = train::train(&mut model, &corpus.train, &corpus.dev, &cfg.train, |rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        if let Err(e) = writeln!(metrics, "{line}") {
            write_err.get_or_insert(e);
        }
        on_epoch(rec);
    })?;
    if let Some(e) = write_err {
        return Err(CliError::io(&metrics_path, e));
    }
    let dir = ctx.checkpoint_dir();
    checkpoint::save(&dir, &model, outcome.step as u64, cfg.seed, Some(&outcome.optimizer))?;
    write_config(&dir, cfg)?;
    Ok(TrainSummary {
        checkpoint: dir,
        log: outcome.log,
        parameters: model.param_count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypHeader {
    pub checkpoint: String,
    pub split: Split,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypRecord {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub passes: usize,
    pub length: usize,
    pub trace: Vec<IterationTrace>,
}

/// Decodes one split with the configured strategy. Writes a JSON-lines file
/// whose first line is `{"header": ...}` and every other line one
/// [`HypRecord`].
pub fn cmd_decode(ctx: &Context, checkpoint: Option<&Path>, split: Split) -> Result<PathBuf> {
    let cfg = &ctx.config;
    let ck_dir = checkpoint.map_or_else(|| ctx.checkpoint_dir(), Path::to_path_buf);
    let ck = checkpoint::load(&ck_dir, Some(&cfg.model))?;
    let data = synth::read_split(&ctx.corpus_dir().join(format!("{}.bin", split.name())))?;
    let vocab = ctx.vocab()?;
    let results = eval::decode_utterances(&ck.model, &data, &cfg.decode, 16)?;
    // as configured (relative to the output directory) or as given, so the
    // file does not depend on where the run lives
    let header = HypHeader {
        checkpoint: checkpoint.unwrap_or(&cfg.paths.checkpoint).display().to_string(),
        split,
        config: cfg.clone(),
    };
    let mut out = serde_json::to_string(&serde_json::json!({ "header": header })).expect("header serializes");
    out.push('\n');
    for (u, r) in data.iter().zip(results) {
        let rec = HypRecord {
            id: u.id.clone(),
            text: vocab.render(&r.tokens),
            tokens: r.tokens,
            passes: r.passes,
            length: r.length,
            trace: r.trace,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    let dir = ctx.report_dir();
    create_dir(&dir)?;
    let path = ctx.hyps_path(split);
    write_file(&path, out.as_bytes())?;
    Ok(path)
}

pub fn read_hyps(path: &Path) -> Result<(HypHeader, Vec<HypRecord>)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    let bad = |what: &str| CliError::Input(format!("{}: {what}", path.display()));
    #[derive(Deserialize)]
    struct Wrapped {
        header: HypHeader,
    }
    let header: Wrapped = lines
        .next()
        .and_then(|l| serde_json::from_str(l).ok())
        .ok_or_else(|| bad("missing hypotheses header"))?;
    let records = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| bad(&format!("bad record: {e}"))))
        .collect::<Result<Vec<HypRecord>>>()?;
    Ok((header.header, records))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub utterances: usize,
    pub cer: f64,
    pub stats: AlignmentStats,
    pub buckets: Vec<BucketRow>,
}

impl EvalSummary {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\n", BucketRow::HEADER);
        for b in &self.buckets {
            s.push_str(&b.to_tsv());
            s.push('\n');
        }
        s
    }
}

/// Token sequences keyed by utterance id, from a corpus split (`.bin`,
/// content tokens without EOS) or a hypotheses file.
fn load_sequences(path: &Path) -> Result<HashMap<String, Vec<TokenId>>> {
    if path.extension().is_some_and(|e| e == "bin") {
        let data = synth::read_split(path)?;
        Ok(data.into_iter().map(|u| (u.id.clone(), u.content().to_vec())).collect())
    } else {
        let (_, recs) = read_hyps(path)?;
        Ok(recs.into_iter().map(|r| (r.id, r.tokens)).collect())
    }
}

/// Scores a hypotheses file. References default to the corpus split named in
/// its header.
pub fn cmd_eval(ctx: &Context, hyps: &Path, refs: Option<&Path>) -> Result<EvalSummary> {
    let (header, records) = read_hyps(hyps)?;
    let ref_path = refs.map_or_else(
        || ctx.corpus_dir().join(format!("{}.bin", header.split.name())),
        Path::to_path_buf,
    );
    let references = load_sequences(&ref_path)?;
    let mut pairs_owned = Vec::with_capacity(records.len());
    for r in &records {
        let reference = references
            .get(&r.id)
            .ok_or_else(|| CliError::Input(format!("no reference for utterance {}", r.id)))?;
        pairs_owned.push((reference.as_slice(), r.tokens.as_slice()));
    }
    let stats = eval::corpus_stats(&pairs_owned);
    let summary = EvalSummary {
        utterances: records.len(),
        cer: eval::corpus_cer(&pairs_owned)?,
        stats,
        buckets: eval::length_bucket_report(&pairs_owned, &ctx.config.eval.bucket_edges)?,
    };
    let dir = ctx.report_dir();
    create_dir(&dir)?;
    let stem = hyps.file_stem().map_or("hyps".into(), |s| s.to_string_lossy().into_owned());
    write_file(&dir.join(format!("eval_{stem}.tsv")), summary.to_tsv().as_bytes())?;
    Ok(summary)
}

/// Compares the left-to-right baseline with easy-first and mask-predict at
/// each configured iteration budget, for every checkpoint.
pub fn cmd_bench(ctx: &Context, checkpoints: &[PathBuf]) -> Result<BenchReport> {
    let cfg = &ctx.config;
    let dirs = if checkpoints.is_empty() {
        vec![ctx.checkpoint_dir()]
    } else {
        checkpoints.to_vec()
    };
    let models = dirs
        .iter()
        .map(|d| {
            let label = d.file_name().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            Ok((label, checkpoint::load(d, Some(&cfg.model))?.model))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = synth::read_split(&ctx.corpus_dir().join(format!("{}.bin", cfg.bench.split.name())))?;
    let mut systems = Vec::new();
    for (label, model) in &models {
        systems.push(BenchSystem {
            name: format!("{label}:ar"),
            model,
            decode: DecodeConfig::autoregressive(cfg.bench.ar_initial_length),
        });
        for &k in &cfg.bench.iterations {
            for (name, strategy) in [("easy_first", Strategy::EasyFirst), ("mask_predict", Strategy::MaskPredict)] {
                systems.push(BenchSystem {
                    name: format!("{label}:{name}_k{k}"),
                    model,
                    decode: DecodeConfig {
                        iterations: k,
                        strategy,
                        ..cfg.decode.clone()
                    },
                });
            }
        }
    }
    let report = eval::bench(&systems, &data, cfg.bench.repetitions, &cfg.bench.bucket_edges)?;
    let dir = ctx.report_dir();
    create_dir(&dir)?;
    write_file(&dir.join("bench.tsv"), report.to_tsv().as_bytes())?;
    let json = serde_json::json!({ "config": cfg, "report": report });
    write_file(
        &dir.join("bench.json"),
        serde_json::to_string_pretty(&json).expect("report serializes").as_bytes(),
    )?;
    Ok(report)
}
