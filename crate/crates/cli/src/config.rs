use std::path::{Path, PathBuf};

use nar_core::decode::DecodeConfig;
use nar_core::model::ModelConfig;
use nar_core::synth::{Split, TaskConfig};
use nar_core::train::TrainConfig;
use nar_core::Vocabulary;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "NAR_OUT_DIR";

/// Artifact locations, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus_dir: "corpus".into(),
            checkpoint: "checkpoint".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Iteration budgets tried for easy-first and mask-predict.
    pub iterations: Vec<usize>,
    pub repetitions: usize,
    pub split: Split,
    /// Hypothesis length for the left-to-right baseline, which stops at its
    /// first committed EOS.
    pub ar_initial_length: usize,
    pub bucket_edges: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            iterations: vec![1, 2, 3],
            repetitions: 3,
            split: Split::Test,
            ar_initial_length: 32,
            bucket_edges: vec![1, 6, 11, 16, 21, 41, 61],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bucket_edges: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bucket_edges: BenchConfig::default().bucket_edges,
        }
    }
}

/// Everything a run needs, loaded from one TOML file plus overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; also drives model initialization.
    pub seed: u64,
    pub paths: Paths,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            paths: Paths::default(),
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML text, applies `KEY=VALUE` overrides (dotted keys) and an
    /// optional global seed, then validates. Unknown keys are rejected.
    pub fn load(text: &str, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| CliError::Config(format!("config parse: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
            cfg.task.seed = s;
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => String::new(),
        };
        Self::load(&text, overrides, seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        let specials = Vocabulary::FIRST_CONTENT as usize;
        if self.model.vocab_size != self.task.vocab_size + specials {
            return Err(CliError::Config(format!(
                "model.vocab_size must be task.vocab_size + {specials} = {}",
                self.task.vocab_size + specials
            )));
        }
        if self.model.feature_dim != self.task.feature_dim {
            return Err(CliError::Config("model.feature_dim must equal task.feature_dim".into()));
        }
        if self.bench.repetitions == 0 || self.bench.iterations.contains(&0) {
            return Err(CliError::Config("bench: repetitions and iterations must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// SHA-256 of the canonical TOML rendering of a model configuration.
pub fn model_digest(model: &ModelConfig) -> String {
    let text = toml::to_string(model).expect("model config is serializable");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
