//! Checkpoint directories.
//!
//! ```text
//! manifest.txt   format_version 1
//!                config_digest <sha256 of model.toml's canonical form>
//!                step <n>
//!                seed <n>
//!                adam <step> <beta1> <beta2> <eps>   (only with optimizer state)
//!                tensor <name> <dtype> <d0>x<d1>... <byte offset> <byte length>
//! tensors.bin    raw little-endian tensor data at the listed offsets
//! model.toml     model configuration
//! ```

use std::fs;
use std::path::Path;

use nar_core::model::{ModelConfig, Transformer};
use nar_tensor::{Adam, AdamConfig, DType, Float, Tensor};

use crate::config::model_digest;
use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;
const FIRST_MOMENT: &str = "adam.first.";
const SECOND_MOMENT: &str = "adam.second.";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Transformer<f32>,
    pub step: u64,
    pub seed: u64,
    pub optimizer: Option<Adam<f32>>,
}

pub fn save(dir: &Path, model: &Transformer<f32>, step: u64, seed: u64, optimizer: Option<&Adam<f32>>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut named: Vec<(String, &[f32], Vec<usize>)> = model
        .names()
        .iter()
        .zip(model.params())
        .map(|(n, t)| (n.clone(), t.data(), t.shape().to_vec()))
        .collect();
    if let Some(opt) = optimizer {
        let (first, second) = opt.moments();
        for (prefix, moments) in [(FIRST_MOMENT, first), (SECOND_MOMENT, second)] {
            for ((n, t), m) in model.names().iter().zip(model.params()).zip(moments) {
                named.push((format!("{prefix}{n}"), m.as_slice(), t.shape().to_vec()));
            }
        }
    }
    let mut manifest = format!(
        "format_version {FORMAT_VERSION}\nconfig_digest {}\nstep {step}\nseed {seed}\n",
        model_digest(model.config())
    );
    if let Some(opt) = optimizer {
        let c = opt.config();
        manifest.push_str(&format!("adam {} {:e} {:e} {:e}\n", opt.step_count(), c.beta1, c.beta2, c.eps));
    }
    let mut blob = Vec::new();
    for (name, data, shape) in &named {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        let bytes = f32::to_le_bytes_vec(data);
        manifest.push_str(&format!(
            "tensor {name} {} {} {} {}\n",
            DType::F32.name(),
            dims.join("x"),
            blob.len(),
            bytes.len()
        ));
        blob.extend_from_slice(&bytes);
    }
    let model_toml = toml::to_string(model.config()).expect("model config is serializable");
    for (file, contents) in [
        ("tensors.bin", blob.as_slice()),
        ("manifest.txt", manifest.as_bytes()),
        ("model.toml", model_toml.as_bytes()),
    ] {
        let p = dir.join(file);
        fs::write(&p, contents).map_err(|e| CliError::io(&p, e))?;
    }
    Ok(())
}

/// Loads a checkpoint. With `expected`, refuses one whose model
/// configuration digest differs.
pub fn load(dir: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let read = |f: &str| {
        let p = dir.join(f);
        fs::read(&p).map_err(|e| CliError::io(&p, e))
    };
    let manifest = String::from_utf8(read("manifest.txt")?)
        .map_err(|_| CliError::Checkpoint("manifest is not utf-8".into()))?;
    let blob = read("tensors.bin")?;
    let model_text = String::from_utf8(read("model.toml")?)
        .map_err(|_| CliError::Checkpoint("model.toml is not utf-8".into()))?;
    let config: ModelConfig =
        toml::from_str(&model_text).map_err(|e| CliError::Checkpoint(format!("model.toml: {}", e.message())))?;

    let bad = |msg: String| CliError::Checkpoint(format!("{}: {msg}", dir.display()));
    let mut version = None;
    let mut digest = None;
    let (mut step, mut seed, mut adam_step) = (0u64, 0u64, None);
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad(format!("bad number in {line:?}")));
        match f.as_slice() {
            ["format_version", v] => version = Some(num(v)?),
            ["config_digest", d] => digest = Some(d.to_string()),
            ["step", v] => step = num(v)?,
            ["seed", v] => seed = num(v)?,
            ["adam", v, b1, b2, eps] => {
                let float = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number in {line:?}")));
                let config = AdamConfig {
                    beta1: float(b1)?,
                    beta2: float(b2)?,
                    eps: float(eps)?,
                };
                adam_step = Some((num(v)?, config));
            }
            ["tensor", name, dtype, dims, offset, len] => {
                if *dtype != DType::F32.name() {
                    return Err(bad(format!("unsupported dtype {dtype}")));
                }
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad shape {dims}"))))
                    .collect::<Result<Vec<_>>>()?;
                let (offset, len) = (num(offset)? as usize, num(len)? as usize);
                let bytes = blob
                    .get(offset..offset + len)
                    .ok_or_else(|| bad(format!("tensor {name} lies outside tensors.bin")))?;
                let t = Tensor::new(shape, f32::from_le_bytes_slice(bytes))
                    .map_err(|e| bad(format!("tensor {name}: {e}")))?;
                tensors.push((name.to_string(), t));
            }
            _ => return Err(bad(format!("unrecognized manifest line {line:?}"))),
        }
    }
    if version != Some(FORMAT_VERSION as u64) {
        return Err(bad(format!("unsupported format version {version:?}")));
    }
    let digest = digest.ok_or_else(|| bad("missing config digest".into()))?;
    if digest != model_digest(&config) {
        return Err(bad("config digest does not match model.toml".into()));
    }
    if let Some(want) = expected {
        if model_digest(want) != digest {
            return Err(bad("model configuration differs from the checkpoint's (config digest mismatch)".into()));
        }
    }
    let (mut params, mut first, mut second) = (Vec::new(), Vec::new(), Vec::new());
    for (name, t) in tensors {
        if let Some(n) = name.strip_prefix(FIRST_MOMENT) {
            first.push((n.to_string(), t.into_data()));
        } else if let Some(n) = name.strip_prefix(SECOND_MOMENT) {
            second.push((n.to_string(), t.into_data()));
        } else {
            params.push((name, t));
        }
    }
    let model = Transformer::from_named(config, params)?;
    let optimizer = match adam_step {
        None => None,
        Some((s, adam_config)) => {
            let names_match = |m: &[(String, Vec<f32>)]| {
                m.len() == model.names().len() && m.iter().zip(model.names()).all(|((a, _), b)| a == b)
            };
            if !names_match(&first) || !names_match(&second) {
                return Err(bad("optimizer state does not match parameters".into()));
            }
            let unzip = |m: Vec<(String, Vec<f32>)>| m.into_iter().map(|(_, v)| v).collect();
            let adam = Adam::from_state(adam_config, s, unzip(first), unzip(second))
                .map_err(|e| bad(format!("optimizer state: {e}")))?;
            Some(adam)
        }
    };
    Ok(Checkpoint {
        model,
        step,
        seed,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            feedforward_dim: 8,
            n_encoder_blocks: 1,
            n_decoder_blocks: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = Transformer::<f32>::new(small(), 4).unwrap();
        let adam = Adam::new(AdamConfig::default(), model.params());
        save(dir.path(), &model, 12, 4, Some(&adam)).unwrap();
        let ck = load(dir.path(), Some(&small())).unwrap();
        assert_eq!((ck.step, ck.seed), (12, 4));
        for (a, b) in model.params().iter().zip(ck.model.params()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(ck.optimizer.unwrap().moments(), adam.moments());
    }

    #[test]
    fn refuses_mismatched_or_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let model = Transformer::<f32>::new(small(), 4).unwrap();
        save(dir.path(), &model, 1, 1, None).unwrap();
        let other = ModelConfig { d_model: 16, ..small() };
        assert!(matches!(load(dir.path(), Some(&other)), Err(CliError::Checkpoint(_))));
        let p = dir.path().join("manifest.txt");
        let text = fs::read_to_string(&p).unwrap().replace("format_version 1", "format_version 2");
        fs::write(&p, text).unwrap();
        assert!(matches!(load(dir.path(), None), Err(CliError::Checkpoint(_))));
    }
}
