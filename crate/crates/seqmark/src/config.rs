//! Model and training configuration, plus the flat `key=value` config file
//! format. Unknown keys are rejected so typos cannot silently fall back to
//! defaults.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TokenizeMode;
use crate::error::{Error, Result};

/// Which bidirectional extractor sits between the encoder and the fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extractor {
    Mamba2,
    Lstm,
}

/// Everything that determines the model's architecture and parameter
/// manifest. Stored inside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_depth: usize,
    pub d_ff: usize,
    pub d_adj: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub conv_kernel: usize,
    pub h1: usize,
    pub h2: usize,
    pub n_max: usize,
    pub vocab_size: usize,
    pub extractor: Extractor,
    pub use_encoder: bool,
    pub use_attention_fusion: bool,
    pub use_skip_connection: bool,
    pub use_crf: bool,
    pub constrained_decode: bool,
    pub tokenize: TokenizeMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: every component on, Mamba2 extractor.
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            encoder_depth: 2,
            d_ff: 64,
            d_adj: 32,
            d_inner: 64,
            d_state: 4,
            conv_kernel: 3,
            h1: 64,
            h2: 32,
            n_max: 64,
            vocab_size: 64,
            extractor: Extractor::Mamba2,
            use_encoder: true,
            use_attention_fusion: true,
            use_skip_connection: true,
            use_crf: true,
            constrained_decode: false,
            tokenize: TokenizeMode::Char,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Compact widths for gradient verification: small enough that probing
    /// every scalar with finite differences stays fast.
    pub fn gradcheck_desk() -> Self {
        ModelConfig {
            d_model: 8,
            encoder_depth: 1,
            d_ff: 16,
            d_adj: 8,
            d_inner: 16,
            d_state: 4,
            conv_kernel: 3,
            h1: 8,
            h2: 4,
            n_max: 6,
            vocab_size: 12,
            ..ModelConfig::default()
        }
    }

    /// Rejects impossible dimensions, naming the offending field.
    /// `encoder_depth` 0 is legal (embeddings only), so it is not checked.
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("d_adj", self.d_adj),
            ("d_inner", self.d_inner),
            ("d_state", self.d_state),
            ("conv_kernel", self.conv_kernel),
            ("h1", self.h1),
            ("h2", self.h2),
            ("n_max", self.n_max),
            ("vocab_size", self.vocab_size),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Knobs for the optimization loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Early-stop after this many epochs without a validation-loss
    /// improvement; `None` disables early stopping.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults; see [`TrainConfig::paper_preset`] for the
    /// published learning rate.
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 50,
            patience: Some(10),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The published setting: Adam at learning rate 1e-5. Much slower to
    /// converge at desk scale than the default.
    pub fn paper_preset() -> Self {
        TrainConfig {
            lr: 1e-5,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parsed contents of one config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty key".into(),
            });
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("duplicate key {key:?}"),
            });
        }
    }
    Ok(map)
}

struct KvReader {
    map: BTreeMap<String, String>,
}

impl KvReader {
    fn take_usize(&mut self, key: &str, into: &mut usize) -> Result<()> {
        if let Some(v) = self.map.remove(key) {
            *into = v.parse().map_err(|_| {
                Error::Config(format!("{key}: expected a non-negative integer, got {v:?}"))
            })?;
        }
        Ok(())
    }

    fn take_u64(&mut self, key: &str, into: &mut u64) -> Result<()> {
        if let Some(v) = self.map.remove(key) {
            *into = v.parse().map_err(|_| {
                Error::Config(format!("{key}: expected a non-negative integer, got {v:?}"))
            })?;
        }
        Ok(())
    }

    fn take_f64(&mut self, key: &str, into: &mut f64) -> Result<()> {
        if let Some(v) = self.map.remove(key) {
            *into = v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))?;
        }
        Ok(())
    }

    fn take_bool(&mut self, key: &str, into: &mut bool) -> Result<()> {
        if let Some(v) = self.map.remove(key) {
            *into = match v.as_str() {
                "true" => true,
                "false" => false,
                _ => {
                    return Err(Error::Config(format!(
                        "{key}: expected true or false, got {v:?}"
                    )))
                }
            };
        }
        Ok(())
    }
}

/// Parses a flat `key=value` config (see the crate README for the key list).
/// Missing keys keep their defaults; unknown keys are an error.
pub fn parse_config_str(text: &str) -> Result<ConfigFile> {
    let mut reader = KvReader {
        map: parse_kv(text)?,
    };
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();

    reader.take_usize("d_model", &mut model.d_model)?;
    reader.take_usize("encoder_depth", &mut model.encoder_depth)?;
    reader.take_usize("d_ff", &mut model.d_ff)?;
    reader.take_usize("d_adj", &mut model.d_adj)?;
    reader.take_usize("d_inner", &mut model.d_inner)?;
    reader.take_usize("d_state", &mut model.d_state)?;
    reader.take_usize("conv_kernel", &mut model.conv_kernel)?;
    reader.take_usize("h1", &mut model.h1)?;
    reader.take_usize("h2", &mut model.h2)?;
    reader.take_usize("n_max", &mut model.n_max)?;
    reader.take_usize("vocab_size", &mut model.vocab_size)?;
    reader.take_bool("use_encoder", &mut model.use_encoder)?;
    reader.take_bool("use_attention_fusion", &mut model.use_attention_fusion)?;
    reader.take_bool("use_skip_connection", &mut model.use_skip_connection)?;
    reader.take_bool("use_crf", &mut model.use_crf)?;
    reader.take_bool("constrained_decode", &mut model.constrained_decode)?;
    reader.take_u64("seed", &mut model.seed)?;
    if let Some(v) = reader.map.remove("extractor") {
        model.extractor = match v.as_str() {
            "mamba2" => Extractor::Mamba2,
            "lstm" => Extractor::Lstm,
            _ => {
                return Err(Error::Config(format!(
                    "extractor: expected mamba2 or lstm, got {v:?}"
                )))
            }
        };
    }
    if let Some(v) = reader.map.remove("tokenize") {
        model.tokenize = match v.as_str() {
            "char" => TokenizeMode::Char,
            "whitespace" => TokenizeMode::Whitespace,
            _ => {
                return Err(Error::Config(format!(
                    "tokenize: expected char or whitespace, got {v:?}"
                )))
            }
        };
    }

    reader.take_f64("lr", &mut train.lr)?;
    reader.take_usize("epochs", &mut train.epochs)?;
    reader.take_u64("train_seed", &mut train.seed)?;
    if let Some(v) = reader.map.remove("patience") {
        train.patience = if v == "none" {
            None
        } else {
            Some(v.parse().map_err(|_| {
                Error::Config(format!(
                    "patience: expected a non-negative integer or none, got {v:?}"
                ))
            })?)
        };
    }

    if !reader.map.is_empty() {
        let unknown: Vec<&str> = reader.map.keys().map(String::as_str).collect();
        return Err(Error::Config(format!(
            "unknown config keys: {}",
            unknown.join(", ")
        )));
    }
    model.validate()?;
    train.validate()?;
    Ok(ConfigFile { model, train })
}

/// Reads and parses a config file from disk.
pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}
