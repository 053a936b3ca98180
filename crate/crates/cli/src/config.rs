//! Run configuration: defaults, then a JSON config file, then command-line
//! flags and `--set key=value` overrides.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{Context, Result};
use llavul::classifier::ClassifierConfig;
use llavul::data::SplitRatios;
use llavul::model::DecodeConfig;
use llavul::trainer::StageConfig;
use llavul::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::errors::{CliError, Kind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerSettings {
    pub vocab_size: usize,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        TokenizerSettings { vocab_size: llavul::tokenizer::DEFAULT_VOCAB_SIZE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QagenSettings {
    pub endpoint: Option<String>,
    pub timeout_secs: f64,
    pub retries: usize,
    pub turn_cap: Option<usize>,
    pub max_tokens: usize,
    pub temperature: f64,
}

impl Default for QagenSettings {
    fn default() -> Self {
        QagenSettings { endpoint: None, timeout_secs: 60.0, retries: 2, turn_cap: None, max_tokens: 1024, temperature: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub max_code_tokens: usize,
    pub tokenizer: TokenizerSettings,
    pub model: ModelConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub decode: DecodeConfig,
    pub classifier: ClassifierConfig,
    pub qagen: QagenSettings,
    pub split: SplitRatios,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            max_code_tokens: 1000,
            tokenizer: TokenizerSettings::default(),
            model: ModelConfig::default(),
            pretrain: StageConfig::pretrain(),
            finetune: StageConfig::finetune(),
            decode: DecodeConfig::default(),
            classifier: ClassifierConfig::default(),
            qagen: QagenSettings::default(),
            split: SplitRatios::default(),
        }
    }
}

/// Values that follow the top-level `seed` / `max_code_tokens` unless set
/// explicitly.
const SEED_PATHS: [&str; 5] = ["model.seed", "pretrain.seed", "finetune.seed", "decode.seed", "classifier.seed"];
const CODE_TOKEN_PATHS: [&str; 3] =
    ["pretrain.max_code_tokens", "finetune.max_code_tokens", "classifier.max_code_tokens"];

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    CliError::new(Kind::Config, msg).into()
}

/// Merges `src` into `dst`, recording every leaf path written. Keys must
/// already exist in `dst`; unset optional fields are present as null.
fn merge(dst: &mut Value, src: &Value, prefix: &str, set: &mut BTreeSet<String>) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match d.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &path, set)?,
                    Some(slot) => {
                        *slot = v.clone();
                        set.insert(path);
                    }
                    None => return Err(config_err(format!("unknown config key {path}"))),
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s.clone();
            set.insert(prefix.to_string());
            Ok(())
        }
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| config_err(format!("{path}: {part} is not a section")))?;
        if !obj.contains_key(*part) {
            return Err(config_err(format!("unknown config key {path}")));
        }
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked");
    }
    Err(config_err("empty override key"))
}

pub struct Overrides<'a> {
    pub file: Option<&'a Path>,
    pub seed: Option<u64>,
    pub max_code_tokens: Option<usize>,
    pub sets: &'a [String],
}

pub fn resolve(o: &Overrides<'_>) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut explicit = BTreeSet::new();
    if let Some(path) = o.file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new(Kind::MissingInput, format!("config file {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| config_err(format!("config file {}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(config_err("config file must hold a JSON object"));
        }
        merge(&mut value, &file, "", &mut explicit)?;
    }
    if let Some(seed) = o.seed {
        set_path(&mut value, "seed", seed.into())?;
    }
    if let Some(m) = o.max_code_tokens {
        set_path(&mut value, "max_code_tokens", m.into())?;
    }
    for kv in o.sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| config_err(format!("override {kv:?} is not key=value")))?;
        set_path(&mut value, k.trim(), parse_value(v.trim()))?;
        explicit.insert(k.trim().to_string());
    }
    let seed = value["seed"].clone();
    for p in SEED_PATHS {
        if !explicit.contains(p) {
            set_path(&mut value, p, seed.clone())?;
        }
    }
    let mct = value["max_code_tokens"].clone();
    for p in CODE_TOKEN_PATHS {
        if !explicit.contains(p) {
            set_path(&mut value, p, mct.clone())?;
        }
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| config_err(format!("invalid config: {e}")))?;
    cfg.pretrain.validate().context("pretrain section").map_err(|e| config_err(format!("{e:#}")))?;
    cfg.finetune.validate().context("finetune section").map_err(|e| config_err(format!("{e:#}")))?;
    cfg.classifier.validate().map_err(|e| config_err(format!("classifier section: {e}")))?;
    Ok(cfg)
}
