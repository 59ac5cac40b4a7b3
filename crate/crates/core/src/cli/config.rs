use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const PRESET_TABLE3_OCC: &str = "preset:table3-occ";
pub const PRESET_TABLE3_STD: &str = "preset:table3-std";
pub const PRESET_DESK: &str = "preset:desk";
pub const PRESETS: [&str; 3] = [PRESET_TABLE3_OCC, PRESET_TABLE3_STD, PRESET_DESK];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSettings {
    pub vocab_size: usize,
}

/// Everything a training command resolves before it starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tokenizer: TokenizerSettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        preset(PRESET_DESK).expect("built-in preset")
    }
}

/// Built-in configurations. The two `table3` presets carry the tuned
/// optima for the occlusion (6 blocks, 4 heads, p = 0.3) and standard
/// (8 blocks, 8 heads) models; `desk` is the laptop-scale setup.
pub fn preset(name: &str) -> Result<RunConfig> {
    let table3 = |occlusion: bool| RunConfig {
        tokenizer: TokenizerSettings {
            vocab_size: crate::tokenizer::DEFAULT_VOCAB_SIZE,
        },
        model: ModelConfig {
            n_layers: if occlusion { 6 } else { 8 },
            n_heads: if occlusion { 4 } else { 8 },
            dropout: 0.3,
            ..ModelConfig::default()
        },
        train: TrainConfig::table3(occlusion),
    };
    match name {
        PRESET_TABLE3_OCC => Ok(table3(true)),
        PRESET_TABLE3_STD => Ok(table3(false)),
        PRESET_DESK => Ok(RunConfig {
            tokenizer: TokenizerSettings { vocab_size: 512 },
            model: ModelConfig {
                vocab_size: 512,
                block_size: 64,
                d_model: 64,
                n_layers: 2,
                n_heads: 2,
                dropout: 0.1,
                ffn_mult: 4,
                tie_embeddings: true,
                activation: Default::default(),
            },
            train: TrainConfig {
                batch_size: 16,
                max_epochs: 10,
                base_lr: 2e-3,
                ..TrainConfig::default()
            },
        }),
        other => Err(Error::Config(format!(
            "unknown preset {other:?} (known: {})",
            PRESETS.join(", ")
        ))),
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<toml::Value> {
    toml::Value::try_from(v).map_err(|e| Error::Config(format!("cannot represent config: {e}")))
}

/// Overlays `top` onto `base`, table by table. Keys absent from `base` are
/// rejected so that typos do not pass silently.
fn merge(base: &mut toml::Value, top: &toml::Value, path: &str) -> Result<()> {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None if is_optional_key(&here) => {
                        b.insert(k.clone(), v.clone());
                    }
                    None => return Err(Error::Config(format!("unknown config key {here:?}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

// Optional fields are omitted from serialized TOML when unset.
fn is_optional_key(path: &str) -> bool {
    matches!(path, "train.grad_clip")
}

/// File layout: an optional `preset = "..."` line, then `[tokenizer]`,
/// `[model]` and `[train]` tables holding any subset of fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub body: toml::Value,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut body: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::format("config file", e.to_string()))?;
        let preset = match body.as_table_mut().and_then(|t| t.remove("preset")) {
            Some(toml::Value::String(s)) => Some(s),
            Some(other) => {
                return Err(Error::Config(format!("preset must be a string, got {other}")))
            }
            None => None,
        };
        Ok(Self { preset, body })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Preset, then config file, then the seed from the environment, then
/// explicit overrides (applied by the caller).
pub fn resolve(
    preset_name: Option<&str>,
    file: Option<&ConfigFile>,
    env_seed: Option<&str>,
) -> Result<RunConfig> {
    let name = preset_name
        .or(file.and_then(|f| f.preset.as_deref()))
        .unwrap_or(PRESET_DESK);
    let base = preset(name)?;
    let mut value = to_value(&base)?;
    if let Some(f) = file {
        merge(&mut value, &f.body, "")?;
    }
    let mut cfg: RunConfig = value
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
    if let Some(s) = env_seed {
        cfg.train.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("OCCLM_SEED must be an unsigned integer, got {s:?}")))?;
    }
    Ok(cfg)
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
