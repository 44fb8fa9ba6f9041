//! Run configuration: TOML sections `[data] [encoder] [discriminator] [head]
//! [train] [eval] [run]`, each key validated, unknown keys rejected.

use std::path::{Path, PathBuf};

use lim::dsp_io::Framing;
use lim::encoder::EncoderConfig;
use lim::eval::DvectorLayer;
use lim::trainer::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Syntax(String),
    #[error("config error at `{key}`: {msg}")]
    Key { key: String, msg: String },
}

fn key_err(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Key {
        key: key.to_string(),
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub manifest: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: PathBuf::from("corpus/manifest.tsv"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSection {
    pub hidden: usize,
}

impl Default for DiscriminatorSection {
    fn default() -> Self {
        DiscriminatorSection { hidden: 256 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSection {
    /// Width of the hidden layer, 0 for a linear head.
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub chunk_ms: f64,
    pub overlap_ms: f64,
    /// Unset picks the head's hidden layer when there is one.
    pub dvector_layer: Option<DvectorLayer>,
    pub enroll_per_speaker: usize,
    pub genuine_trials: usize,
    pub impostor_trials: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let f = Framing::default();
        EvalSection {
            chunk_ms: f.chunk_ms,
            overlap_ms: f.overlap_ms,
            dvector_layer: None,
            enroll_per_speaker: 1,
            genuine_trials: 20,
            impostor_trials: 200,
            seed: 0,
        }
    }
}

impl EvalSection {
    pub fn framing(&self) -> Framing {
        Framing {
            chunk_ms: self.chunk_ms,
            overlap_ms: self.overlap_ms,
            ..Framing::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub out_dir: PathBuf,
    pub precision: Precision,
    /// Checkpoint whose encoder starts a semi_pretrain run.
    pub init_from: Option<PathBuf>,
    /// Continue from `out_dir/checkpoint.lim` when present.
    pub resume: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            out_dir: PathBuf::from("runs/default"),
            precision: Precision::F32,
            init_from: None,
            resume: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub encoder: EncoderConfig,
    pub discriminator: DiscriminatorSection,
    pub head: HeadSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub run: RunSection,
}

/// Splits `section.key=value`; the value is read as a TOML literal and
/// falls back to a bare string.
fn apply_override(table: &mut Table, item: &str) -> Result<(), ConfigError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| key_err(item, "override must look like section.key=value"))?;
    let key = key.trim();
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| key_err(key, "override key must be section.key"))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let sect = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    let Value::Table(sect) = sect else {
        return Err(key_err(section, "not a section"));
    };
    sect.insert(field.to_string(), value);
    Ok(())
}

/// Maps serde's messages onto the offending dotted key.
fn locate(e: toml::de::Error) -> ConfigError {
    let msg = e.message().to_string();
    let field = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "config".into());
    ConfigError::Key { key: field, msg }
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let known = ["data", "encoder", "discriminator", "head", "train", "eval", "run"];
        for (k, v) in &table {
            if !known.contains(&k.as_str()) {
                return Err(key_err(k, "unknown section"));
            }
            if !v.is_table() {
                return Err(key_err(k, "expected a [section]"));
            }
        }
        let mut cfg = RunConfig::default();
        for (section, v) in table {
            let Value::Table(t) = v else { unreachable!() };
            let scoped = |e: toml::de::Error| match locate(e) {
                ConfigError::Key { key, msg } => key_err(&format!("{section}.{key}"), msg),
                other => other,
            };
            let value = Value::Table(t);
            match section.as_str() {
                "data" => cfg.data = value.try_into().map_err(scoped)?,
                "encoder" => cfg.encoder = value.try_into().map_err(scoped)?,
                "discriminator" => cfg.discriminator = value.try_into().map_err(scoped)?,
                "head" => cfg.head = value.try_into().map_err(scoped)?,
                "train" => cfg.train = value.try_into().map_err(scoped)?,
                "eval" => cfg.eval = value.try_into().map_err(scoped)?,
                _ => cfg.run = value.try_into().map_err(scoped)?,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let lib = |e: lim::Error| match e {
            lim::Error::Config { key, msg } => key_err(&key, msg),
            other => key_err("config", other.to_string()),
        };
        self.train.validate().map_err(lib)?;
        self.encoder.block_shapes().map_err(lib)?;
        if self.discriminator.hidden == 0 {
            return Err(key_err("discriminator.hidden", "must be positive"));
        }
        let f = self.eval.framing();
        if !(f.chunk_ms > 0.0) || !(f.overlap_ms >= 0.0) || f.overlap_ms >= f.chunk_ms {
            return Err(key_err("eval.chunk_ms", "need chunk_ms > overlap_ms >= 0"));
        }
        if f.chunk_len() != self.encoder.chunk_len {
            return Err(key_err(
                "eval.chunk_ms",
                format!(
                    "{} ms gives {} samples but the encoder expects {}",
                    f.chunk_ms,
                    f.chunk_len(),
                    self.encoder.chunk_len
                ),
            ));
        }
        if self.eval.enroll_per_speaker == 0 {
            return Err(key_err("eval.enroll_per_speaker", "must be positive"));
        }
        if self.train.mode == lim::trainer::TrainMode::SemiPretrain && self.run.init_from.is_none() && !self.run.resume {
            return Err(key_err("run.init_from", "semi_pretrain needs a pretrained checkpoint"));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            disc_hidden: self.discriminator.hidden,
            head_hidden: self.head.hidden,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
