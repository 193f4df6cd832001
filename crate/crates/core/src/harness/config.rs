//! Training settings and the `key = value` configuration file.
//!
//! A config file has up to three sections, each mirroring a struct's field
//! names:
//!
//! ```toml
//! preset = "tiny"        # starting model when [model] is absent
//!
//! [model]                # ModelConfig
//! [train]                # TrainConfig
//! [synth]                # DatasetConfig
//! ```
//!
//! Environment variables named `DEHAZE_<SECTION>_<FIELD>` override file
//! values, e.g. `DEHAZE_TRAIN_TOTAL_ITERS=500` or `DEHAZE_PRESET=full`.
//! Values are read as TOML literals, falling back to plain strings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::optim::AdamWConfig;
use crate::hazegen::DatasetConfig;
use crate::model::ModelConfig;
use crate::numcore::Precision;

pub const ENV_PREFIX: &str = "DEHAZE_";

/// Optimisation schedule and data sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iters: u64,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Side of the square training crop.
    pub crop: usize,
    pub seed: u64,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    pub precision: Precision,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// 2,000 iterations on 64x64 crops.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 4,
            total_iters: 2_000,
            lr_start: 2e-4,
            lr_end: 1e-5,
            crop: 64,
            seed: 0,
            checkpoint_interval: 500,
            precision: Precision::F32,
            optimizer: AdamWConfig::default(),
        }
    }

    /// 200,000 iterations on 256x256 crops.
    pub fn full() -> Self {
        TrainConfig {
            total_iters: 200_000,
            crop: 256,
            checkpoint_interval: 10_000,
            ..Self::desk()
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || self.total_iters == 0 {
            return bad(format!(
                "batch_size and total_iters must be positive, got {} and {}",
                self.batch_size, self.total_iters
            ));
        }
        if !(0.0 <= self.lr_end && self.lr_end < self.lr_start) {
            return bad(format!(
                "need 0 <= lr_end < lr_start, got {} and {}",
                self.lr_end, self.lr_start
            ));
        }
        let m = model.size_multiple();
        if self.crop == 0 || !self.crop.is_multiple_of(m) {
            return bad(format!(
                "crop {} must be a positive multiple of {m} for this model",
                self.crop
            ));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !(o.eps > 0.0)
            || o.weight_decay < 0.0
        {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        Ok(())
    }
}

/// Named model starting points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Tiny,
    Full,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Full => ModelConfig::full(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    preset: Preset,
    model: Option<ModelConfig>,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    synth: DatasetConfig,
}

/// Everything a CLI run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: DatasetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::tiny(),
            train: TrainConfig::default(),
            synth: DatasetConfig::default(),
        }
    }
}

fn env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Parses config text, applying `env` overrides of the form
    /// `(DEHAZE_<SECTION>_<FIELD>, value)`. Other variables are ignored.
    pub fn parse_with_env<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        for (key, raw) in env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let rest = rest.to_ascii_lowercase();
            if rest == "preset" {
                table.insert(rest, env_value(&raw));
                continue;
            }
            let Some((section, field)) = rest.split_once('_') else {
                return Err(Error::Config(format!("cannot place override {key}")));
            };
            if !["model", "train", "synth"].contains(&section) {
                return Err(Error::Config(format!(
                    "override {key}: unknown section {section}"
                )));
            }
            let sec = table
                .entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(sec) = sec else {
                return Err(Error::Config(format!("{section} is not a section")));
            };
            sec.insert(field.to_string(), env_value(&raw));
        }
        let file: FileConfig =
            toml::Table::try_into(table).map_err(|e| Error::Config(format!("config: {e}")))?;
        let cfg = RunConfig {
            model: file.model.unwrap_or_else(|| file.preset.model()),
            train: file.train,
            synth: file.synth,
        };
        cfg.model.validate()?;
        cfg.train.validate(&cfg.model)?;
        cfg.synth.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults when `None`) and applies
    /// overrides from the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse_with_env(&text, std::env::vars())
    }

    pub fn to_toml(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            model: &'a ModelConfig,
            train: &'a TrainConfig,
            synth: &'a DatasetConfig,
        }
        toml::to_string(&Out {
            model: &self.model,
            train: &self.train,
            synth: &self.synth,
        })
        .map_err(|e| Error::Config(e.to_string()))
    }
}
