//! The JSON run configuration shared by every command.

use std::fs;
use std::path::Path;

use metactc::ctc::DEFAULT_BEAM;
use metactc::metatrain::{EpisodeConfig, FinetuneConfig, PretrainConfig, Regime};
use metactc::model::EncoderConfig;
use metactc::tasks::{Split, SyntheticFamilyConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// File name of the resolved configuration written next to every output.
pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub hidden_dim: usize,
    pub subsample_stride: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            subsample_stride: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSettings {
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub episode: EpisodeConfig,
    pub multi_lr: f64,
    pub multi_batch: usize,
    pub record_wall_clock: bool,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            total_steps: 2000,
            checkpoint_every: 200,
            episode: p.episode,
            multi_lr: p.multi_lr,
            multi_batch: p.multi_batch,
            record_wall_clock: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSettings {
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs on the full split.
    pub epochs_full: usize,
    /// Epochs on the limited split.
    pub epochs_limited: usize,
    /// Beam width for per-epoch validation decoding.
    pub beam: usize,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        Self {
            lr: f.lr,
            batch_size: f.batch_size,
            epochs_full: 18,
            epochs_limited: 20,
            beam: f.beam,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSettings {
    pub beam: usize,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        Self { beam: DEFAULT_BEAM }
    }
}

/// Everything a command needs besides its input paths. The top-level
/// `seed` is the master seed: it replaces the seeds of the data family,
/// pretraining and fine-tuning when the config is resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub family: SyntheticFamilyConfig,
    pub model: ModelSettings,
    pub pretrain: PretrainSettings,
    pub finetune: FinetuneSettings,
    pub evaluate: EvaluateSettings,
    /// Command and arguments of the run that wrote this file. Ignored on load.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invocation: Option<serde_json::Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            family: SyntheticFamilyConfig::default(),
            model: ModelSettings::default(),
            pretrain: PretrainSettings::default(),
            finetune: FinetuneSettings::default(),
            evaluate: EvaluateSettings::default(),
            invocation: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version: {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(RunConfig {
            invocation: None,
            ..cfg
        })
    }

    /// Loads `path` (or the defaults), applies a `--seed` override and
    /// propagates the master seed.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("reading {}: {e}", p.display())))?;
                Self::from_json(&text)?
            }
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.family.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Writes the resolved config, tagged with the invocation, into `dir`.
    pub fn write_resolved(&self, dir: &Path, invocation: serde_json::Value) -> CliResult<()> {
        let tagged = RunConfig {
            invocation: Some(invocation),
            ..self.clone()
        };
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, tagged.to_json()).map_err(io_err(format!("writing {}", path.display())))
    }

    pub fn encoder_config(&self, feature_dim: usize) -> CliResult<EncoderConfig> {
        Ok(EncoderConfig::new(
            feature_dim,
            self.model.hidden_dim,
            self.model.subsample_stride,
        )?)
    }

    pub fn pretrain_config(&self, regime: Regime) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            regime,
            total_steps: p.total_steps,
            checkpoint_every: p.checkpoint_every,
            seed: self.seed,
            episode: p.episode.clone(),
            multi_lr: p.multi_lr,
            multi_batch: p.multi_batch,
            record_wall_clock: p.record_wall_clock,
        }
    }

    /// Fine-tuning settings for `split`, with an optional epoch override.
    pub fn finetune_config(&self, split: Split, epochs: Option<usize>) -> FinetuneConfig {
        let f = &self.finetune;
        let default_epochs = match split {
            Split::Full => f.epochs_full,
            Split::Limited | Split::Test => f.epochs_limited,
        };
        FinetuneConfig {
            lr: f.lr,
            epochs: epochs.unwrap_or(default_epochs),
            batch_size: f.batch_size,
            beam: f.beam,
            seed: self.seed,
            stop_below_cer: None,
        }
    }
}
