use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, MultiHeadModel};
use crate::ctc::Alphabet;
use crate::diffcore::NamedParams;
use crate::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// JSON sidecar stored next to the binary parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub config: EncoderConfig,
    pub languages: Vec<String>,
    pub alphabets: BTreeMap<String, Alphabet>,
    pub pretrain_step: u64,
    pub seed: u64,
    /// `multi`, `meta`, `none` (random init) or `finetune`.
    pub regime: String,
}

/// A model snapshot plus the step and seed that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MultiHeadModel,
    pub step: u64,
    pub seed: u64,
    pub regime: String,
}

fn io(context: String) -> impl FnOnce(std::io::Error) -> Error {
    move |source| Error::Io { context, source }
}

impl Checkpoint {
    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: self.model.config().clone(),
            languages: self.model.languages().map(str::to_owned).collect(),
            alphabets: self.model.alphabets().clone(),
            pretrain_step: self.step,
            seed: self.seed,
            regime: self.regime.clone(),
        }
    }

    pub fn params_bytes(&self) -> Vec<u8> {
        self.model.all_params().to_bytes()
    }

    pub fn meta_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.meta()).expect("meta serializes");
        s.push('\n');
        s
    }

    /// Write `<stem>.params` and `<stem>.json` into `dir`; returns the
    /// parameter file path.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(io(format!("creating {}", dir.display())))?;
        let params = dir.join(format!("{stem}.params"));
        let meta = dir.join(format!("{stem}.json"));
        fs::write(&params, self.params_bytes())
            .map_err(io(format!("writing {}", params.display())))?;
        fs::write(&meta, self.meta_json()).map_err(io(format!("writing {}", meta.display())))?;
        Ok(params)
    }

    /// Read a checkpoint from its `.params` file (or the `.json` sidecar, or
    /// the common stem).
    pub fn read(path: &Path) -> Result<Checkpoint> {
        let params_path = path.with_extension("params");
        let meta_path = path.with_extension("json");
        let bytes =
            fs::read(&params_path).map_err(io(format!("reading {}", params_path.display())))?;
        let meta_text = fs::read_to_string(&meta_path)
            .map_err(io(format!("reading {}", meta_path.display())))?;
        let meta: CheckpointMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", meta_path.display()),
        })?;
        if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "checkpoint schema {} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})",
                meta.schema_version
            )));
        }
        let listed: Vec<&String> = meta.alphabets.keys().collect();
        if listed != meta.languages.iter().collect::<Vec<_>>() {
            return Err(Error::Validation(
                "checkpoint language list and alphabets disagree".into(),
            ));
        }
        let params = NamedParams::from_bytes(&bytes)
            .map_err(|e| e.with_context(params_path.display().to_string()))?;
        let model = MultiHeadModel::from_params(meta.config, meta.alphabets, &params)?;
        Ok(Checkpoint {
            model,
            step: meta.pretrain_step,
            seed: meta.seed,
            regime: meta.regime,
        })
    }
}
