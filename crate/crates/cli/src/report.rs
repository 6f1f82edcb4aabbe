//! Output schemas: evaluation reports, curve rows and the fine-tune log.

use metactc::ctc::{cer, Alphabet, LabelSequence};
use metactc::metatrain::{EpochRecord, UtteranceResult};
use serde::{Deserialize, Serialize};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const CURVE_HEADER: &str = "pretrain_step,checkpoint,best_val_cer";
pub const FINETUNE_LOG_HEADER: &str = "epoch,train_loss,val_loss,val_cer";

/// Which checkpoint produced a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIdentity {
    pub path: String,
    /// SHA-256 of the parameter file.
    pub params_sha256: String,
    pub pretrain_step: u64,
    pub regime: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSettings {
    pub method: String,
    pub beam: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub checkpoint: CheckpointIdentity,
    pub language: String,
    /// Symbols of the language, in label order.
    pub alphabet: Alphabet,
    pub split: String,
    pub decode: DecodeSettings,
    /// Corpus CER in percent.
    pub cer: f64,
    pub utterances: Vec<UtteranceResult>,
}

impl EvalReport {
    /// CER recomputed from the stored reference / hypothesis pairs.
    pub fn recompute_cer(&self) -> metactc::Result<f64> {
        let encode = |s: &str| self.alphabet.encode(s);
        let refs: Vec<LabelSequence> = self
            .utterances
            .iter()
            .map(|u| encode(&u.reference))
            .collect::<Result<_, _>>()?;
        let hyps: Vec<LabelSequence> = self
            .utterances
            .iter()
            .map(|u| encode(&u.hypothesis))
            .collect::<Result<_, _>>()?;
        cer(&refs, &hyps)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// One point of a learning curve. The no-pretrain reference row has
/// `checkpoint = "no-pretrain"` and step 0.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub pretrain_step: u64,
    pub checkpoint: String,
    pub best_val_cer: f64,
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.pretrain_step, r.checkpoint, r.best_val_cer
        ));
    }
    out
}

pub fn parse_curve_csv(text: &str) -> Result<Vec<CurveRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err("missing curve header".into());
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(format!("row {}: expected 3 fields", i + 1));
            }
            Ok(CurveRow {
                pretrain_step: f[0].parse().map_err(|e| format!("row {}: {e}", i + 1))?,
                checkpoint: f[1].to_string(),
                best_val_cer: f[2].parse().map_err(|e| format!("row {}: {e}", i + 1))?,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn finetune_log_csv(epochs: &[EpochRecord]) -> String {
    let mut out = format!("{FINETUNE_LOG_HEADER}\n");
    for e in epochs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch,
            e.train_loss,
            opt(e.val_loss),
            opt(e.val_cer)
        ));
    }
    out
}
