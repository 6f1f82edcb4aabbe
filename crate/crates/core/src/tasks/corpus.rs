use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LanguageTask, Utterance};
use crate::ctc::Alphabet;
use crate::diffcore::Matrix;
use crate::{Error, Result};

/// First line of a corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub language_id: String,
    pub symbols: Vec<char>,
    pub feature_dim: usize,
    pub splits: CorpusSplits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSplits {
    pub full: Vec<String>,
    pub limited: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    uid: &'a str,
    transcript: String,
    features: Vec<&'a [f64]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    uid: String,
    transcript: String,
    features: Vec<Vec<f64>>,
}

/// Write a task as JSON lines: the header, then every full-split and
/// test-split utterance once. Floats use the shortest round-trip form.
pub fn write_corpus(task: &LanguageTask, mut out: impl Write) -> Result<()> {
    let header = CorpusHeader {
        language_id: task.id.clone(),
        symbols: task.alphabet.symbols().to_vec(),
        feature_dim: task.feature_dim,
        splits: CorpusSplits {
            full: task.full.iter().map(|u| u.uid.clone()).collect(),
            limited: task.limited.iter().map(|u| u.uid.clone()).collect(),
            test: task.test.iter().map(|u| u.uid.clone()).collect(),
        },
    };
    let io = |source| Error::Io {
        context: format!("writing corpus `{}`", task.id),
        source,
    };
    serde_json::to_writer(&mut out, &header).map_err(|e| io(e.into()))?;
    out.write_all(b"\n").map_err(io)?;
    for u in task.full.iter().chain(&task.test) {
        let rec = RecordOut {
            uid: &u.uid,
            transcript: task.alphabet.decode(&u.transcript),
            features: u.features.iter_rows().collect(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    Ok(())
}

/// Parse a corpus from any line reader.
pub fn parse_corpus(reader: impl BufRead) -> Result<LanguageTask> {
    let mut lines = reader.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(s) if s.trim().is_empty() => None,
        other => Some((i + 1, other)),
    });
    let io = |source| Error::Io {
        context: "reading corpus".into(),
        source,
    };
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::Validation("corpus is empty".into()))?;
    let header: CorpusHeader =
        serde_json::from_str(&header.map_err(io)?).map_err(|e| Error::Parse {
            line: hline,
            message: format!("bad header: {e}"),
        })?;
    let alphabet = Alphabet::new(header.symbols.clone())?;
    if header.feature_dim == 0 {
        return Err(Error::Parse {
            line: hline,
            message: "feature_dim must be positive".into(),
        });
    }

    let mut by_uid: HashMap<String, Utterance> = HashMap::new();
    for (line, text) in lines {
        let text = text.map_err(io)?;
        let rec: RecordIn = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if let Some((r, row)) = rec
            .features
            .iter()
            .enumerate()
            .find(|(_, row)| row.len() != header.feature_dim)
        {
            return Err(Error::Parse {
                line,
                message: format!(
                    "utterance `{}` frame {r} has {} values, expected {}",
                    rec.uid,
                    row.len(),
                    header.feature_dim
                ),
            });
        }
        let features = Matrix::new(
            rec.features.len(),
            header.feature_dim,
            rec.features.concat(),
        )
        .map_err(|e| Error::Parse {
            line,
            message: format!("utterance `{}`: {e}", rec.uid),
        })?;
        let transcript = alphabet
            .encode(&rec.transcript)
            .map_err(|e| e.with_context(format!("line {line}, utterance `{}`", rec.uid)))?;
        let uid = rec.uid.clone();
        let utt = Utterance {
            uid: rec.uid,
            features,
            transcript,
        };
        if by_uid.insert(uid.clone(), utt).is_some() {
            return Err(Error::Parse {
                line,
                message: format!("duplicate utterance `{uid}`"),
            });
        }
    }
    if by_uid.is_empty() {
        return Err(Error::Validation(format!(
            "corpus `{}` has no utterances",
            header.language_id
        )));
    }

    let take = |uids: &[String], split: &str| -> Result<Vec<Utterance>> {
        uids.iter()
            .map(|uid| {
                by_uid.get(uid).cloned().ok_or_else(|| {
                    Error::Validation(format!("{split} split lists unknown utterance `{uid}`"))
                })
            })
            .collect()
    };
    let task = LanguageTask {
        id: header.language_id.clone(),
        alphabet,
        feature_dim: header.feature_dim,
        full: take(&header.splits.full, "full")?,
        limited: take(&header.splits.limited, "limited")?,
        test: take(&header.splits.test, "test")?,
    };
    task.validate()?;
    Ok(task)
}

pub fn load_corpus(path: &Path) -> Result<LanguageTask> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        context: format!("opening {}", path.display()),
        source,
    })?;
    parse_corpus(BufReader::new(file)).map_err(|e| e.with_context(path.display().to_string()))
}
