//! One function per subcommand. Each takes the resolved [`RunConfig`] and
//! its own arguments, writes its outputs and the resolved config into the
//! output directory, and returns a short summary.

use std::fs;
use std::path::{Path, PathBuf};

use metactc::metatrain::{
    evaluate as evaluate_utts, finetune as finetune_task, pretrain as pretrain_model, Regime,
};
use metactc::model::{Checkpoint, MultiHeadModel};
use metactc::tasks::{generate_family, load_corpus, write_corpus, LanguageTask, Split};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{io_err, CliError, CliResult};
use crate::lock::OutputLock;
use crate::report::{
    curve_csv, finetune_log_csv, CheckpointIdentity, CurveRow, DecodeSettings, EvalReport,
    REPORT_SCHEMA_VERSION,
};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const FINETUNE_LOG: &str = "finetune_log.csv";
pub const FINETUNED_STEM: &str = "finetuned";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const CURVE_CSV: &str = "curve.csv";

/// Stem of the pretraining checkpoint written at `step`.
pub fn checkpoint_stem(step: u64) -> String {
    format!("ckpt-{step:06}")
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(io_err(format!("writing {}", path.display())))
}

fn invocation(command: &str, args: &impl Serialize) -> serde_json::Value {
    serde_json::json!({ "command": command, "args": args })
}

fn load(path: &Path) -> CliResult<LanguageTask> {
    load_corpus(path).map_err(|e| CliError::from(e.with_context(path.display().to_string())))
}

fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::read(path).map_err(|e| CliError::from(e.with_context(path.display().to_string())))
}

fn check_features(model: &MultiHeadModel, task: &LanguageTask) -> CliResult<()> {
    if model.config().feature_dim != task.feature_dim {
        return Err(CliError::Data(format!(
            "corpus `{}` has {}-dimensional features but the model expects {}",
            task.id,
            task.feature_dim,
            model.config().feature_dim
        )));
    }
    Ok(())
}

/// Fresh encoder sized for `feature_dim`, seeded by the master seed.
pub fn random_init(cfg: &RunConfig, feature_dim: usize) -> CliResult<MultiHeadModel> {
    Ok(MultiHeadModel::new(
        cfg.encoder_config(feature_dim)?,
        cfg.seed,
    )?)
}

#[derive(Clone, Debug, Serialize)]
pub struct GenerateArgs {
    pub out: PathBuf,
}

/// Writes one `<language>.jsonl` corpus per language of the family.
pub fn generate(cfg: &RunConfig, args: &GenerateArgs) -> CliResult<Vec<PathBuf>> {
    let tasks = generate_family(&cfg.family)?;
    let _lock = OutputLock::acquire(&args.out)?;
    let mut paths = Vec::with_capacity(tasks.len());
    for t in &tasks {
        let path = args.out.join(format!("{}.jsonl", t.id));
        let mut buf = Vec::new();
        write_corpus(t, &mut buf)?;
        write(&path, buf)?;
        paths.push(path);
    }
    cfg.write_resolved(&args.out, invocation("generate", args))?;
    Ok(paths)
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainArgs {
    pub regime: Regime,
    pub corpora: Vec<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub checkpoints: Vec<PathBuf>,
    pub log: PathBuf,
    pub final_meta_loss: f64,
}

pub fn pretrain(cfg: &RunConfig, args: &PretrainArgs) -> CliResult<PretrainSummary> {
    if args.corpora.is_empty() {
        return Err(CliError::Config(
            "pretraining needs at least one source corpus".into(),
        ));
    }
    let tasks = args
        .corpora
        .iter()
        .map(|p| load(p))
        .collect::<CliResult<Vec<_>>>()?;
    let dim = tasks[0].feature_dim;
    if let Some(t) = tasks.iter().find(|t| t.feature_dim != dim) {
        return Err(CliError::Data(format!(
            "corpus `{}` has {}-dimensional features, `{}` has {dim}",
            t.id, t.feature_dim, tasks[0].id
        )));
    }
    let pcfg = cfg.pretrain_config(args.regime);
    let model = random_init(cfg, dim)?;
    let _lock = OutputLock::acquire(&args.out)?;
    let mut checkpoints = Vec::new();
    let (_, log) = pretrain_model(&model, &tasks, &pcfg, |ck| {
        let path = ck
            .write(&args.out, &checkpoint_stem(ck.step))
            .map_err(|e| e.with_context(format!("step {}", ck.step)))?;
        checkpoints.push(path);
        Ok(())
    })?;
    let log_path = args.out.join(TRAIN_LOG);
    write(&log_path, log.to_csv())?;
    cfg.write_resolved(&args.out, invocation("pretrain", args))?;
    Ok(PretrainSummary {
        checkpoints,
        log: log_path,
        final_meta_loss: log.step_losses().last().map_or(f64::NAN, |s| s.1),
    })
}

/// Where fine-tuning starts from.
#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Checkpoint(PathBuf),
    NoPretrain,
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneArgs {
    pub init: Init,
    pub corpus: PathBuf,
    pub split: Split,
    pub epochs: Option<usize>,
    pub out: PathBuf,
}

#[derive(Clone, Debug)]
pub struct FinetuneSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_val_cer: Option<f64>,
    pub best_val_cer: Option<f64>,
}

/// Fine-tunes a checkpoint (or a fresh encoder) on one split of the target
/// corpus. Writes `finetuned.{params,json}` and the per-epoch log.
pub fn finetune(cfg: &RunConfig, args: &FinetuneArgs) -> CliResult<FinetuneSummary> {
    let task = load(&args.corpus)?;
    let start = match &args.init {
        Init::Checkpoint(p) => read_checkpoint(p)?,
        Init::NoPretrain => Checkpoint {
            model: random_init(cfg, task.feature_dim)?,
            step: 0,
            seed: cfg.seed,
            regime: "none".into(),
        },
    };
    check_features(&start.model, &task)?;
    let fcfg = cfg.finetune_config(args.split, args.epochs);
    let out = finetune_task(&start.model, &task, args.split, &fcfg)?;
    let _lock = OutputLock::acquire(&args.out)?;
    let ck = Checkpoint {
        model: out.model.clone(),
        step: start.step,
        seed: start.seed,
        regime: "finetune".into(),
    };
    let checkpoint = ck.write(&args.out, FINETUNED_STEM)?;
    let log = args.out.join(FINETUNE_LOG);
    write(&log, finetune_log_csv(&out.epochs))?;
    cfg.write_resolved(&args.out, invocation("finetune", args))?;
    Ok(FinetuneSummary {
        checkpoint,
        log,
        final_val_cer: out.final_cer(),
        best_val_cer: out.best_cer(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub beam: Option<usize>,
    pub out: PathBuf,
}

fn identity(path: &Path, ck: &Checkpoint) -> CheckpointIdentity {
    CheckpointIdentity {
        path: path.display().to_string(),
        params_sha256: hex::encode(Sha256::digest(ck.params_bytes())),
        pretrain_step: ck.step,
        regime: ck.regime.clone(),
        seed: ck.seed,
    }
}

/// Decodes the corpus test split and writes `eval_report.json`.
pub fn evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> CliResult<EvalReport> {
    let task = load(&args.corpus)?;
    let ck = read_checkpoint(&args.checkpoint)?;
    if !ck.model.has_language(&task.id) {
        return Err(CliError::Data(format!(
            "checkpoint {} has no head for language `{}`; fine-tune it on that corpus first (`metactc finetune`)",
            args.checkpoint.display(),
            task.id
        )));
    }
    if ck.model.alphabet(&task.id)? != &task.alphabet {
        return Err(CliError::Data(format!(
            "checkpoint head for `{}` was trained with a different alphabet",
            task.id
        )));
    }
    check_features(&ck.model, &task)?;
    let beam = args.beam.unwrap_or(cfg.evaluate.beam);
    let ev = evaluate_utts(&ck.model, &task.id, &task.test, beam)?;
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        checkpoint: identity(&args.checkpoint, &ck),
        language: task.id.clone(),
        alphabet: task.alphabet.clone(),
        split: "test".into(),
        decode: DecodeSettings {
            method: "prefix_beam".into(),
            beam,
        },
        cer: ev.cer,
        utterances: ev.results,
    };
    let _lock = OutputLock::acquire(&args.out)?;
    write(&args.out.join(EVAL_REPORT), report.to_json())?;
    cfg.write_resolved(&args.out, invocation("evaluate", args))?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct CurveArgs {
    pub checkpoints: PathBuf,
    pub corpus: PathBuf,
    pub epochs: Option<usize>,
    pub out: PathBuf,
}

/// Every checkpoint (`*.params` with a sidecar) in `dir`, sorted by step,
/// then by file name.
pub fn list_checkpoints(dir: &Path) -> CliResult<Vec<(PathBuf, Checkpoint)>> {
    let entries = fs::read_dir(dir).map_err(io_err(format!("listing {}", dir.display())))?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e
            .map_err(io_err(format!("listing {}", dir.display())))?
            .path();
        if p.extension().is_some_and(|x| x == "params") && p.with_extension("json").exists() {
            paths.push(p);
        }
    }
    let mut out = paths
        .into_iter()
        .map(|p| read_checkpoint(&p).map(|c| (p, c)))
        .collect::<CliResult<Vec<_>>>()?;
    out.sort_by(|a, b| a.1.step.cmp(&b.1.step).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// Fine-tunes every checkpoint in a directory on the target's limited
/// split and records the lowest per-epoch validation CER. A no-pretrain
/// reference row (step 0) comes first.
pub fn curve(cfg: &RunConfig, args: &CurveArgs) -> CliResult<Vec<CurveRow>> {
    let task = load(&args.corpus)?;
    let checkpoints = list_checkpoints(&args.checkpoints)?;
    if checkpoints.len() < 2 {
        return Err(CliError::Data(format!(
            "a curve needs at least 2 checkpoints, found {} in {}",
            checkpoints.len(),
            args.checkpoints.display()
        )));
    }
    let fcfg = cfg.finetune_config(Split::Limited, args.epochs);
    let best = |model: &MultiHeadModel| -> CliResult<f64> {
        check_features(model, &task)?;
        let out = finetune_task(model, &task, Split::Limited, &fcfg)?;
        out.best_cer().ok_or_else(|| {
            CliError::Data(format!(
                "corpus `{}` has no test split to validate on",
                task.id
            ))
        })
    };
    let baseline = MultiHeadModel::new(checkpoints[0].1.model.config().clone(), cfg.seed)?;
    let mut rows = vec![CurveRow {
        pretrain_step: 0,
        checkpoint: "no-pretrain".into(),
        best_val_cer: best(&baseline)?,
    }];
    for (path, ck) in &checkpoints {
        rows.push(CurveRow {
            pretrain_step: ck.step,
            checkpoint: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            best_val_cer: best(&ck.model.without_heads())?,
        });
    }
    let _lock = OutputLock::acquire(&args.out)?;
    write(&args.out.join(CURVE_CSV), curve_csv(&rows))?;
    cfg.write_resolved(&args.out, invocation("curve", args))?;
    Ok(rows)
}
