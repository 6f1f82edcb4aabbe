use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metactc::metatrain::Regime;
use metactc::tasks::Split;

use crate::commands::{
    self, CurveArgs, EvaluateArgs, FinetuneArgs, GenerateArgs, Init, PretrainArgs,
};
use crate::config::RunConfig;
use crate::error::{io_err, CliError, CliResult};
use crate::selfcheck;

#[derive(Debug, Parser)]
#[command(
    name = "metactc",
    version,
    about = "Multilingual CTC pretraining experiments: multitask and first-order MAML"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; defaults are used for missing fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RegimeArg {
    Multi,
    Meta,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Full,
    Limited,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic language family, one corpus file per language.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a shared encoder on source corpora.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        regime: RegimeArg,
        #[arg(long)]
        out: PathBuf,
        /// Source corpus files.
        #[arg(required = true)]
        corpora: Vec<PathBuf>,
    },
    /// Fine-tune a checkpoint, or a fresh encoder, on a target corpus.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(
            long,
            required_unless_present = "no_pretrain",
            conflicts_with = "no_pretrain"
        )]
        checkpoint: Option<PathBuf>,
        /// Start from a randomly initialised encoder.
        #[arg(long)]
        no_pretrain: bool,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "limited")]
        split: SplitArg,
        /// Defaults to 18 on the full split and 20 on the limited split.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a corpus test split and write an evaluation report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Beam width; 1 is greedy decoding.
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learning curve: best validation CER after fine-tuning each checkpoint.
    Curve {
        #[command(flatten)]
        common: Common,
        /// Directory holding pretraining checkpoints.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle suite.
    Selfcheck {
        #[command(flatten)]
        common: Common,
        /// Also write `selfcheck.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(c: &Common) -> CliResult<RunConfig> {
    RunConfig::resolve(c.config.as_deref(), c.seed)
}

/// Runs one command and returns the text to print on success.
pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Generate { common, out } => {
            let paths = commands::generate(&resolve(&common)?, &GenerateArgs { out })?;
            Ok(paths
                .iter()
                .map(|p| format!("wrote {}\n", p.display()))
                .collect())
        }
        Command::Pretrain {
            common,
            regime,
            out,
            corpora,
        } => {
            let regime = match regime {
                RegimeArg::Multi => Regime::Multi,
                RegimeArg::Meta => Regime::Meta,
            };
            let s = commands::pretrain(
                &resolve(&common)?,
                &PretrainArgs {
                    regime,
                    corpora,
                    out,
                },
            )?;
            Ok(format!(
                "{} checkpoints, final meta-loss {}, log {}\n",
                s.checkpoints.len(),
                s.final_meta_loss,
                s.log.display()
            ))
        }
        Command::Finetune {
            common,
            checkpoint,
            no_pretrain,
            corpus,
            split,
            epochs,
            out,
        } => {
            let init = match (checkpoint, no_pretrain) {
                (Some(p), false) => Init::Checkpoint(p),
                (None, true) => Init::NoPretrain,
                _ => {
                    return Err(CliError::Config(
                        "give exactly one of --checkpoint and --no-pretrain".into(),
                    ))
                }
            };
            let split = match split {
                SplitArg::Full => Split::Full,
                SplitArg::Limited => Split::Limited,
            };
            let s = commands::finetune(
                &resolve(&common)?,
                &FinetuneArgs {
                    init,
                    corpus,
                    split,
                    epochs,
                    out,
                },
            )?;
            let cer = |c: Option<f64>| c.map_or("n/a".to_string(), |c| format!("{c:.2}%"));
            Ok(format!(
                "wrote {}; validation CER final {} best {}\n",
                s.checkpoint.display(),
                cer(s.final_val_cer),
                cer(s.best_val_cer)
            ))
        }
        Command::Evaluate {
            common,
            checkpoint,
            corpus,
            beam,
            out,
        } => {
            let r = commands::evaluate(
                &resolve(&common)?,
                &EvaluateArgs {
                    checkpoint,
                    corpus,
                    beam,
                    out,
                },
            )?;
            Ok(format!(
                "{}: CER {:.2}% over {} utterances (beam {})\n",
                r.language,
                r.cer,
                r.utterances.len(),
                r.decode.beam
            ))
        }
        Command::Curve {
            common,
            checkpoints,
            corpus,
            epochs,
            out,
        } => {
            let rows = commands::curve(
                &resolve(&common)?,
                &CurveArgs {
                    checkpoints,
                    corpus,
                    epochs,
                    out,
                },
            )?;
            Ok(crate::report::curve_csv(&rows))
        }
        Command::Selfcheck { common, out } => {
            resolve(&common)?;
            let report = selfcheck::run(&selfcheck::Hooks::default());
            if let Some(dir) = out {
                fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
                let path = dir.join("selfcheck.json");
                let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
                fs::write(&path, json).map_err(io_err(format!("writing {}", path.display())))?;
            }
            if report.passed() {
                Ok(report.lines())
            } else {
                Err(CliError::ChecksFailed(format!(
                    "selfcheck failed\n{}",
                    report.lines()
                )))
            }
        }
    }
}
