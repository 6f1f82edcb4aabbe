use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use metactc::ctc::{ctc_loss, greedy_decode, LabelSequence, LogProbLattice};
use metactc::diffcore::Matrix;
use metactc::metatrain::{Regime, TRAIN_LOG_HEADER};
use metactc::model::Checkpoint;
use metactc::tasks::{load_corpus, Split};
use metactc_cli::commands::{self, *};
use metactc_cli::config::{RunConfig, RESOLVED_CONFIG};
use metactc_cli::lock::{OutputLock, LOCK_FILE};
use metactc_cli::report::{parse_curve_csv, EvalReport, FINETUNE_LOG_HEADER};
use metactc_cli::selfcheck::{self, Hooks};
use metactc_cli::CliError;
use tempfile::TempDir;

fn small_config() -> RunConfig {
    let mut cfg: RunConfig = RunConfig::from_json(
        r#"{
            "schema_version": 1,
            "seed": 3,
            "family": {
                "n_languages": 5, "n_source": 3, "alphabet_sizes": [5, 6, 5, 4, 5],
                "feature_dim": 6, "shared_pool_size": 6,
                "utterances_per_language": 40, "test_utterances": 8
            },
            "model": { "hidden_dim": 8 },
            "pretrain": {
                "total_steps": 6, "checkpoint_every": 3, "multi_batch": 4,
                "episode": { "tasks_per_episode": 2, "n_train": 3, "n_test": 3 }
            },
            "finetune": { "epochs_limited": 2, "epochs_full": 1 },
            "evaluate": { "beam": 4 }
        }"#,
    )
    .unwrap();
    cfg.family.seed = cfg.seed;
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metactc"))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.json");
    fs::write(&p, cfg.to_json()).unwrap();
    p
}

struct World {
    dir: TempDir,
    cfg: RunConfig,
}

impl World {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let cfg = small_config();
        commands::generate(
            &cfg,
            &GenerateArgs {
                out: dir.path().join("data"),
            },
        )
        .unwrap();
        Self { dir, cfg }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn corpus(&self, id: &str) -> PathBuf {
        self.path(&format!("data/{id}.jsonl"))
    }

    fn pretrain(&self, regime: Regime, sources: &[&str], out: &str) -> PretrainSummary {
        commands::pretrain(
            &self.cfg,
            &PretrainArgs {
                regime,
                corpora: sources.iter().map(|s| self.corpus(s)).collect(),
                out: self.path(out),
            },
        )
        .unwrap()
    }
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn generate_default_family_writes_ten_corpora() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("a");
    let status = bin()
        .args(["generate", "--out"])
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let corpora: Vec<_> = read_all(&out)
        .into_iter()
        .filter(|f| f.0.ends_with(".jsonl"))
        .collect();
    assert_eq!(corpora.len(), 10);
    assert_eq!(corpora.iter().filter(|f| f.0.starts_with("src")).count(), 6);
    assert_eq!(corpora.iter().filter(|f| f.0.starts_with("tgt")).count(), 4);
    assert!(!out.join(LOCK_FILE).exists());
}

fn assert_same_files(a: &Path, b: &Path) {
    let (fa, fb) = (read_all(a), read_all(b));
    let names = |f: &[(String, Vec<u8>)]| f.iter().map(|x| x.0.clone()).collect::<Vec<_>>();
    assert_eq!(names(&fa), names(&fb));
    for (x, y) in fa.iter().zip(&fb) {
        assert!(x.1 == y.1, "{} differs", x.0);
    }
}

#[test]
fn generate_is_byte_reproducible() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for dir in [&a, &b] {
        write_config(dir.path(), &small_config());
        let status = bin()
            .current_dir(dir.path())
            .args(["generate", "--config", "run.json", "--out", "data"])
            .output()
            .unwrap()
            .status;
        assert!(status.success());
    }
    assert_same_files(&a.path().join("data"), &b.path().join("data"));
}

#[test]
fn invalid_duration_range_exits_with_config_error() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config();
    cfg.family.duration_range = [3, 1];
    let path = write_config(dir.path(), &cfg);
    let out = bin()
        .arg("generate")
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("duration_range"), "{msg}");
}

#[test]
fn config_schema_version_and_unknown_fields_are_rejected() {
    assert!(matches!(
        RunConfig::from_json(r#"{"schema_version": 2}"#),
        Err(CliError::Config(_))
    ));
    assert!(matches!(
        RunConfig::from_json(r#"{"schema_version": 1, "sed": 4}"#),
        Err(CliError::Config(_))
    ));
    let partial =
        RunConfig::from_json(r#"{"schema_version": 1, "pretrain": {"total_steps": 5}}"#).unwrap();
    assert_eq!(partial.pretrain.total_steps, 5);
    assert_eq!(partial.pretrain.episode.inner_steps, 1);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let w = World::new();
    let text = fs::read_to_string(w.path("data").join(RESOLVED_CONFIG)).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(value["invocation"]["command"], "generate");
    let reloaded = RunConfig::from_json(&text).unwrap();
    assert_eq!(reloaded, w.cfg);

    let again = w.path("again");
    commands::generate(&reloaded, &GenerateArgs { out: again.clone() }).unwrap();
    let strip = |d: &Path| {
        read_all(d)
            .into_iter()
            .filter(|f| f.0.ends_with(".jsonl"))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&w.path("data")), strip(&again));
}

fn check_train_log(path: &Path, regime: &str) -> Vec<u64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(TRAIN_LOG_HEADER));
    let mut steps = Vec::new();
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 6, "{l}");
        steps.push(f[0].parse::<u64>().unwrap());
        assert_eq!(f[1], regime);
        assert!(f[2].starts_with("src"));
        for v in &f[3..] {
            assert!(v.parse::<f64>().unwrap().is_finite());
        }
    }
    assert!(steps.windows(2).all(|w| w[0] <= w[1]));
    steps
}

#[test]
fn multitask_pretraining_on_one_language() {
    let w = World::new();
    let s = w.pretrain(Regime::Multi, &["src0"], "multi");
    assert_eq!(s.checkpoints.len(), 2);
    let steps = check_train_log(&s.log, "multi");
    assert_eq!(steps, (1..=6).collect::<Vec<_>>());
    let ck = Checkpoint::read(&s.checkpoints[1]).unwrap();
    assert_eq!((ck.step, ck.regime.as_str()), (6, "multi"));
    assert_eq!(ck.model.languages().collect::<Vec<_>>(), vec!["src0"]);
}

#[test]
fn meta_pretraining_is_reproducible() {
    let w = World::new();
    let a = w.pretrain(Regime::Meta, &["src0", "src1", "src2"], "meta-a");
    let b = w.pretrain(Regime::Meta, &["src0", "src1", "src2"], "meta-b");
    let strip = |d: PathBuf| {
        read_all(&d)
            .into_iter()
            .filter(|f| f.0 != RESOLVED_CONFIG)
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(w.path("meta-a")), strip(w.path("meta-b")));
    assert_eq!(check_train_log(&a.log, "meta").len(), 6 * 2);
    assert_eq!(
        fs::read(&a.checkpoints[1]).unwrap(),
        fs::read(&b.checkpoints[1]).unwrap()
    );
}

#[test]
fn finetune_without_epochs_only_adds_a_head() {
    let w = World::new();
    let pre = w.pretrain(Regime::Meta, &["src0", "src1"], "meta");
    let s = commands::finetune(
        &w.cfg,
        &FinetuneArgs {
            init: Init::Checkpoint(pre.checkpoints[1].clone()),
            corpus: w.corpus("tgt0"),
            split: Split::Limited,
            epochs: Some(0),
            out: w.path("ft0"),
        },
    )
    .unwrap();
    let before = Checkpoint::read(&pre.checkpoints[1]).unwrap();
    let after = Checkpoint::read(&s.checkpoint).unwrap();
    let task = load_corpus(&w.corpus("tgt0")).unwrap();
    let mut expected = before.model.clone();
    expected
        .add_language("tgt0", task.alphabet, w.cfg.seed)
        .unwrap();
    assert_eq!(after.model, expected);
    assert_eq!(
        fs::read_to_string(&s.log).unwrap(),
        format!("{FINETUNE_LOG_HEADER}\n")
    );
}

#[test]
fn finetune_log_and_no_pretrain_flag() {
    let w = World::new();
    let out = w.path("scratch");
    let status = bin()
        .args([
            "finetune",
            "--no-pretrain",
            "--split",
            "full",
            "--epochs",
            "3",
        ])
        .arg("--config")
        .arg(write_config(w.dir.path(), &w.cfg))
        .arg("--corpus")
        .arg(w.corpus("tgt1"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let log = fs::read_to_string(out.join(FINETUNE_LOG)).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some(FINETUNE_LOG_HEADER));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], (i + 1) as f64);
        assert!(r[1] > 0.0 && r[2] > 0.0 && r[3] >= 0.0);
    }
    let ck = Checkpoint::read(&out.join(format!("{FINETUNED_STEM}.params"))).unwrap();
    assert_eq!((ck.step, ck.regime.as_str()), (0, "finetune"));

    let both = bin()
        .args([
            "finetune",
            "--no-pretrain",
            "--checkpoint",
            "x.params",
            "--corpus",
            "c",
            "--out",
            "o",
        ])
        .output()
        .unwrap();
    assert!(!both.status.success());
}

fn finetuned(w: &World, lang: &str) -> PathBuf {
    commands::finetune(
        &w.cfg,
        &FinetuneArgs {
            init: Init::NoPretrain,
            corpus: w.corpus(lang),
            split: Split::Full,
            epochs: Some(2),
            out: w.path(&format!("ft-{lang}")),
        },
    )
    .unwrap()
    .checkpoint
}

#[test]
fn evaluation_report_schema_and_consistency() {
    let w = World::new();
    let ck = finetuned(&w, "tgt0");
    let eval = |beam: usize, out: &str| {
        commands::evaluate(
            &w.cfg,
            &EvaluateArgs {
                checkpoint: ck.clone(),
                corpus: w.corpus("tgt0"),
                beam: Some(beam),
                out: w.path(out),
            },
        )
        .unwrap()
    };
    let r = eval(4, "ev4");
    let text = fs::read_to_string(w.path("ev4").join(EVAL_REPORT)).unwrap();
    let parsed: EvalReport = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, r);
    assert_eq!(parsed.recompute_cer().unwrap(), parsed.cer);
    assert_eq!(parsed.split, "test");
    assert_eq!(parsed.checkpoint.params_sha256.len(), 64);
    assert_eq!(parsed.utterances.len(), 8);

    let greedy = eval(1, "ev1");
    let model = Checkpoint::read(&ck).unwrap().model;
    let task = load_corpus(&w.corpus("tgt0")).unwrap();
    for (u, res) in task.test.iter().zip(&greedy.utterances) {
        let hyp = greedy_decode(&model.lattice("tgt0", &u.features).unwrap());
        assert_eq!(task.alphabet.decode(&hyp), res.hypothesis);
    }
    assert_eq!(eval(4, "ev4b").to_json(), text);
}

#[test]
fn evaluation_without_head_asks_for_finetuning() {
    let w = World::new();
    let ck = finetuned(&w, "tgt0");
    let out = bin()
        .arg("evaluate")
        .arg("--checkpoint")
        .arg(&ck)
        .arg("--corpus")
        .arg(w.corpus("tgt1"))
        .arg("--out")
        .arg(w.path("ev"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("tgt1") && msg.contains("fine-tune"), "{msg}");
}

#[test]
fn curve_rows_are_sorted_with_a_baseline() {
    let w = World::new();
    w.pretrain(Regime::Meta, &["src0", "src1"], "meta");
    let rows = commands::curve(
        &w.cfg,
        &CurveArgs {
            checkpoints: w.path("meta"),
            corpus: w.corpus("tgt0"),
            epochs: Some(1),
            out: w.path("curve"),
        },
    )
    .unwrap();
    assert_eq!(rows.len(), 3);
    let parsed =
        parse_curve_csv(&fs::read_to_string(w.path("curve").join(CURVE_CSV)).unwrap()).unwrap();
    assert_eq!(parsed, rows);
    assert_eq!(rows[0].checkpoint, "no-pretrain");
    assert_eq!(
        rows.iter().map(|r| r.pretrain_step).collect::<Vec<_>>(),
        vec![0, 3, 6]
    );
    assert!(rows.iter().all(|r| r.best_val_cer >= 0.0));

    fs::create_dir_all(w.path("one")).unwrap();
    let ck = Checkpoint::read(&w.path("meta").join("ckpt-000003.params")).unwrap();
    ck.write(&w.path("one"), "only").unwrap();
    let err = commands::curve(
        &w.cfg,
        &CurveArgs {
            checkpoints: w.path("one"),
            corpus: w.corpus("tgt0"),
            epochs: Some(1),
            out: w.path("curve1"),
        },
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn output_directory_lock_is_exclusive() {
    let dir = TempDir::new().unwrap();
    let lock = OutputLock::acquire(dir.path()).unwrap();
    let err = commands::generate(
        &small_config(),
        &GenerateArgs {
            out: dir.path().to_path_buf(),
        },
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("in use"));
    drop(lock);
    assert!(!dir.path().join(LOCK_FILE).exists());
    commands::generate(
        &small_config(),
        &GenerateArgs {
            out: dir.path().to_path_buf(),
        },
    )
    .unwrap();
}

#[test]
fn malformed_corpus_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{not json\n").unwrap();
    let out = bin()
        .args(["pretrain", "--regime", "multi", "--out"])
        .arg(dir.path().join("o"))
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

fn sign_flipped_ctc(
    lat: &LogProbLattice,
    target: &LabelSequence,
) -> metactc::Result<(f64, Matrix)> {
    let (loss, g) = ctc_loss(lat, target)?;
    Ok((loss, g.scale(-1.0)))
}

#[test]
fn selfcheck_catches_a_sign_error_in_ctc_backward() {
    let good = selfcheck::ctc_gradient(&Hooks::default(), 5);
    assert!(good.passed, "{}", good.detail);
    let broken = Hooks {
        ctc_loss: sign_flipped_ctc,
    };
    let bad = selfcheck::ctc_gradient(&broken, 5);
    assert!(!bad.passed, "{}", bad.detail);
    assert!(selfcheck::ctc_oracle(&broken, 20).passed);
}

#[test]
fn selfcheck_command_passes_and_writes_a_report() {
    let dir = TempDir::new().unwrap();
    let out = bin()
        .arg("selfcheck")
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let report: selfcheck::SelfcheckReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("selfcheck.json")).unwrap())
            .unwrap();
    assert!(report.passed());
    assert_eq!(report.checks.len(), 6);
}
