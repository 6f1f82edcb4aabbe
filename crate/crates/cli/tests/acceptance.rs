//! Acceptance suite. Each test checks one criterion at its stated
//! tolerance and prints a single `ACCEPTANCE` line with the verdict, so
//! `cargo test --test acceptance -- --nocapture` reads as a report.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use metactc::metatrain::{finetune, FinetuneConfig, Regime};
use metactc::tasks::{generate_family, Split, SyntheticFamilyConfig};
use metactc_cli::commands::{self, *};
use metactc_cli::config::RunConfig;
use metactc_cli::report::CurveRow;
use metactc_cli::selfcheck::{
    self, CheckResult, Hooks, CLOSED_FORM_TOL, COINCIDENCE_TOL, HALVING_SLACK,
};

fn report(id: u32, name: &str, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE [{id}] {name}: {verdict} ({detail})");
}

fn within(elapsed: Duration, budget_secs: u64) -> bool {
    elapsed <= Duration::from_secs(budget_secs)
}

fn suite(id: u32, name: &str, checks: &[CheckResult], elapsed: Duration, budget_secs: u64) {
    let ok = checks.iter().all(|c| c.passed) && within(elapsed, budget_secs);
    let detail: Vec<String> = checks
        .iter()
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    let detail = format!(
        "{}; {:.1}s of {budget_secs}s",
        detail.join("; "),
        elapsed.as_secs_f64()
    );
    report(id, name, ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_1_ctc_oracle_equivalence() {
    let t = Instant::now();
    let c = selfcheck::ctc_oracle(&Hooks::default(), 500);
    suite(1, "CTC oracle equivalence", &[c], t.elapsed(), 10);
}

#[test]
fn criterion_2_gradient_suite() {
    let t = Instant::now();
    let hooks = Hooks::default();
    let checks = [
        selfcheck::ctc_gradient(&hooks, 20),
        selfcheck::layer_gradients(20),
        selfcheck::end_to_end_gradients(20),
    ];
    suite(2, "gradient suite", &checks, t.elapsed(), 60);
}

#[test]
fn criterion_3_fomaml_consistency() {
    let gap = (0..10)
        .map(|s| selfcheck::zero_inner_lr_gap(s).unwrap())
        .fold(0.0f64, f64::max);
    let mut ratios = Vec::new();
    for seed in 0..10 {
        let e = selfcheck::fomaml_error_sweep(seed).unwrap();
        ratios.push(e[1] / e[0]);
        ratios.push(e[2] / e[1]);
    }
    let worst = ratios.iter().copied().fold(0.0f64, f64::max);
    let (fo, exact, _) = selfcheck::scalar_meta_gradients().unwrap();
    let a = gap <= COINCIDENCE_TOL;
    let b = worst <= HALVING_SLACK / 2.0;
    let c = (fo + 0.4).abs() < CLOSED_FORM_TOL && (exact + 0.32).abs() < CLOSED_FORM_TOL;
    let detail = format!(
        "(a) inner_lr 0 gap {gap:.1e}; (b) worst error ratio per halving {worst:.3} <= {:.2} over 10 seeds; \
         (c) FOMAML {fo:.12} exact {exact:.12}",
        HALVING_SLACK / 2.0
    );
    report(3, "FOMAML consistency", a && b && c, &detail);
    assert!(a && b && c, "{detail}");
}

#[test]
fn criterion_4_decoder_exactness() {
    let t = Instant::now();
    let c = selfcheck::decoder_exactness(500);
    suite(4, "decoder exactness", &[c], t.elapsed(), 60);
}

#[test]
fn criterion_5_monolingual_learnability() {
    let t = Instant::now();
    let cfg = RunConfig::default();
    let task = generate_family(&SyntheticFamilyConfig {
        noise_sigma: 0.0,
        seed: 0,
        ..cfg.family.clone()
    })
    .unwrap()
    .remove(0);
    assert_eq!(task.full.len(), 500);
    let model = commands::random_init(&cfg, task.feature_dim).unwrap();
    let fcfg = FinetuneConfig {
        epochs: 300,
        stop_below_cer: Some(5.0),
        ..cfg.finetune_config(Split::Full, None)
    };
    let out = finetune(&model, &task, Split::Full, &fcfg).unwrap();
    let cer = out.final_cer().unwrap();
    let elapsed = t.elapsed();
    let ok = cer < 5.0 && within(elapsed, 300);
    let detail = format!(
        "language {} test CER {cer:.2}% after {} epochs; {:.1}s of 300s",
        task.id,
        out.epochs.len(),
        elapsed.as_secs_f64()
    );
    report(5, "monolingual learnability", ok, &detail);
    assert!(ok, "{detail}");
}

const TARGETS: [&str; 4] = ["tgt0", "tgt1", "tgt2", "tgt3"];
const SOURCES: [&str; 6] = ["src0", "src1", "src2", "src3", "src4", "src5"];

/// Data and pretraining runs of one master seed on the default family,
/// kept under the cargo test scratch directory.
struct SeedRun {
    root: PathBuf,
    cfg: RunConfig,
}

impl SeedRun {
    fn create(seed: u64) -> Self {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-seed{seed}"));
        let _ = fs::remove_dir_all(&root);
        let cfg = RunConfig::resolve(None, Some(seed)).unwrap();
        commands::generate(
            &cfg,
            &GenerateArgs {
                out: root.join("data"),
            },
        )
        .unwrap();
        let run = Self { root, cfg };
        for regime in [Regime::Multi, Regime::Meta] {
            commands::pretrain(
                &run.cfg,
                &PretrainArgs {
                    regime,
                    corpora: SOURCES.iter().map(|s| run.corpus(s)).collect(),
                    out: run.pretrained(regime),
                },
            )
            .unwrap();
        }
        run
    }

    fn corpus(&self, id: &str) -> PathBuf {
        self.root.join("data").join(format!("{id}.jsonl"))
    }

    fn pretrained(&self, regime: Regime) -> PathBuf {
        self.root.join(format!("pretrain-{regime}"))
    }

    fn final_checkpoint(&self, regime: Regime) -> PathBuf {
        self.pretrained(regime).join(format!(
            "{}.params",
            checkpoint_stem(self.cfg.pretrain.total_steps)
        ))
    }

    /// Test CER of `target` after the fixed limited-split fine-tuning budget.
    fn target_cer(&self, init: &str, target: &str) -> f64 {
        let start = match init {
            "none" => Init::NoPretrain,
            "multi" => Init::Checkpoint(self.final_checkpoint(Regime::Multi)),
            _ => Init::Checkpoint(self.final_checkpoint(Regime::Meta)),
        };
        let dir = self.root.join(format!("ft-{init}-{target}"));
        let ft = commands::finetune(
            &self.cfg,
            &FinetuneArgs {
                init: start,
                corpus: self.corpus(target),
                split: Split::Limited,
                epochs: None,
                out: dir.clone(),
            },
        )
        .unwrap();
        commands::evaluate(
            &self.cfg,
            &EvaluateArgs {
                checkpoint: ft.checkpoint,
                corpus: self.corpus(target),
                beam: None,
                out: dir,
            },
        )
        .unwrap()
        .cer
    }
}

fn seed_run(seed: u64) -> &'static SeedRun {
    static RUNS: [OnceLock<SeedRun>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    RUNS[seed as usize].get_or_init(|| SeedRun::create(seed))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn criterion_6_transfer_trend() {
    let t = Instant::now();
    let mut per_seed = Vec::new();
    for seed in 0..3 {
        let run = seed_run(seed);
        let row: Vec<f64> = ["meta", "multi", "none"]
            .iter()
            .map(|init| mean(&TARGETS.map(|tgt| run.target_cer(init, tgt))))
            .collect();
        println!(
            "  seed {seed}: mean target CER meta {:.2}% multi {:.2}% no-pretrain {:.2}%",
            row[0], row[1], row[2]
        );
        per_seed.push(row);
    }
    let col = |i: usize| mean(&per_seed.iter().map(|r| r[i]).collect::<Vec<_>>());
    let (meta, multi, none) = (col(0), col(1), col(2));
    let strict = per_seed.iter().all(|r| r[0] < r[2]);
    let elapsed = t.elapsed();
    let ok = meta <= multi && multi <= none && strict && within(elapsed, 30 * 60);
    let detail = format!(
        "mean over 3 seeds: meta {meta:.2}% <= multi {multi:.2}% <= no-pretrain {none:.2}%; \
         meta < no-pretrain in every seed: {strict}; {:.0}s of 1800s",
        elapsed.as_secs_f64()
    );
    report(6, "transfer trend", ok, &detail);
    assert!(ok, "{detail}");
}

const CURVE_STEPS: [u64; 5] = [200, 600, 1000, 1400, 2000];

fn curve_for(run: &SeedRun, regime: Regime, target: &str) -> Vec<CurveRow> {
    let picked = run.root.join(format!("curve-ckpts-{regime}"));
    let _ = fs::remove_dir_all(&picked);
    fs::create_dir_all(&picked).unwrap();
    for step in CURVE_STEPS {
        let stem = checkpoint_stem(step);
        for ext in ["params", "json"] {
            let name = format!("{stem}.{ext}");
            fs::copy(run.pretrained(regime).join(&name), picked.join(&name)).unwrap();
        }
    }
    commands::curve(
        &run.cfg,
        &CurveArgs {
            checkpoints: picked,
            corpus: run.corpus(target),
            epochs: None,
            out: run.root.join(format!("curve-{regime}")),
        },
    )
    .unwrap()
}

fn points(rows: &[CurveRow]) -> String {
    rows.iter()
        .map(|r| format!("{}:{:.2}", r.pretrain_step, r.best_val_cer))
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn criterion_7_curve_shape() {
    let run = seed_run(0);
    let meta = curve_for(run, Regime::Meta, "tgt0");
    let multi = curve_for(run, Regime::Multi, "tgt0");
    assert_eq!(meta.len(), CURVE_STEPS.len() + 1);
    let (first, last) = (meta[1].best_val_cer, meta[CURVE_STEPS.len()].best_val_cer);
    let multi_pts: Vec<f64> = multi[1..].iter().map(|r| r.best_val_cer).collect();
    let multi_best = multi_pts.iter().copied().fold(f64::INFINITY, f64::min);
    let degrades = *multi_pts.last().unwrap() > multi_best;
    println!("  meta curve (step:CER) {}", points(&meta));
    println!("  multi curve (step:CER) {}", points(&multi));
    println!(
        "  multi curve late-stage degradation: {}",
        if degrades {
            "yes, final point above its best"
        } else {
            "no"
        }
    );
    let ok = last <= first;
    let detail = format!("meta curve final {last:.2}% <= first {first:.2}%");
    report(7, "curve shape", ok, &detail);
    assert!(ok, "{detail}");
}

fn run_bin(cwd: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_metactc"))
        .current_dir(cwd)
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "metactc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

const SMALL_CONFIG: &str = r#"{
    "schema_version": 1,
    "family": {
        "n_languages": 4, "n_source": 3, "alphabet_sizes": [5, 6, 5, 4],
        "feature_dim": 6, "shared_pool_size": 6,
        "utterances_per_language": 40, "test_utterances": 8
    },
    "model": { "hidden_dim": 8 },
    "pretrain": {
        "total_steps": 6, "checkpoint_every": 3, "multi_batch": 4,
        "episode": { "tasks_per_episode": 2, "n_train": 3, "n_test": 3 }
    },
    "finetune": { "epochs_limited": 2 },
    "evaluate": { "beam": 5 }
}
"#;

/// Runs every command in `cwd` with relative paths.
fn full_pipeline(cwd: &Path) {
    fs::write(cwd.join("run.json"), SMALL_CONFIG).unwrap();
    let common = ["--config", "run.json", "--seed", "11"];
    fn with<'a>(extra: &[&'a str], common: &[&'a str]) -> Vec<&'a str> {
        [extra, common].concat()
    }
    run_bin(cwd, &with(&["generate", "--out", "data"], &common));
    let sources = ["data/src0.jsonl", "data/src1.jsonl", "data/src2.jsonl"];
    for regime in ["multi", "meta"] {
        let out = format!("pre-{regime}");
        run_bin(
            cwd,
            &with(
                &[
                    &["pretrain", "--regime", regime, "--out", &out][..],
                    &sources[..],
                ]
                .concat(),
                &common,
            ),
        );
    }
    run_bin(
        cwd,
        &with(
            &[
                "finetune",
                "--checkpoint",
                "pre-meta/ckpt-000006.params",
                "--corpus",
                "data/tgt0.jsonl",
                "--out",
                "ft",
            ],
            &common,
        ),
    );
    run_bin(
        cwd,
        &with(
            &[
                "finetune",
                "--no-pretrain",
                "--corpus",
                "data/tgt0.jsonl",
                "--out",
                "ft-none",
            ],
            &common,
        ),
    );
    run_bin(
        cwd,
        &with(
            &[
                "evaluate",
                "--checkpoint",
                "ft/finetuned.params",
                "--corpus",
                "data/tgt0.jsonl",
                "--out",
                "eval",
            ],
            &common,
        ),
    );
    run_bin(
        cwd,
        &with(
            &[
                "curve",
                "--checkpoints",
                "pre-meta",
                "--corpus",
                "data/tgt0.jsonl",
                "--out",
                "curve",
            ],
            &common,
        ),
    );
    run_bin(cwd, &with(&["selfcheck", "--out", "check"], &common));
}

#[test]
fn criterion_8_determinism() {
    let a = tempfile::TempDir::new().unwrap();
    let b = tempfile::TempDir::new().unwrap();
    full_pipeline(a.path());
    full_pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let names: Vec<&PathBuf> = ta.iter().map(|f| &f.0).collect();
    let differing: Vec<String> = ta
        .iter()
        .zip(&tb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    let same_layout = names == tb.iter().map(|f| &f.0).collect::<Vec<_>>();
    let ok = same_layout && differing.is_empty();
    let detail = format!(
        "{} output files from generate, pretrain (multi, meta), finetune, evaluate, curve and selfcheck; differing: {differing:?}",
        ta.len()
    );
    report(8, "determinism", ok, &detail);
    assert!(ok, "{detail}");
}
