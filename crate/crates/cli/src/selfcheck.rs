//! The oracle suite behind `metactc selfcheck`: CTC against brute force,
//! finite-difference gradient checks, decoder exactness and FOMAML against
//! the exact meta-gradient.

use std::collections::BTreeMap;

use metactc::ctc::{
    beam_decode, collapse, ctc_brute_force, ctc_loss, greedy_decode, AlignmentPath, Alphabet,
    LabelSequence, LogProbLattice,
};
use metactc::diffcore::{
    backward_layer, compare_grads, finite_diff_grad, forward_layer, LayerSpec, Matrix, NamedParams,
};
use metactc::metatrain::{
    adapt, exact_meta_grad_fd, exact_meta_grad_fd_with, fomaml_term, meta_episode, multitask_grads,
    AdaptationObjective, EpisodeConfig, TaskBatchSample,
};
use metactc::model::{EncoderConfig, LossGrads, MultiHeadModel};
use metactc::rng::rng_for;
use metactc::tasks::{generate_family, LanguageTask, SyntheticFamilyConfig, Utterance};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const CTC_ORACLE_TOL: f64 = 1e-10;
pub const LAYER_GRAD_TOL: f64 = 1e-6;
pub const END_TO_END_GRAD_TOL: f64 = 1e-5;
pub const COINCIDENCE_TOL: f64 = 1e-12;
pub const CLOSED_FORM_TOL: f64 = 1e-9;
/// Allowed slack on "halving inner_lr halves the FOMAML error".
pub const HALVING_SLACK: f64 = 1.5;

/// Signature of a CTC loss-and-gradient implementation.
pub type CtcLossFn = fn(&LogProbLattice, &LabelSequence) -> metactc::Result<(f64, Matrix)>;

/// Implementations under test. Swapping one in lets a test confirm that
/// the suite catches a broken implementation.
#[derive(Clone, Copy)]
pub struct Hooks {
    pub ctc_loss: CtcLossFn,
}

impl Default for Hooks {
    fn default() -> Self {
        Self { ctc_loss }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }

    fn failed(name: &str, err: impl std::fmt::Display) -> Self {
        Self::new(name, false, format!("error: {err}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfcheckReport {
    pub checks: Vec<CheckResult>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn lines(&self) -> String {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} {}: {}\n",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                )
            })
            .collect()
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .expect("finite")
}

fn random_labels(rng: &mut impl Rng, max_len: usize, symbols: usize) -> LabelSequence {
    let len = rng.random_range(0..=max_len);
    LabelSequence((0..len).map(|_| rng.random_range(0..symbols)).collect())
}

/// Largest label sequence that fits in `frames`, drawn at random.
fn feasible_labels(rng: &mut impl Rng, frames: usize, symbols: usize) -> LabelSequence {
    let mut l = random_labels(rng, frames, symbols);
    while l.min_frames() > frames {
        l.0.pop();
    }
    l
}

/// |ctc_loss − brute force| on random small lattices plus the uniform
/// three-frame case where P("ab") = 5/27.
pub fn ctc_oracle(hooks: &Hooks, instances: usize) -> CheckResult {
    const NAME: &str = "ctc_loss matches brute force";
    let run = || -> metactc::Result<CheckResult> {
        let uniform = LogProbLattice::from_probs(&vec![vec![1.0 / 3.0; 3]; 3])?;
        let (l, _) = (hooks.ctc_loss)(&uniform, &LabelSequence(vec![0, 1]))?;
        let hand = (27.0f64 / 5.0).ln();
        let mut worst = (l - hand).abs();
        let mut rng = rng_for(0, "selfcheck/ctc-oracle");
        let mut infeasible = 0;
        for _ in 0..instances {
            let frames = rng.random_range(1..=6);
            let symbols = rng.random_range(1..=3);
            let lat =
                LogProbLattice::from_logits(&random_matrix(&mut rng, frames, symbols + 1, 3.0))?;
            let target = random_labels(&mut rng, 4, symbols);
            let brute = ctc_brute_force(&lat, &target)?;
            match (hooks.ctc_loss)(&lat, &target) {
                Ok((loss, _)) => worst = worst.max((loss - brute).abs()),
                Err(metactc::Error::Infeasible { .. }) if brute.is_infinite() => infeasible += 1,
                Err(e) => return Err(e),
            }
        }
        Ok(CheckResult::new(
            NAME,
            worst < CTC_ORACLE_TOL,
            format!("{instances} instances ({infeasible} infeasible), max |diff| {worst:.3e} (tol {CTC_ORACLE_TOL:.0e})"),
        ))
    };
    run().unwrap_or_else(|e| CheckResult::failed(NAME, e))
}

/// CTC gradient w.r.t. logits (through the log-softmax) against central
/// differences.
pub fn ctc_gradient(hooks: &Hooks, instances: usize) -> CheckResult {
    const NAME: &str = "ctc_loss gradient matches finite differences";
    let run = || -> metactc::Result<CheckResult> {
        let mut rng = rng_for(0, "selfcheck/ctc-grad");
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let frames = rng.random_range(1..=6);
            let symbols = rng.random_range(1..=3);
            let logits = random_matrix(&mut rng, frames, symbols + 1, 2.0);
            let target = feasible_labels(&mut rng, frames, symbols);
            let lat = LogProbLattice::from_logits(&logits)?;
            let (_, g) = (hooks.ctc_loss)(&lat, &target)?;
            let mut dz = g;
            for t in 0..frames {
                let s: f64 = dz.row(t).iter().sum();
                let lp = lat.log_probs().row(t).to_vec();
                for (d, l) in dz.row_mut(t).iter_mut().zip(lp) {
                    *d -= l.exp() * s;
                }
            }
            let analytic: NamedParams = [("z".to_string(), dz)].into_iter().collect();
            let params: NamedParams = [("z".to_string(), logits)].into_iter().collect();
            let numeric = finite_diff_grad(
                |p| {
                    Ok((hooks.ctc_loss)(
                        &LogProbLattice::from_logits(p.get("z").expect("z"))?,
                        &target,
                    )?
                    .0)
                },
                &params,
                1e-6,
            )?;
            worst = worst.max(compare_grads(&analytic, &numeric)?.max_rel_err);
        }
        Ok(CheckResult::new(
            NAME,
            worst < LAYER_GRAD_TOL,
            format!("{instances} instances, max rel err {worst:.3e} (tol {LAYER_GRAD_TOL:.0e})"),
        ))
    };
    run().unwrap_or_else(|e| CheckResult::failed(NAME, e))
}

/// Every layer kind, parameters and input, against central differences of
/// a random linear functional of the output.
pub fn layer_gradients(instances: usize) -> CheckResult {
    const NAME: &str = "layer gradients match finite differences";
    let run = || -> metactc::Result<CheckResult> {
        let specs = [
            LayerSpec::frame_stack("stack", 3, 2),
            LayerSpec::affine("proj", 3, 4),
            LayerSpec::tanh("act", 3),
            LayerSpec::recurrent_bidi("rnn", 3, 4),
        ];
        let mut worst = 0.0f64;
        for spec in &specs {
            for seed in 0..instances as u64 {
                let mut rng = rng_for(seed, &format!("selfcheck/layer/{}", spec.name));
                let params = spec.init_params(&mut rng);
                let frames = rng.random_range(1..=6);
                let x = random_matrix(&mut rng, frames, 3, 1.5);
                let (out, cache) = forward_layer(spec, &params, &x)?;
                let r = random_matrix(&mut rng, out.rows(), out.cols(), 1.0);
                let (gx, gp) = backward_layer(spec, &params, &cache, &r)?;
                let dot = |m: &Matrix| {
                    m.data()
                        .iter()
                        .zip(r.data())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                };

                if !params.is_empty() {
                    let numeric = finite_diff_grad(
                        |p| Ok(dot(&forward_layer(spec, p, &x)?.0)),
                        &params,
                        1e-6,
                    )?;
                    worst = worst.max(compare_grads(&gp, &numeric)?.max_rel_err);
                }
                let xp: NamedParams = [("x".to_string(), x.clone())].into_iter().collect();
                let numeric = finite_diff_grad(
                    |p| Ok(dot(&forward_layer(spec, &params, p.get("x").expect("x"))?.0)),
                    &xp,
                    1e-6,
                )?;
                let analytic: NamedParams = [("x".to_string(), gx)].into_iter().collect();
                worst = worst.max(compare_grads(&analytic, &numeric)?.max_rel_err);
            }
        }
        Ok(CheckResult::new(
            NAME,
            worst < LAYER_GRAD_TOL,
            format!(
                "{} kinds x {instances} seeds, max rel err {worst:.3e} (tol {LAYER_GRAD_TOL:.0e})",
                specs.len()
            ),
        ))
    };
    run().unwrap_or_else(|e| CheckResult::failed(NAME, e))
}

fn letters(n: usize) -> Alphabet {
    Alphabet::new((b'a'..).take(n).map(char::from).collect()).expect("distinct letters")
}

/// Utterance loss gradient of a tiny model, all parameters at once.
pub fn end_to_end_gradients(instances: usize) -> CheckResult {
    const NAME: &str = "end-to-end gradients match finite differences";
    let run = || -> metactc::Result<CheckResult> {
        let mut worst = 0.0f64;
        for seed in 0..instances as u64 {
            let mut rng = rng_for(seed, "selfcheck/e2e");
            let symbols = rng.random_range(2..=3);
            let mut model = MultiHeadModel::new(EncoderConfig::new(3, 4, 2)?, seed)?;
            model.add_language("xx", letters(symbols), seed)?;
            let frames = rng.random_range(2..=8);
            let x = random_matrix(&mut rng, frames, 3, 1.5);
            let target = feasible_labels(&mut rng, model.config().output_frames(frames), symbols);
            let g = model.utterance_loss_and_grads("xx", &x, &target)?;
            let analytic = g.encoder.merged(&g.head)?;
            let numeric = finite_diff_grad(
                |p| {
                    let m = MultiHeadModel::from_params(
                        model.config().clone(),
                        model.alphabets().clone(),
                        p,
                    )?;
                    Ok(ctc_loss(&m.lattice("xx", &x)?, &target)?.0)
                },
                &model.all_params(),
                1e-6,
            )?;
            worst = worst.max(compare_grads(&analytic, &numeric)?.max_rel_err);
        }
        Ok(CheckResult::new(
            NAME,
            worst < END_TO_END_GRAD_TOL,
            format!("{instances} seeds, max rel err {worst:.3e} (tol {END_TO_END_GRAD_TOL:.0e})"),
        ))
    };
    run().unwrap_or_else(|e| CheckResult::failed(NAME, e))
}

/// Most probable label sequence by enumerating every alignment. Ties go
/// to the lexicographically smallest sequence.
pub fn brute_force_argmax(lattice: &LogProbLattice) -> (LabelSequence, BTreeMap<Vec<usize>, f64>) {
    let (frames, k) = (lattice.frames(), lattice.emission_size());
    let mut mass: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let mut path = vec![0usize; frames];
    loop {
        let lp: f64 = path
            .iter()
            .enumerate()
            .map(|(t, &e)| lattice.log_probs().get(t, e))
            .sum();
        *mass
            .entry(collapse(&AlignmentPath(path.clone())).0)
            .or_default() += lp.exp();
        let mut t = 0;
        while t < frames {
            path[t] += 1;
            if path[t] < k {
                break;
            }
            path[t] = 0;
            t += 1;
        }
        if t == frames {
            break;
        }
    }
    let best = mass
        .iter()
        .fold(None::<(&Vec<usize>, f64)>, |acc, (s, &p)| match acc {
            Some((_, bp)) if bp >= p => acc,
            _ => Some((s, p)),
        })
        .map(|(s, _)| LabelSequence(s.clone()))
        .unwrap_or_default();
    (best, mass)
}

/// Saturated beam against brute-force argmax, and beam width 1 against
/// greedy decoding.
pub fn decoder_exactness(instances: usize) -> CheckResult {
    const NAME: &str = "decoders are exact";
    let run = || -> metactc::Result<CheckResult> {
        let mut rng = rng_for(0, "selfcheck/decode");
        let mut mismatches = 0;
        let mut near_ties = 0;
        for _ in 0..instances {
            let frames = rng.random_range(1..=4);
            let symbols = rng.random_range(1..=2);
            let lat =
                LogProbLattice::from_logits(&random_matrix(&mut rng, frames, symbols + 1, 3.0))?;
            let (best, mass) = brute_force_argmax(&lat);
            let beam = beam_decode(&lat, 1000);
            if beam != best {
                let (pb, pm) = (mass.get(&beam.0).copied().unwrap_or(0.0), mass[&best.0]);
                if (pb - pm).abs() <= 1e-12 * pm {
                    near_ties += 1;
                } else {
                    mismatches += 1;
                }
            }
        }
        let mut greedy_mismatches = 0;
        for _ in 0..100 {
            let frames = rng.random_range(1..=12);
            let symbols = rng.random_range(1..=5);
            let lat =
                LogProbLattice::from_logits(&random_matrix(&mut rng, frames, symbols + 1, 3.0))?;
            if beam_decode(&lat, 1) != greedy_decode(&lat) {
                greedy_mismatches += 1;
            }
        }
        Ok(CheckResult::new(
            NAME,
            mismatches == 0 && greedy_mismatches == 0,
            format!(
                "saturated beam vs brute force: {mismatches}/{instances} mismatches ({near_ties} numerical ties); \
                 beam 1 vs greedy: {greedy_mismatches}/100 mismatches"
            ),
        ))
    };
    run().unwrap_or_else(|e| CheckResult::failed(NAME, e))
}

/// loss_tr(θ) = θ², loss_te(θ) = (θ − 1)², no head parameters.
struct Quadratic;

fn scalar(v: f64) -> NamedParams {
    [("theta".to_string(), Matrix::filled(1, 1, v))]
        .into_iter()
        .collect()
}

fn theta(p: &NamedParams) -> f64 {
    p.get("theta").expect("theta").get(0, 0)
}

impl AdaptationObjective for Quadratic {
    fn train(&self, e: &NamedParams, h: &NamedParams) -> metactc::Result<LossGrads> {
        let t = theta(e);
        Ok(LossGrads {
            loss: t * t,
            encoder: scalar(2.0 * t),
            head: h.zeros_like(),
        })
    }

    fn test(&self, e: &NamedParams, h: &NamedParams) -> metactc::Result<LossGrads> {
        let t = theta(e);
        Ok(LossGrads {
            loss: (t - 1.0) * (t - 1.0),
            encoder: scalar(2.0 * (t - 1.0)),
            head: h.zeros_like(),
        })
    }
}

/// FOMAML and exact meta-gradients of the scalar quadratic at θ = 1,
/// inner_lr = 0.1: (fomaml, exact, closed-form exact).
pub fn scalar_meta_gradients() -> metactc::Result<(f64, f64, f64)> {
    let (lr, t0, head) = (0.1, scalar(1.0), NamedParams::new());
    let adapted = theta(&adapt(&Quadratic, &t0, &head, lr, 1)?.0);
    let fo = theta(&fomaml_term(&Quadratic, &t0, &head, lr, 1)?.encoder_grad);
    let exact = theta(&exact_meta_grad_fd_with(
        &Quadratic, &t0, &head, lr, 1, 1e-4,
    )?);
    Ok((fo, exact, 2.0 * (adapted - 1.0) * (1.0 - 2.0 * lr)))
}

fn tiny_family(seed: u64) -> metactc::Result<Vec<LanguageTask>> {
    generate_family(&SyntheticFamilyConfig {
        n_languages: 2,
        n_source: 2,
        alphabet_sizes: vec![4, 5],
        feature_dim: 4,
        shared_pool_size: 5,
        utterances_per_language: 20,
        test_utterances: 4,
        seed,
        ..Default::default()
    })
}

fn tiny_setup(seed: u64) -> metactc::Result<(MultiHeadModel, Vec<TaskBatchSample>)> {
    let tasks = tiny_family(seed)?;
    let mut model = MultiHeadModel::new(EncoderConfig::new(4, 6, 2)?, seed)?;
    let mut samples = Vec::new();
    for t in &tasks {
        model.add_language(&t.id, t.alphabet.clone(), seed)?;
        samples.push(TaskBatchSample {
            task_id: t.id.clone(),
            train_set: t.full[..3].to_vec(),
            test_set: t.full[3..6].to_vec(),
        });
    }
    Ok((model, samples))
}

pub fn sweep_config(inner_lr: f64) -> EpisodeConfig {
    EpisodeConfig {
        inner_lr,
        meta_lr: 0.1,
        tasks_per_episode: 1,
        n_train: 3,
        n_test: 3,
        inner_steps: 1,
    }
}

/// ‖FOMAML − exact‖ / ‖exact‖ for inner_lr ∈ {0.1, 0.05, 0.025} on one
/// seeded tiny model.
pub fn fomaml_error_sweep(seed: u64) -> metactc::Result<[f64; 3]> {
    let (model, samples) = tiny_setup(seed)?;
    let s = &samples[0];
    let mut errs = [0.0; 3];
    for (e, lr) in errs.iter_mut().zip([0.1, 0.05, 0.025]) {
        let cfg = sweep_config(lr);
        let exact = exact_meta_grad_fd(&model, s, &cfg)?;
        let mut diff = meta_episode(&model, std::slice::from_ref(s), &cfg)?.meta_grad;
        diff.axpy(-1.0, &exact)?;
        *e = diff.norm() / exact.norm();
    }
    Ok(errs)
}

/// Max entrywise gap between the inner_lr = 0 meta-gradient and the
/// multitask gradient on the test sets.
pub fn zero_inner_lr_gap(seed: u64) -> metactc::Result<f64> {
    let (model, samples) = tiny_setup(seed)?;
    let ep = meta_episode(&model, &samples, &sweep_config(0.0))?;
    let batches: Vec<(String, Vec<Utterance>)> = samples
        .iter()
        .map(|s| (s.task_id.clone(), s.test_set.clone()))
        .collect();
    let mut diff = ep.meta_grad;
    diff.axpy(-1.0, &multitask_grads(&model, &batches)?.encoder)?;
    Ok(diff.max_abs())
}

pub fn fomaml_consistency(seeds: u64) -> CheckResult {
    const NAME: &str = "FOMAML agrees with the exact meta-gradient";
    let run = || -> metactc::Result<CheckResult> {
        let gap = (0..seeds)
            .map(zero_inner_lr_gap)
            .try_fold(0.0f64, |m, g| g.map(|g| m.max(g)))?;
        let mut worst_ratio = 0.0f64;
        for seed in 0..seeds {
            let e = fomaml_error_sweep(seed)?;
            worst_ratio = worst_ratio.max(e[1] / e[0]).max(e[2] / e[1]);
        }
        let (fo, exact, closed) = scalar_meta_gradients()?;
        let scalar_ok =
            (fo + 0.4).abs() < CLOSED_FORM_TOL && (exact - closed).abs() < CLOSED_FORM_TOL;
        let passed = gap <= COINCIDENCE_TOL && worst_ratio <= HALVING_SLACK / 2.0 && scalar_ok;
        Ok(CheckResult::new(
            NAME,
            passed,
            format!(
                "inner_lr 0 gap {gap:.1e}; worst error ratio per halving {worst_ratio:.3} (limit {:.2}) over {seeds} seeds; \
                 scalar FOMAML {fo:.12} exact {exact:.12}",
                HALVING_SLACK / 2.0
            ),
        ))
    };
    run().unwrap_or_else(|e| CheckResult::failed(NAME, e))
}

/// Runs the whole suite.
pub fn run(hooks: &Hooks) -> SelfcheckReport {
    SelfcheckReport {
        checks: vec![
            ctc_oracle(hooks, 500),
            ctc_gradient(hooks, 20),
            layer_gradients(20),
            end_to_end_gradients(20),
            decoder_exactness(300),
            fomaml_consistency(10),
        ],
    }
}
