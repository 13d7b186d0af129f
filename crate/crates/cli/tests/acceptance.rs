//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. `ACCEPTANCE_ONLY=2,7` restricts the run
//! (criterion 9 then reruns only the selected criteria it depends on).

use std::collections::BTreeSet;
use std::time::Instant;

use bsmall::autodiff::{batch_norm, mse, Tape, Tensor, Var};
use bsmall::layers::{
    build_model, forward_variational, forward_variational_conv, kl_divergence, ForwardCtx,
    LayerSpec, Model, ParamRole, VariationalVars, KL_CONSTANTS, LOG_ALPHA_CLIP,
};
use bsmall::meta::{Algorithm, MetaConfig, MetaLearner, MetaState, TaskSource};
use bsmall::models::sinusoid_mlp;
use bsmall::rng::{stream, Stream};
use bsmall::sensornet::{centralized_reference, run_simulation, SensorGraph, SimulationConfig};
use bsmall::tasks::{sample_sinusoid_episode, SinusoidSource, TaskEpisode};
use bsmall_cli::config::{ExperimentConfig, ExperimentKind};
use bsmall_cli::experiment::{run_seed, SeedOutcome};

const SEEDS: [u64; 3] = [0, 1, 2];
/// KL weight for every variational run; the `1 / k_shot` default collapses
/// both networks to the prior.
const KL_WEIGHT: f64 = 1e-5;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

// ---------------------------------------------------------------- helpers

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Worst relative error between the tape gradient of `f` and central differences.
fn fd_check(f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&tape, &vars);
    let analytic = tape.grad(out, &vars, false).unwrap();
    let eval = |ts: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.param(t)).collect();
        f(&tape, &vars).item()
    };
    let numeric = numeric_grad(&eval, inputs);
    analytic
        .iter()
        .zip(&numeric)
        .flat_map(|(a, n)| {
            a.value()
                .iter()
                .zip(n)
                .map(|(x, y)| rel_err(*x, *y))
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

fn numeric_grad(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor]) -> Vec<Vec<f64>> {
    let h = 1e-5;
    let mut work = inputs.to_vec();
    (0..inputs.len())
        .map(|t| {
            (0..inputs[t].numel())
                .map(|i| {
                    let orig = work[t].data()[i];
                    work[t].data_mut()[i] = orig + h;
                    let plus = f(&work);
                    work[t].data_mut()[i] = orig - h;
                    let minus = f(&work);
                    work[t].data_mut()[i] = orig;
                    (plus - minus) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

fn random(shape: &[usize], scale: f64, rng: &mut Stream) -> Tensor {
    use rand::Rng;
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn bits(state: &MetaState) -> Vec<u64> {
    state
        .params
        .iter()
        .flat_map(|p| p.data().iter().map(|v| v.to_bits()))
        .chain(
            state
                .adam_m
                .iter()
                .chain(&state.adam_v)
                .flatten()
                .map(|v| v.to_bits()),
        )
        .collect()
}

// ------------------------------------------------------------ criterion 1

fn criterion1() -> Outcome {
    let rng = &mut stream(11, &[]);
    let mut worst: Vec<(&str, f64)> = Vec::new();

    let x = random(&[4, 3], 1.0, rng);
    let theta = random(&[3, 2], 1.0, rng);
    let ls2 = random(&[3, 2], 1.0, rng)
        .data()
        .iter()
        .map(|v| v - 3.0)
        .collect::<Vec<_>>();
    let ls2 = Tensor::new(vec![3, 2], ls2).unwrap();
    let bias = random(&[2], 0.5, rng);
    worst.push((
        "variational dense",
        fd_check(
            &|_, v| {
                let mut noise = stream(3, &[]);
                let p = VariationalVars {
                    theta: v[1],
                    log_sigma2: v[2],
                    bias: Some(v[3]),
                };
                forward_variational(p, v[0], &mut ForwardCtx::train(&mut noise))
                    .unwrap()
                    .square()
                    .sum()
            },
            &[x.clone(), theta.clone(), ls2.clone(), bias.clone()],
        ),
    ));

    let img = random(&[2, 2, 4, 4], 1.0, rng);
    let ctheta = random(&[3, 2, 3, 3], 0.5, rng);
    let cls2 = Tensor::full(&[3, 2, 3, 3], -4.0);
    let cbias = random(&[3], 0.2, rng);
    worst.push((
        "variational conv",
        fd_check(
            &|_, v| {
                let mut noise = stream(4, &[]);
                let p = VariationalVars {
                    theta: v[1],
                    log_sigma2: v[2],
                    bias: Some(v[3]),
                };
                forward_variational_conv(p, v[0], &mut ForwardCtx::train(&mut noise))
                    .unwrap()
                    .square()
                    .sum()
            },
            &[img.clone(), ctheta, cls2, cbias],
        ),
    ));

    worst.push((
        "kl",
        fd_check(
            &|_, v| kl_divergence(v[0], v[1]).unwrap(),
            &[theta.clone(), ls2.clone()],
        ),
    ));

    let gamma = random(&[2], 1.0, rng);
    let beta = random(&[2], 1.0, rng);
    let w = random(&[2, 2, 4, 4], 1.0, rng);
    worst.push((
        "batch norm",
        fd_check(
            &|_, v| {
                batch_norm(v[0], v[1], v[2], 1e-5)
                    .unwrap()
                    .mul(v[3])
                    .unwrap()
                    .sum()
            },
            &[img.clone(), gamma, beta, w],
        ),
    ));

    worst.push((
        "conv + pool + relu",
        fd_check(
            &|_, v| {
                v[0].conv2d(v[1], 1)
                    .unwrap()
                    .max_pool2()
                    .unwrap()
                    .relu()
                    .sum()
            },
            &[img.clone(), random(&[3, 2, 3, 3], 0.5, rng)],
        ),
    ));

    let labels = vec![0, 2, 1, 2];
    worst.push((
        "softmax cross-entropy",
        fd_check(
            &|_, v| v[0].softmax_cross_entropy(&labels).unwrap(),
            &[random(&[4, 3], 2.0, rng)],
        ),
    ));
    worst.push((
        "mse",
        fd_check(
            &|_, v| mse(v[0], v[1]).unwrap(),
            &[random(&[5, 1], 2.0, rng), random(&[5, 1], 2.0, rng)],
        ),
    ));

    // composed task loss, variational sinusoid network with the KL term
    let learner = MetaLearner::new(sinusoid_mlp(true, 7), MetaConfig::default()).unwrap();
    let mut params = learner.model.params().to_vec();
    for (p, info) in params.iter_mut().zip(learner.model.param_info()) {
        if info.role == ParamRole::LogSigma2 {
            *p = Tensor::full(p.shape(), -3.0);
        }
    }
    let ep = sample_sinusoid_episode(&mut stream(8, &[]), 10, 10).unwrap();
    worst.push((
        "task_loss",
        fd_check(
            &|_, v| {
                let mut noise = stream(9, &[]);
                learner
                    .task_loss(v, &ep.support, 0.1, &mut ForwardCtx::train(&mut noise))
                    .unwrap()
                    .total
            },
            &params,
        ),
    ));

    let layer_ok = worst.iter().all(|(_, e)| *e <= 1e-5);
    let meta = meta_gradient_errors();
    let meta_ok = meta.iter().all(|(_, e)| *e <= 1e-4);
    let fmt = |v: &[(&str, f64)]| {
        v.iter()
            .map(|(n, e)| format!("{n} {e:.1e}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    Outcome::new(
        layer_ok && meta_ok,
        format!("{}; meta: {}", fmt(&worst), fmt(&meta)),
    )
}

/// Second-order meta-gradients against finite differences of the full
/// adapt-then-score objective, on models with at most 50 parameters.
fn meta_gradient_errors() -> Vec<(&'static str, f64)> {
    let specs = [
        LayerSpec::dense(1, 8),
        LayerSpec::relu(),
        LayerSpec::dense(8, 1),
    ];
    let small_var = [
        LayerSpec::dense(1, 4),
        LayerSpec::relu(),
        LayerSpec::dense(4, 1),
    ];
    let cases: [(&str, Model, f64); 2] = [
        (
            "mlp",
            build_model(&[1], &specs, false, &mut stream(5, &[])).unwrap(),
            0.0,
        ),
        (
            "variational mlp",
            build_model(&[1], &small_var, true, &mut stream(5, &[])).unwrap(),
            0.1,
        ),
    ];
    let ep = sample_sinusoid_episode(&mut stream(6, &[]), 5, 5).unwrap();
    cases
        .into_iter()
        .map(|(name, mut model, lambda)| {
            assert!(model.num_params() <= 50);
            let info = model.param_info().to_vec();
            for (p, i) in model.params_mut().iter_mut().zip(&info) {
                if i.role == ParamRole::LogSigma2 {
                    *p = Tensor::full(p.shape(), -3.0);
                }
            }
            let cfg = MetaConfig {
                inner_lr: 0.1,
                ..Default::default()
            };
            let learner = MetaLearner::new(model.clone(), cfg).unwrap();
            let g = learner
                .episode_gradient(model.params(), &ep, lambda, &mut stream(0, &[]))
                .unwrap();
            let objective = |ts: &[Tensor]| {
                let tape = Tape::new();
                let p: Vec<Var> = ts.iter().map(|t| tape.param(t)).collect();
                let mut noise = stream(0, &[]);
                let mut ctx = ForwardCtx::train(&mut noise);
                let adapted = learner
                    .inner_adapt(&p, &ep.support, 1, lambda, &mut ctx)
                    .unwrap();
                learner
                    .task_loss(&adapted, &ep.query, lambda, &mut ctx)
                    .unwrap()
                    .total
                    .item()
            };
            let fd = numeric_grad(&objective, model.params());
            let err = g
                .grads
                .iter()
                .flatten()
                .zip(fd.iter().flatten())
                .map(|(a, b)| rel_err(*a, *b))
                .fold(0.0, f64::max);
            (name, err)
        })
        .collect()
}

// ------------------------------------------------------------ criterion 2

/// Per-step parameters of MAML and of B-SMALL with `λ = 0` and frozen
/// `log_sigma2 = -40`, from the same weights and episodes.
fn criterion2_run() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let steps = 100;
    let cfg = MetaConfig {
        tasks_per_batch: 5,
        ..Default::default()
    };
    let det = sinusoid_mlp(false, 21);
    let mut var = sinusoid_mlp(true, 21);
    let mut det_iter = det.params().iter();
    let info = var.param_info().to_vec();
    for (p, i) in var.params_mut().iter_mut().zip(&info) {
        *p = match i.role {
            ParamRole::LogSigma2 => Tensor::full(p.shape(), -40.0),
            _ => det_iter.next().unwrap().clone(),
        };
    }
    let maml = MetaLearner::new(det, cfg.clone()).unwrap();
    let bsmall = MetaLearner::new(
        var,
        MetaConfig {
            kl_weight: Some(0.0),
            freeze_log_sigma2: true,
            ..cfg.clone()
        },
    )
    .unwrap();
    let source = SinusoidSource::new(21, 10, 10);
    let mut sm = maml.init_state(21);
    let mut sb = bsmall.init_state(21);
    let flat = |learner: &MetaLearner, s: &MetaState| -> Vec<f64> {
        s.params
            .iter()
            .zip(learner.model.param_info())
            .filter(|(_, i)| i.role != ParamRole::LogSigma2)
            .flat_map(|(p, _)| p.data().to_vec())
            .collect()
    };
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for step in 0..steps {
        let eps: Vec<TaskEpisode> = (0..cfg.tasks_per_batch)
            .map(|s| source.train_episode(step, s).unwrap())
            .collect();
        maml.outer_step(&mut sm, &eps).unwrap();
        bsmall.outer_step(&mut sb, &eps).unwrap();
        a.push(flat(&maml, &sm));
        b.push(flat(&bsmall, &sb));
    }
    (a, b)
}

fn criterion2(run: &(Vec<Vec<f64>>, Vec<Vec<f64>>)) -> Outcome {
    let worst = run
        .0
        .iter()
        .zip(&run.1)
        .map(|(m, b)| {
            let diff = m
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            let scale = m.iter().map(|x| x.abs()).fold(0.0, f64::max);
            diff / scale
        })
        .fold(0.0, f64::max);
    Outcome::new(
        worst <= 1e-8,
        format!("max relative deviation over 100 steps {worst:.2e}"),
    )
}

// --------------------------------------------------------- criteria 3-5

/// Sinusoid run configuration shared by criteria 3, 4 and 5.
pub fn sinusoid_config(algorithm: Algorithm) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        experiment: ExperimentKind::Sinusoid,
        algorithm,
        seeds: SEEDS.to_vec(),
        eval_steps: vec![1, 5, 10],
        eval_episodes: 600,
        ..Default::default()
    };
    cfg.meta.k_shot = 10;
    cfg.meta.total_meta_steps = 10_000;
    cfg.meta.kl_weight = Some(KL_WEIGHT);
    cfg
}

struct SinusoidRuns {
    maml: Vec<SeedOutcome>,
    bsmall: Vec<SeedOutcome>,
}

fn sinusoid_runs() -> SinusoidRuns {
    let dir = tempfile::tempdir().unwrap();
    let run = |alg: Algorithm| -> Vec<SeedOutcome> {
        let cfg = sinusoid_config(alg);
        SEEDS
            .iter()
            .map(|&s| run_seed(&cfg, s, &dir.path().join(format!("{}_{s}", alg.name()))).unwrap())
            .collect()
    };
    SinusoidRuns {
        maml: run(Algorithm::Maml),
        bsmall: run(Algorithm::Bsmall),
    }
}

fn mean_curve(runs: &[SeedOutcome]) -> Vec<f64> {
    let n = runs.len() as f64;
    (0..runs[0].curve.len())
        .map(|i| runs.iter().map(|r| r.curve[i]).sum::<f64>() / n)
        .collect()
}

fn criterion3(r: &SinusoidRuns) -> Outcome {
    let m = mean_curve(&r.maml);
    let b = mean_curve(&r.bsmall);
    let a = b[5] <= m[5] && b[10] <= m[10];
    let bb = b[10] <= 0.7;
    let c = m[10] < m[1] && b[10] < b[1];
    Outcome::new(
        a && bb && c,
        format!(
            "MSE@1/5/10 maml {:.4}/{:.4}/{:.4} bsmall {:.4}/{:.4}/{:.4}; (a) {} (b) {} (c) {}",
            m[1], m[5], m[10], b[1], b[5], b[10], a, bb, c
        ),
    )
}

fn criterion4(r: &SinusoidRuns) -> Outcome {
    let ratios: Vec<f64> = r
        .bsmall
        .iter()
        .map(|o| o.sparsity.as_ref().unwrap().global_ratio)
        .collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Outcome::new(
        (0.10..=0.40).contains(&mean),
        format!("global sparsity at eta=3: mean {mean:.3}, per seed {ratios:.3?}"),
    )
}

fn criterion5(r: &SinusoidRuns) -> Outcome {
    let pairs: Vec<(f64, f64)> = r
        .maml
        .iter()
        .zip(&r.bsmall)
        .map(|(m, b)| (m.gap.unwrap(), b.gap.unwrap()))
        .collect();
    let wins = pairs.iter().filter(|(m, b)| b <= m).count();
    Outcome::new(
        wins >= 2,
        format!("bsmall gap <= maml gap in {wins}/3 seeds; (maml, bsmall) {pairs:.4?}"),
    )
}

// ------------------------------------------------------------ criterion 6

pub fn classification_config(algorithm: Algorithm) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        experiment: ExperimentKind::SynthClass,
        algorithm,
        seeds: vec![0, 1],
        eval_steps: vec![10],
        eval_episodes: 200,
        ..Default::default()
    };
    cfg.model.filters = 16;
    cfg.model.n_way = 5;
    cfg.meta.k_shot = 1;
    cfg.meta.query_size = 5;
    cfg.meta.tasks_per_batch = 4;
    cfg.meta.total_meta_steps = 2_000;
    cfg.meta.validate_every = 200;
    cfg.meta.val_episodes = 20;
    cfg.meta.kl_weight = Some(KL_WEIGHT);
    cfg
}

fn criterion6() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let acc = |alg: Algorithm| -> Vec<f64> {
        let cfg = classification_config(alg);
        cfg.seeds
            .iter()
            .map(|&s| {
                let o = run_seed(&cfg, s, &dir.path().join(format!("{}_{s}", alg.name()))).unwrap();
                *o.curve.last().unwrap()
            })
            .collect()
    };
    let m = acc(Algorithm::Maml);
    let b = acc(Algorithm::Bsmall);
    let (mm, bm) = (m.iter().sum::<f64>() / 2.0, b.iter().sum::<f64>() / 2.0);
    Outcome::new(
        mm >= 0.6 && bm >= 0.6 && bm >= mm - 0.03,
        format!("query accuracy maml {mm:.3} {m:.3?}, bsmall {bm:.3} {b:.3?}"),
    )
}

// ------------------------------------------------------------ criterion 7

/// Distributed and centralized final states for each network size.
fn criterion7_run() -> Vec<(usize, MetaState, MetaState)> {
    [1usize, 4, 8]
        .into_iter()
        .map(|v| {
            let graph = SensorGraph::complete_banded(v).unwrap();
            let cfg = MetaConfig {
                tasks_per_batch: v,
                kl_weight: Some(KL_WEIGHT),
                ..Default::default()
            };
            let learner = MetaLearner::new(sinusoid_mlp(true, 31), cfg).unwrap();
            let sim_cfg = SimulationConfig {
                seed: 31,
                rounds: 50,
                failures: Vec::new(),
                validate_every: 0,
            };
            let sim =
                run_simulation(&graph, &learner, learner.init_state(31), &sim_cfg, 10, 10).unwrap();
            let reference =
                centralized_reference(&graph, &learner, learner.init_state(31), 31, 50, 10, 10)
                    .unwrap();
            (v, sim.state, reference)
        })
        .collect()
}

fn criterion7(run: &[(usize, MetaState, MetaState)]) -> Outcome {
    let per: Vec<String> = run
        .iter()
        .map(|(v, a, b)| {
            format!(
                "V={v}: {}",
                if bits(a) == bits(b) {
                    "equal"
                } else {
                    "DIFFERENT"
                }
            )
        })
        .collect();
    let pass = run
        .iter()
        .all(|(_, a, b)| bits(a) == bits(b) && a.step == 50);
    Outcome::new(pass, format!("50 rounds, {}", per.join(", ")))
}

// ------------------------------------------------------------ criterion 8

fn kl_at(log_alpha: f64) -> f64 {
    // theta = 1 so log_alpha = log_sigma2
    let tape = Tape::new();
    let t = tape.param(&Tensor::scalar(1.0));
    let s = tape.param(&Tensor::scalar(log_alpha));
    kl_divergence(t, s).unwrap().item()
}

fn criterion8() -> Outcome {
    let grid: Vec<f64> = (0..=400).map(|i| -20.0 + 0.1 * i as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&a| kl_at(a)).collect();
    let monotone = values.windows(2).all(|w| w[1] <= w[0]);
    let limit = kl_at(1e3).abs();
    let clipped = kl_at(LOG_ALPHA_CLIP);
    // -KL at log α = 0: k1·σ(k2) − 0.5·ln 2 − k1
    let k = KL_CONSTANTS;
    let oracle = k.k1 / (1.0 + k.k2.exp()) + 0.5 * std::f64::consts::LN_2;
    let pinned = 0.43123895099030884;
    let at0 = kl_at(0.0);
    let pass =
        monotone && limit < 1e-6 && (at0 - oracle).abs() < 1e-12 && (at0 - pinned).abs() < 1e-12;
    Outcome::new(
        pass,
        format!(
            "monotone over [-20, 20]: {monotone}; KL(+inf) = {limit:.2e} (at clip {clipped:.2e}); KL(0) = {at0:.15} vs {oracle:.15}"
        ),
    )
}

// ------------------------------------------------------------ criterion 9

fn sinusoid_fingerprint(r: &SinusoidRuns) -> Vec<u64> {
    r.maml
        .iter()
        .chain(&r.bsmall)
        .flat_map(|o| {
            let mut v = bits(&o.state);
            v.extend(o.curve.iter().map(|x| x.to_bits()));
            v.extend(
                o.history
                    .iter()
                    .flat_map(|h| [h.train_loss.to_bits(), h.val_loss.unwrap_or(0.0).to_bits()]),
            );
            v
        })
        .collect()
}

// ------------------------------------------------------------------ main

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let selected = |n: u32| only.as_ref().is_none_or(|s| s.contains(&n));
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut timed = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "criterion {n} ({name}): {} | {} [{secs:.0}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o, secs));
    };

    if selected(1) {
        timed(1, "gradient correctness", &mut criterion1);
    }
    let mut c2 = None;
    if selected(2) || selected(9) {
        let run = criterion2_run();
        timed(2, "MAML reduction", &mut || criterion2(&run));
        c2 = Some(run);
    }
    let mut sin = None;
    if [3, 4, 5, 9].iter().any(|&n| selected(n)) {
        let t = Instant::now();
        let runs = sinusoid_runs();
        println!("sinusoid runs: {:.0}s", t.elapsed().as_secs_f64());
        timed(3, "sinusoid regression", &mut || criterion3(&runs));
        timed(4, "sparsity", &mut || criterion4(&runs));
        timed(5, "overfitting gap", &mut || criterion5(&runs));
        sin = Some(runs);
    }
    if selected(6) {
        timed(6, "few-shot classification", &mut criterion6);
    }
    let mut c7 = None;
    if selected(7) || selected(9) {
        let run = criterion7_run();
        timed(7, "sensor-network exactness", &mut || criterion7(&run));
        c7 = Some(run);
    }
    if selected(8) {
        timed(8, "KL approximation", &mut criterion8);
    }
    if selected(9) {
        timed(9, "determinism", &mut || {
            let a2 = c2.as_ref().unwrap();
            let b2 = criterion2_run();
            let same2 = a2.0 == b2.0 && a2.1 == b2.1;
            let same7 = c7
                .as_ref()
                .unwrap()
                .iter()
                .zip(criterion7_run())
                .all(|(a, b)| bits(&a.1) == bits(&b.1) && bits(&a.2) == bits(&b.2));
            let same3 = sinusoid_fingerprint(sin.as_ref().unwrap())
                == sinusoid_fingerprint(&sinusoid_runs());
            Outcome::new(
                same2 && same3 && same7,
                format!("bit-identical reruns: criterion 2 {same2}, criterion 3 {same3}, criterion 7 {same7}"),
            )
        });
    }

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failed {failed:?}")
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
