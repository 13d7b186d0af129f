//! Training, evaluation and artifact writing for one configured experiment.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use bsmall::autodiff::Tensor;
use bsmall::layers::checkpoint::Checkpoint;
use bsmall::layers::{Mode, Model};
use bsmall::meta::{overfitting_gap, Algorithm, MetaLearner, MetaState, MetricsRecord, TaskSource};
use bsmall::models;
use bsmall::par;
use bsmall::sensornet::{self, SensorGraph, SimulationConfig};
use bsmall::sparsity::{measure_sparsity, SparsityReport};
use bsmall::tasks::{
    evaluate_episodes, ClassificationSource, QueryLayout, SinusoidSource, TaskEpisode,
};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::report::{summarize, Report, Row, SensornetReport};

/// Fraction of the training history used for the overfitting gap.
pub const GAP_WINDOW: f64 = 0.1;

/// One line of the merged metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamRecord {
    Train {
        seed: u64,
        #[serde(flatten)]
        record: MetricsRecord,
    },
    Eval {
        seed: u64,
        steps: usize,
        value: f64,
    },
    Sparsity {
        seed: u64,
        report: SparsityReport,
    },
    Gap {
        seed: u64,
        value: f64,
    },
}

/// Everything a single seed produced.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub state: MetaState,
    pub history: Vec<MetricsRecord>,
    /// Query metric after `0..=max(eval_steps)` adaptation steps.
    pub curve: Vec<f64>,
    pub sparsity: Option<SparsityReport>,
    pub gap: Option<f64>,
}

fn metric_name(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::SynthClass => "accuracy",
        _ => "mse",
    }
}

fn build_learner(cfg: &ExperimentConfig, seed: u64) -> Result<MetaLearner> {
    let extent = cfg.classification.extent;
    let model = models::build(&cfg.model_config(), extent, seed)?;
    Ok(MetaLearner::new(model, cfg.meta.clone())?)
}

fn sinusoid_source(cfg: &ExperimentConfig, seed: u64) -> Result<SinusoidSource> {
    let src = SinusoidSource::new(seed, cfg.meta.k_shot, cfg.meta.query_size);
    Ok(if cfg.task_pool > 0 {
        src.with_task_pool(cfg.task_pool)?
    } else {
        src
    })
}

fn classification_source(cfg: &ExperimentConfig, seed: u64) -> ClassificationSource {
    ClassificationSource {
        seed,
        n_way: cfg.model.n_way,
        k: cfg.meta.k_shot,
        q: cfg.meta.query_size,
        config: cfg.classification,
    }
}

/// Held-out episodes for the final evaluation of `seed`.
pub fn test_episodes(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<TaskEpisode>> {
    Ok(match cfg.experiment {
        ExperimentKind::SynthClass => {
            classification_source(cfg, seed).test_episodes(cfg.eval_episodes, cfg.meta.k_shot)?
        }
        _ => {
            let mut source = sinusoid_source(cfg, seed)?;
            if cfg.eval_query == QueryLayout::Random {
                source.q = cfg.eval_query_points;
            }
            source.test_episodes(cfg.eval_episodes, cfg.meta.k_shot, cfg.eval_query)?
        }
    })
}

/// Mean query metric after `0..=max_steps` adaptation steps, eval mode.
pub fn evaluate_curve(
    cfg: &ExperimentConfig,
    learner: &MetaLearner,
    params: &[Tensor],
    seed: u64,
) -> Result<Vec<f64>> {
    let max = cfg.eval_steps.iter().copied().max().unwrap_or(0);
    let steps: Vec<usize> = (0..=max).collect();
    let episodes = test_episodes(cfg, seed)?;
    let lambda = cfg.meta.lambda_at(usize::MAX);
    let evaluator = learner.evaluator(params, lambda, Mode::Eval, seed);
    let scores = evaluate_episodes(&evaluator, &episodes, &steps, cfg.meta.execution)?;
    let n = scores.len() as f64;
    Ok(steps
        .iter()
        .map(|&s| scores.iter().map(|r| r[s]).sum::<f64>() / n)
        .collect())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn save_checkpoint(model: &Model, params: &[Tensor], path: &Path) -> Result<()> {
    let model = model.with_params(params.to_vec())?;
    Checkpoint::from_model(&model).save(path)?;
    Ok(())
}

/// Train and evaluate one seed, streaming its metrics to `dir`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedOutcome> {
    fs::create_dir_all(dir)?;
    let learner = build_learner(cfg, seed)?;
    let source: Box<dyn TaskSource> = match cfg.experiment {
        ExperimentKind::SynthClass => Box::new(classification_source(cfg, seed)),
        _ => Box::new(sinusoid_source(cfg, seed)?),
    };
    let mut stream = BufWriter::new(File::create(dir.join("metrics.ndjson"))?);
    let checkpoint_every = cfg.checkpoint_every;
    let mut observer = |record: &MetricsRecord, state: &MetaState| -> bsmall::Result<()> {
        serde_json::to_writer(&mut stream, record)?;
        stream.write_all(b"\n")?;
        if checkpoint_every > 0 && (record.step + 1).is_multiple_of(checkpoint_every) {
            stream.flush()?;
            let path = dir.join(format!("checkpoint_{:06}.json", record.step + 1));
            let model = learner.model.with_params(state.params.clone())?;
            Checkpoint::from_model(&model).save(&path)?;
        }
        Ok(())
    };
    let trained = learner.meta_train(learner.init_state(seed), source.as_ref(), &mut observer);
    stream.flush()?;
    let (state, history) = trained.with_context(|| format!("seed {seed}"))?;
    save_checkpoint(&learner.model, &state.params, &dir.join("final.json"))?;

    let curve = evaluate_curve(cfg, &learner, &state.params, seed)?;
    let sparsity = if cfg.algorithm.is_variational() {
        let model = learner.model.with_params(state.params.clone())?;
        Some(measure_sparsity(&model, cfg.meta.eta)?)
    } else {
        None
    };
    let gap = overfitting_gap(&history, GAP_WINDOW);
    Ok(SeedOutcome {
        seed,
        state,
        history,
        curve,
        sparsity,
        gap,
    })
}

/// Train every seed, then write the merged stream, table, sparsity report
/// and figure data under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Report> {
    if cfg.experiment == ExperimentKind::Sensornet {
        bail!("sensornet experiments are run through `simulate`");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), cfg)?;
    let outcomes = par::try_map(cfg.seeds.len(), cfg.meta.execution, |i| {
        let seed = cfg.seeds[i];
        run_seed(cfg, seed, &out.join(format!("seed_{seed}")))
            .map_err(|e| bsmall::Error::Parse(format!("{e:#}")))
    })
    .map_err(|e| anyhow::anyhow!("{e}").context("training failed; per-seed artifacts kept"))?;
    write_artifacts(cfg, &outcomes, out)
}

/// Serialize the merged records and derive every table cell from them.
pub fn write_artifacts(
    cfg: &ExperimentConfig,
    outcomes: &[SeedOutcome],
    out: &Path,
) -> Result<Report> {
    let mut records = Vec::new();
    for o in outcomes {
        for r in &o.history {
            records.push(StreamRecord::Train {
                seed: o.seed,
                record: r.clone(),
            });
        }
        for (steps, &value) in o.curve.iter().enumerate() {
            records.push(StreamRecord::Eval {
                seed: o.seed,
                steps,
                value,
            });
        }
        if let Some(report) = &o.sparsity {
            records.push(StreamRecord::Sparsity {
                seed: o.seed,
                report: report.clone(),
            });
        }
        if let Some(value) = o.gap {
            records.push(StreamRecord::Gap {
                seed: o.seed,
                value,
            });
        }
    }
    let mut stream = BufWriter::new(File::create(out.join("metrics.ndjson"))?);
    for r in &records {
        serde_json::to_writer(&mut stream, r)?;
        stream.write_all(b"\n")?;
    }
    stream.flush()?;

    let report = report_from_records(cfg, &records);
    write_table(&report, &out.join("table.csv"))?;
    if let Some(sp) = &report.sparsity {
        let per_seed: Vec<&SparsityReport> = outcomes
            .iter()
            .filter_map(|o| o.sparsity.as_ref())
            .collect();
        write_json(
            &out.join("sparsity.json"),
            &serde_json::json!({ "eta": cfg.meta.eta, "summary": sp, "per_seed": per_seed }),
        )?;
    }
    write_figures(&records, &report, out)?;
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Aggregate the stream records into the reported table.
pub fn report_from_records(cfg: &ExperimentConfig, records: &[StreamRecord]) -> Report {
    let curve_len = cfg.eval_steps.iter().copied().max().unwrap_or(0) + 1;
    let mut by_step = vec![Vec::new(); curve_len];
    let mut sparsity = Vec::new();
    let mut gaps = Vec::new();
    for r in records {
        match r {
            StreamRecord::Eval { steps, value, .. } if *steps < curve_len => {
                by_step[*steps].push(*value)
            }
            StreamRecord::Sparsity { report, .. } => sparsity.push(report.global_ratio),
            StreamRecord::Gap { value, .. } => gaps.push(*value),
            _ => {}
        }
    }
    let rows = by_step
        .iter()
        .enumerate()
        .map(|(steps, values)| Row {
            steps,
            summary: summarize(values),
        })
        .collect();
    Report {
        experiment: cfg.experiment,
        algorithm: cfg.algorithm,
        metric: metric_name(cfg.experiment).to_string(),
        k_shot: cfg.meta.k_shot,
        seeds: cfg.seeds.clone(),
        table_steps: cfg.eval_steps.clone(),
        rows,
        sparsity: (!sparsity.is_empty()).then(|| summarize(&sparsity)),
        overfit_gap: (!gaps.is_empty()).then(|| summarize(&gaps)),
    }
}

fn write_table(report: &Report, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "algorithm,metric,k_shot,steps,mean,ci95,n_seeds,values")?;
    for row in report.table_rows() {
        let values: Vec<String> = row.summary.values.iter().map(|v| v.to_string()).collect();
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            report.algorithm.name(),
            report.metric,
            report.k_shot,
            row.steps,
            row.summary.mean,
            row.summary.ci95,
            row.summary.values.len(),
            values.join(";")
        )?;
    }
    f.flush()?;
    Ok(())
}

fn write_figures(records: &[StreamRecord], report: &Report, out: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(out.join("figure_adaptation.csv"))?);
    writeln!(f, "steps,mean,ci95")?;
    for row in &report.rows {
        writeln!(f, "{},{},{}", row.steps, row.summary.mean, row.summary.ci95)?;
    }
    f.flush()?;

    let mut f = BufWriter::new(File::create(out.join("figure_losses.csv"))?);
    writeln!(f, "seed,step,train_loss,val_loss")?;
    for r in records {
        if let StreamRecord::Train { seed, record } = r {
            let val = record.val_loss.map(|v| v.to_string()).unwrap_or_default();
            writeln!(f, "{seed},{},{},{val}", record.step, record.train_loss)?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Evaluate a saved checkpoint with the configured protocol.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Report> {
    let model = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?
        .into_model()?;
    let algorithm = if model.is_variational() {
        Algorithm::Bsmall
    } else {
        Algorithm::Maml
    };
    let cfg = ExperimentConfig {
        algorithm,
        ..cfg.clone()
    };
    let learner = MetaLearner::new(model.clone(), cfg.meta.clone())?;
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let curve = evaluate_curve(&cfg, &learner, model.params(), seed)?;
        records.extend(
            curve
                .iter()
                .enumerate()
                .map(|(steps, &value)| StreamRecord::Eval { seed, steps, value }),
        );
        if model.is_variational() {
            records.push(StreamRecord::Sparsity {
                seed,
                report: measure_sparsity(&model, cfg.meta.eta)?,
            });
        }
    }
    Ok(report_from_records(&cfg, &records))
}

/// Result of a sensor-network run.
pub struct SimulationOutcome {
    pub report: SensornetReport,
    pub dir: PathBuf,
}

/// Run the sensor-network simulation for every seed; optionally compare
/// against centralized training.
pub fn run_simulation(cfg: &ExperimentConfig, out: &Path) -> Result<SimulationOutcome> {
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let graph = match &cfg.sensornet.graph {
        Some(path) => {
            SensorGraph::load(path).with_context(|| format!("graph file {}", path.display()))?
        }
        None => SensorGraph::complete_banded(cfg.sensornet.nodes)?,
    };
    fs::write(out.join("graph.txt"), graph.to_text())?;
    let mut seeds = Vec::new();
    let mut traces = BufWriter::new(File::create(out.join("traces.ndjson"))?);
    let mut metrics = BufWriter::new(File::create(out.join("metrics.ndjson"))?);
    for &seed in &cfg.seeds {
        let mut meta = cfg.meta.clone();
        meta.tasks_per_batch = graph.len();
        let model = models::build(&cfg.model_config(), cfg.classification.extent, seed)?;
        let learner = MetaLearner::new(model, meta)?;
        let sim_cfg = SimulationConfig {
            seed,
            rounds: cfg.sensornet.rounds,
            failures: cfg.sensornet.failures.clone(),
            validate_every: cfg.sensornet.validate_every,
        };
        let (k, q) = (cfg.meta.k_shot, cfg.meta.query_size);
        let sim =
            sensornet::run_simulation(&graph, &learner, learner.init_state(seed), &sim_cfg, k, q)?;
        for t in &sim.traces {
            serde_json::to_writer(
                &mut traces,
                &serde_json::json!({ "seed": seed, "trace": t }),
            )?;
            traces.write_all(b"\n")?;
        }
        for m in &sim.metrics {
            serde_json::to_writer(
                &mut metrics,
                &serde_json::json!({ "seed": seed, "round": m }),
            )?;
            metrics.write_all(b"\n")?;
        }
        let oracle_match = if cfg.sensornet.oracle_check {
            let reference = sensornet::centralized_reference(
                &graph,
                &learner,
                learner.init_state(seed),
                seed,
                cfg.sensornet.rounds,
                k,
                q,
            )?;
            Some(reference == sim.state)
        } else {
            None
        };
        seeds.push(crate::report::SimulationSeed {
            seed,
            total_bytes: sim.total_bytes(),
            pruned_broadcast_bytes: sim.traces.iter().map(|t| t.pruned_broadcast_bytes).sum(),
            final_node_val_loss: sim.metrics.last().map(|m| m.node_val_loss.clone()),
            oracle_match,
        });
    }
    traces.flush()?;
    metrics.flush()?;
    let report = SensornetReport {
        algorithm: cfg.algorithm,
        nodes: graph.len(),
        rounds: cfg.sensornet.rounds,
        seeds,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(SimulationOutcome {
        report,
        dir: out.to_path_buf(),
    })
}
