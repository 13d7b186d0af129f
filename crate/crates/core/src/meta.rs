//! MAML and B-SMALL meta-training.
//!
//! Both algorithms share one code path. The inner loop takes plain gradient
//! steps `φ' = φ − γ∇L(φ)` on an episode's support set, kept on the tape so
//! the outer loss on the query set can be differentiated through the
//! adaptation. The outer loop sums episode meta-gradients and applies one
//! optimizer step. B-SMALL differs only in the model (variational layers)
//! and in the loss, which adds `λ·KL` to the data term in both loops.

use serde::{Deserialize, Serialize};

use crate::autodiff::{mse, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{ForwardCtx, Mode, Model, ParamRole, DEFAULT_ETA};
use crate::par::{self, Execution};
use crate::rng::{purpose, stream, Stream};
use crate::sparsity::{measure_sparsity, SparsityReport};
pub use crate::tasks::TaskSource;
use crate::tasks::{Batch, FewShotLearner, TaskEpisode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Maml,
    Bsmall,
}

impl Algorithm {
    pub fn is_variational(self) -> bool {
        self == Algorithm::Bsmall
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Maml => "maml",
            Algorithm::Bsmall => "bsmall",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterOptimizer {
    Adam,
    Sgd,
}

/// How per-task meta-gradients are combined before the optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps_train: usize,
    pub inner_steps_eval: usize,
    pub tasks_per_batch: usize,
    /// Support examples per task (per class for classification).
    pub k_shot: usize,
    /// Query examples per task (per class for classification).
    pub query_size: usize,
    pub first_order: bool,
    /// KL weight λ; `None` means `1 / k_shot`.
    pub kl_weight: Option<f64>,
    pub kl_anneal_steps: usize,
    pub total_meta_steps: usize,
    pub optimizer: OuterOptimizer,
    /// Global-norm clip on the aggregated meta-gradient.
    pub clip_norm: Option<f64>,
    /// Whether `log_sigma2` takes inner-loop steps.
    pub inner_adapt_alpha: bool,
    /// Keep `log_sigma2` at its initial value in both loops.
    pub freeze_log_sigma2: bool,
    pub aggregation: Aggregation,
    pub eta: f64,
    pub validate_every: usize,
    pub val_episodes: usize,
    pub execution: Execution,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 0.01,
            outer_lr: 0.001,
            inner_steps_train: 1,
            inner_steps_eval: 10,
            tasks_per_batch: 25,
            k_shot: 10,
            query_size: 10,
            first_order: false,
            kl_weight: None,
            kl_anneal_steps: 1000,
            total_meta_steps: 10_000,
            optimizer: OuterOptimizer::Adam,
            clip_norm: Some(10.0),
            inner_adapt_alpha: true,
            freeze_log_sigma2: false,
            aggregation: Aggregation::Sum,
            eta: DEFAULT_ETA,
            validate_every: 100,
            val_episodes: 100,
            execution: Execution::Parallel,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.inner_lr.is_nan()
            || self.outer_lr.is_nan()
            || self.inner_lr < 0.0
            || self.outer_lr < 0.0
        {
            return fail("learning rates must be non-negative");
        }
        if self.inner_steps_train == 0 || self.inner_steps_eval == 0 {
            return fail("inner step counts must be at least 1");
        }
        if self.tasks_per_batch == 0 || self.k_shot == 0 || self.query_size == 0 {
            return fail("tasks_per_batch, k_shot and query_size must be positive");
        }
        if matches!(self.kl_weight, Some(w) if w.is_nan() || w < 0.0) {
            return fail("kl_weight must be non-negative");
        }
        if self.validate_every == 0 {
            return fail("validate_every must be positive");
        }
        Ok(())
    }

    pub fn kl_weight(&self) -> f64 {
        self.kl_weight.unwrap_or(1.0 / self.k_shot as f64)
    }

    /// `λ · min(1, step / kl_anneal_steps)`.
    pub fn lambda_at(&self, step: usize) -> f64 {
        let ramp = if self.kl_anneal_steps == 0 {
            1.0
        } else {
            (step as f64 / self.kl_anneal_steps as f64).min(1.0)
        };
        self.kl_weight() * ramp
    }
}

/// Meta-parameters and outer-optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    pub params: Vec<Tensor>,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub step: usize,
    pub seed: u64,
}

impl MetaState {
    pub fn new(params: Vec<Tensor>, seed: u64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        MetaState {
            params,
            adam_m: zeros.clone(),
            adam_v: zeros,
            step: 0,
            seed,
        }
    }

    pub fn param_norm(&self) -> f64 {
        norm(self.params.iter().flat_map(|p| p.data().iter()))
    }
}

fn norm<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    values.map(|v| v * v).sum::<f64>().sqrt()
}

/// Task loss split into the data term and the full objective.
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub data: Var<'t>,
}

/// Per-episode result of adaptation plus query evaluation.
#[derive(Clone, Debug)]
pub struct EpisodeGradient {
    /// Meta-gradient with respect to each meta-parameter tensor.
    pub grads: Vec<Vec<f64>>,
    pub loss: f64,
    pub data_loss: f64,
    /// MSE for regression, accuracy for classification.
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub data_loss: f64,
    pub metric: f64,
    pub grad_norm: f64,
    pub lambda_effective: f64,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean post-adaptation query data loss over the meta-batch.
    pub train_loss: f64,
    /// Same, including the KL term.
    pub train_objective: f64,
    pub val_loss: Option<f64>,
    pub val_mse_or_acc: Option<f64>,
    pub sparsity: Option<f64>,
    pub lambda_effective: f64,
}

/// Mean absolute difference between validation and training loss over the
/// last `fraction` of the history. `None` when the window holds no
/// validation record.
pub fn overfitting_gap(history: &[MetricsRecord], fraction: f64) -> Option<f64> {
    if history.is_empty() {
        return None;
    }
    let n = ((history.len() as f64 * fraction).ceil() as usize).clamp(1, history.len());
    let window = &history[history.len() - n..];
    let train = window.iter().map(|r| r.train_loss).sum::<f64>() / n as f64;
    let val: Vec<f64> = window.iter().filter_map(|r| r.val_loss).collect();
    if val.is_empty() {
        return None;
    }
    let val = val.iter().sum::<f64>() / val.len() as f64;
    Some((val - train).abs())
}

/// A model architecture plus the meta-learning configuration.
#[derive(Clone, Debug)]
pub struct MetaLearner {
    pub model: Model,
    pub config: MetaConfig,
    inner_mask: Vec<bool>,
    outer_mask: Vec<bool>,
}

impl MetaLearner {
    pub fn new(model: Model, config: MetaConfig) -> Result<Self> {
        config.validate()?;
        let is_ls2 = |r: ParamRole| r == ParamRole::LogSigma2;
        let inner_mask = model
            .param_info()
            .iter()
            .map(|i| !is_ls2(i.role) || (config.inner_adapt_alpha && !config.freeze_log_sigma2))
            .collect();
        let outer_mask = model
            .param_info()
            .iter()
            .map(|i| !is_ls2(i.role) || !config.freeze_log_sigma2)
            .collect();
        Ok(MetaLearner {
            model,
            config,
            inner_mask,
            outer_mask,
        })
    }

    pub fn init_state(&self, seed: u64) -> MetaState {
        MetaState::new(self.model.params().to_vec(), seed)
    }

    fn ctx<'r>(&self, mode: Mode, rng: &'r mut Stream) -> ForwardCtx<'r> {
        ForwardCtx {
            mode,
            eta: self.config.eta,
            rng: Some(rng),
        }
    }

    /// Data loss (MSE or softmax cross-entropy, batch means) plus
    /// `lambda · KL` for variational models.
    pub fn task_loss<'t>(
        &self,
        params: &[Var<'t>],
        batch: &Batch,
        lambda: f64,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<LossTerms<'t>> {
        Ok(self.loss_and_output(params, batch, lambda, ctx)?.0)
    }

    fn loss_and_output<'t>(
        &self,
        params: &[Var<'t>],
        batch: &Batch,
        lambda: f64,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(LossTerms<'t>, Var<'t>)> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let tape = params
            .first()
            .ok_or_else(|| Error::InvalidSpec("model has no parameters".into()))?
            .tape();
        let out = self
            .model
            .forward(params, tape.constant(batch.inputs()), ctx)?;
        let data = match batch {
            Batch::Regression { y, .. } => mse(out, tape.constant(y))?,
            Batch::Classification { labels, .. } => out.softmax_cross_entropy(labels)?,
        };
        let total = match self.model.kl(params)? {
            Some(kl) if lambda != 0.0 => data.add(kl.scale(lambda))?,
            _ => data,
        };
        if !total.item().is_finite() {
            let param_norm = norm(
                params
                    .iter()
                    .flat_map(|p| p.value().to_vec())
                    .collect::<Vec<_>>()
                    .iter(),
            );
            return Err(Error::NonFiniteLoss {
                loss: total.item(),
                param_norm,
            });
        }
        Ok((LossTerms { total, data }, out))
    }

    /// `steps` plain gradient steps on `support`, starting from `params`.
    /// The inputs are left untouched; unless `first_order` is set the result
    /// stays differentiable with respect to them.
    pub fn inner_adapt<'t>(
        &self,
        params: &[Var<'t>],
        support: &Batch,
        steps: usize,
        lambda: f64,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Vec<Var<'t>>> {
        let Some(first) = params.first() else {
            return Ok(Vec::new());
        };
        let tape = first.tape();
        let create_graph = !self.config.first_order;
        let mut current = params.to_vec();
        for _ in 0..steps {
            let loss = self.task_loss(&current, support, lambda, ctx)?.total;
            let targets: Vec<Var<'t>> = current
                .iter()
                .zip(&self.inner_mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .collect();
            let grads = tape.grad(loss, &targets, create_graph)?;
            if grads
                .iter()
                .any(|g| g.value().iter().any(|v| !v.is_finite()))
            {
                return Err(Error::NonFiniteGradient("inner_adapt"));
            }
            let mut grads = grads.into_iter();
            for (p, &m) in current.iter_mut().zip(&self.inner_mask) {
                if m {
                    let g = grads.next().expect("one gradient per target");
                    *p = p.sub(g.scale(self.config.inner_lr))?;
                }
            }
        }
        Ok(current)
    }

    /// Adapt on the support set, score on the query set, and differentiate
    /// the query objective with respect to the meta-parameters.
    pub fn episode_gradient(
        &self,
        params: &[Tensor],
        episode: &TaskEpisode,
        lambda: f64,
        noise: &mut Stream,
    ) -> Result<EpisodeGradient> {
        let tape = Tape::new();
        let leaves: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let mut ctx = self.ctx(Mode::Train, noise);
        let adapted = self.inner_adapt(
            &leaves,
            &episode.support,
            self.config.inner_steps_train,
            lambda,
            &mut ctx,
        )?;
        let (terms, metric) = self.query_terms(&adapted, &episode.query, lambda, &mut ctx)?;
        let grads = tape.grad(terms.total, &leaves, false)?;
        let grads: Vec<Vec<f64>> = grads.iter().map(|g| g.value().to_vec()).collect();
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient("meta-gradient"));
        }
        Ok(EpisodeGradient {
            grads,
            loss: terms.total.item(),
            data_loss: terms.data.item(),
            metric,
        })
    }

    fn query_terms<'t>(
        &self,
        params: &[Var<'t>],
        query: &Batch,
        lambda: f64,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(LossTerms<'t>, f64)> {
        let (terms, out) = self.loss_and_output(params, query, lambda, ctx)?;
        let metric = match query {
            Batch::Regression { .. } => terms.data.item(),
            Batch::Classification { .. } => accuracy(&out.to_tensor(), query),
        };
        Ok((terms, metric))
    }

    /// Noise stream for meta-batch slot `slot` at `step`.
    pub fn noise_stream(&self, seed: u64, step: usize, slot: usize) -> Stream {
        stream(seed, &[purpose::NOISE, step as u64, slot as u64])
    }

    /// Per-episode meta-gradients for one outer step, in slot order.
    pub fn batch_gradients(
        &self,
        state: &MetaState,
        episodes: &[TaskEpisode],
    ) -> Result<Vec<EpisodeGradient>> {
        let lambda = self.config.lambda_at(state.step);
        par::try_map(episodes.len(), self.config.execution, |slot| {
            let mut noise = self.noise_stream(state.seed, state.step, slot);
            self.episode_gradient(&state.params, &episodes[slot], lambda, &mut noise)
        })
    }

    /// Combine per-episode gradients (in the given order) and step the optimizer.
    pub fn apply_gradients(
        &self,
        state: &mut MetaState,
        contributions: &[EpisodeGradient],
    ) -> Result<StepReport> {
        if contributions.is_empty() {
            return Err(Error::InvalidConfig(
                "outer step needs at least one episode".into(),
            ));
        }
        let n = contributions.len() as f64;
        let mut total: Vec<Vec<f64>> = state.params.iter().map(|p| vec![0.0; p.numel()]).collect();
        for c in contributions {
            for (acc, g) in total.iter_mut().zip(&c.grads) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        if self.config.aggregation == Aggregation::Mean {
            total.iter_mut().flatten().for_each(|v| *v /= n);
        }
        for (g, &m) in total.iter_mut().zip(&self.outer_mask) {
            if !m {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let grad_norm = norm(total.iter().flatten());
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteGradient("meta-gradient"));
        }
        if let Some(clip) = self.config.clip_norm {
            if grad_norm > clip {
                let s = clip / grad_norm;
                total.iter_mut().flatten().for_each(|v| *v *= s);
            }
        }
        let lambda = self.config.lambda_at(state.step);
        self.optimizer_step(state, &total);
        let report = StepReport {
            step: state.step,
            loss: contributions.iter().map(|c| c.loss).sum::<f64>() / n,
            data_loss: contributions.iter().map(|c| c.data_loss).sum::<f64>() / n,
            metric: contributions.iter().map(|c| c.metric).sum::<f64>() / n,
            grad_norm,
            lambda_effective: lambda,
        };
        state.step += 1;
        if state.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteLoss {
                loss: report.loss,
                param_norm: state.param_norm(),
            });
        }
        Ok(report)
    }

    fn optimizer_step(&self, state: &mut MetaState, grads: &[Vec<f64>]) {
        let lr = self.config.outer_lr;
        match self.config.optimizer {
            OuterOptimizer::Sgd => {
                for (p, g) in state.params.iter_mut().zip(grads) {
                    p.data_mut()
                        .iter_mut()
                        .zip(g)
                        .for_each(|(w, d)| *w -= lr * d);
                }
            }
            OuterOptimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let t = (state.step + 1) as i32;
                let c1 = 1.0 - B1.powi(t);
                let c2 = 1.0 - B2.powi(t);
                for (i, g) in grads.iter().enumerate() {
                    if !self.outer_mask[i] {
                        continue;
                    }
                    let (m, v) = (&mut state.adam_m[i], &mut state.adam_v[i]);
                    let p = state.params[i].data_mut();
                    for j in 0..g.len() {
                        m[j] = B1 * m[j] + (1.0 - B1) * g[j];
                        v[j] = B2 * v[j] + (1.0 - B2) * g[j] * g[j];
                        p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }

    /// One meta-update over `episodes`:
    /// `φ ← φ − β ∇φ Σ_i L_i(φ'_i)` with `φ'_i` the support-adapted parameters.
    pub fn outer_step(
        &self,
        state: &mut MetaState,
        episodes: &[TaskEpisode],
    ) -> Result<StepReport> {
        if episodes.is_empty() {
            return Err(Error::InvalidConfig(
                "outer step needs at least one episode".into(),
            ));
        }
        let contributions = self.batch_gradients(state, episodes)?;
        self.apply_gradients(state, &contributions)
    }

    /// Mean post-adaptation query (data loss, metric) over the validation
    /// episodes, using the training protocol.
    pub fn validate(&self, state: &MetaState, source: &dyn TaskSource) -> Result<(f64, f64)> {
        let lambda = self.config.lambda_at(state.step);
        let n = self.config.val_episodes;
        let results = par::try_map(n, self.config.execution, |i| {
            let episode = source.val_episode(i)?;
            let mut noise = stream(
                state.seed,
                &[purpose::VAL_EPISODES, state.step as u64, i as u64],
            );
            let tape = Tape::new();
            let leaves: Vec<Var> = state.params.iter().map(|p| tape.param(p)).collect();
            let mut ctx = self.ctx(Mode::Train, &mut noise);
            let adapted = self.inner_adapt(
                &leaves,
                &episode.support,
                self.config.inner_steps_train,
                lambda,
                &mut ctx,
            )?;
            let detached: Vec<Var> = adapted.iter().map(|p| p.detach()).collect();
            let (terms, metric) = self.query_terms(&detached, &episode.query, lambda, &mut ctx)?;
            Ok((terms.data.item(), metric))
        })?;
        let k = n.max(1) as f64;
        Ok((
            results.iter().map(|r| r.0).sum::<f64>() / k,
            results.iter().map(|r| r.1).sum::<f64>() / k,
        ))
    }

    /// Run outer steps until `total_meta_steps`, validating every
    /// `validate_every` steps and at the last step. `observer` sees every
    /// record as it is produced.
    pub fn meta_train(
        &self,
        mut state: MetaState,
        source: &dyn TaskSource,
        observer: &mut dyn FnMut(&MetricsRecord, &MetaState) -> Result<()>,
    ) -> Result<(MetaState, Vec<MetricsRecord>)> {
        let mut history = Vec::new();
        let total = self.config.total_meta_steps;
        while state.step < total {
            let step = state.step;
            let wrap = |e: Error| Error::Step {
                step,
                source: Box::new(e),
            };
            let episodes = (0..self.config.tasks_per_batch)
                .map(|slot| source.train_episode(step, slot))
                .collect::<Result<Vec<_>>>()
                .map_err(wrap)?;
            let report = self.outer_step(&mut state, &episodes).map_err(wrap)?;
            let mut record = MetricsRecord {
                step,
                train_loss: report.data_loss,
                train_objective: report.loss,
                val_loss: None,
                val_mse_or_acc: None,
                sparsity: None,
                lambda_effective: report.lambda_effective,
            };
            if (step + 1).is_multiple_of(self.config.validate_every) || step + 1 == total {
                let (loss, metric) = self.validate(&state, source).map_err(wrap)?;
                record.val_loss = Some(loss);
                record.val_mse_or_acc = Some(metric);
                record.sparsity = self.sparsity(&state).map(|r| r.global_ratio);
            }
            observer(&record, &state)?;
            history.push(record);
        }
        Ok((state, history))
    }

    pub fn sparsity(&self, state: &MetaState) -> Option<SparsityReport> {
        let model = self.model.with_params(state.params.clone()).ok()?;
        measure_sparsity(&model, self.config.eta).ok()
    }

    /// Adapter that evaluates `params` on held-out episodes: adapt for the
    /// requested step counts, then report the query metric after each.
    pub fn evaluator<'a>(
        &'a self,
        params: &'a [Tensor],
        lambda: f64,
        mode: Mode,
        seed: u64,
    ) -> Evaluator<'a> {
        Evaluator {
            learner: self,
            params,
            lambda,
            mode,
            seed,
        }
    }

    /// One detached gradient step, for evaluation-time adaptation.
    fn sgd_step(
        &self,
        params: &[Tensor],
        support: &Batch,
        lambda: f64,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let leaves: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = self.task_loss(&leaves, support, lambda, ctx)?.total;
        let grads = tape.grad(loss, &leaves, false)?;
        let mut out = Vec::with_capacity(params.len());
        for ((p, g), &m) in params.iter().zip(&grads).zip(&self.inner_mask) {
            let mut next = p.clone();
            if m {
                let g = g.value();
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient("evaluation adaptation"));
                }
                next.data_mut()
                    .iter_mut()
                    .zip(g.iter())
                    .for_each(|(w, d)| *w -= self.config.inner_lr * d);
            }
            out.push(next);
        }
        Ok(out)
    }

    fn query_metric(
        &self,
        params: &[Tensor],
        query: &Batch,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p)).collect();
        let out = self
            .model
            .forward(&vars, tape.constant(query.inputs()), ctx)?;
        Ok(match query {
            Batch::Regression { y, .. } => mse(out, tape.constant(y))?.item(),
            Batch::Classification { .. } => accuracy(&out.to_tensor(), query),
        })
    }
}

/// Fraction of rows whose arg-max logit matches the label.
pub fn accuracy(logits: &Tensor, batch: &Batch) -> f64 {
    let Batch::Classification { labels, .. } = batch else {
        return f64::NAN;
    };
    let cols = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(cols)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = (0..cols)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap_or(0);
            best == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

pub struct Evaluator<'a> {
    learner: &'a MetaLearner,
    params: &'a [Tensor],
    lambda: f64,
    mode: Mode,
    seed: u64,
}

impl FewShotLearner for Evaluator<'_> {
    fn adapt_and_score(
        &self,
        episode: &TaskEpisode,
        steps: &[usize],
        index: usize,
    ) -> Result<Vec<f64>> {
        let mut noise = stream(self.seed, &[purpose::TEST_EPISODES, index as u64]);
        let max = steps.iter().copied().max().unwrap_or(0);
        let mut params = self.params.to_vec();
        let mut at_step = vec![f64::NAN; max + 1];
        let wanted = |s: usize| steps.contains(&s);
        for s in 0..=max {
            if wanted(s) {
                let mut ctx = self.learner.ctx(self.mode, &mut noise);
                at_step[s] = self
                    .learner
                    .query_metric(&params, &episode.query, &mut ctx)?;
            }
            if s < max {
                let mut ctx = self.learner.ctx(self.mode, &mut noise);
                params = self
                    .learner
                    .sgd_step(&params, &episode.support, self.lambda, &mut ctx)?;
            }
        }
        Ok(steps.iter().map(|&s| at_step[s]).collect())
    }
}
