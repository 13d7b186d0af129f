//! Task distributions and episode sampling.
//!
//! Regression tasks are sinusoids `y = A·sin(x + phase)`; classification
//! tasks are synthetic N-way problems over smooth random 16x16 patterns.
//! Samplers are pure functions of `(seed, index)`.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng::{purpose, stream, Stream};

pub const AMPLITUDE_RANGE: (f64, f64) = (0.1, 5.0);
pub const PHASE_RANGE: (f64, f64) = (0.0, PI);
pub const INPUT_RANGE: (f64, f64) = (-5.0, 5.0);
/// Size of the dense evaluation grid over [`INPUT_RANGE`].
pub const EVAL_GRID_POINTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinusoidTask {
    pub amplitude: f64,
    pub phase: f64,
}

impl SinusoidTask {
    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).sin()
    }
}

/// Sinusoid task distribution; amplitude range is adjustable so sensor
/// nodes can each own a band.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinusoidDistribution {
    pub amplitude: (f64, f64),
    pub phase: (f64, f64),
}

impl Default for SinusoidDistribution {
    fn default() -> Self {
        SinusoidDistribution {
            amplitude: AMPLITUDE_RANGE,
            phase: PHASE_RANGE,
        }
    }
}

impl SinusoidDistribution {
    pub fn band(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi || lo < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "bad amplitude band [{lo}, {hi}]"
            )));
        }
        Ok(SinusoidDistribution {
            amplitude: (lo, hi),
            phase: PHASE_RANGE,
        })
    }

    /// `n` contiguous equal-width bands covering [`AMPLITUDE_RANGE`].
    pub fn partition(n: usize) -> Vec<SinusoidDistribution> {
        let (lo, hi) = AMPLITUDE_RANGE;
        let w = (hi - lo) / n as f64;
        (0..n)
            .map(|i| SinusoidDistribution {
                amplitude: (
                    lo + w * i as f64,
                    if i + 1 == n {
                        hi
                    } else {
                        lo + w * (i + 1) as f64
                    },
                ),
                phase: PHASE_RANGE,
            })
            .collect()
    }

    pub fn sample_task(&self, rng: &mut Stream) -> SinusoidTask {
        let uniform = |rng: &mut Stream, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        SinusoidTask {
            amplitude: uniform(rng, self.amplitude),
            phase: uniform(rng, self.phase),
        }
    }
}

/// Inputs and targets of one support or query set.
#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    /// `x` and `y` shaped `[n, 1]`.
    Regression { x: Tensor, y: Tensor },
    /// `x` shaped `[n, channels, h, w]`, labels in `[0, n_way)`.
    Classification { x: Tensor, labels: Vec<usize> },
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Regression { x, .. } | Batch::Classification { x, .. } => x.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Tensor {
        match self {
            Batch::Regression { x, .. } | Batch::Classification { x, .. } => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskMeta {
    Sinusoid(SinusoidTask),
    Classification {
        n_way: usize,
        /// Noise-free class patterns, in episode label order.
        prototypes: Vec<Vec<f64>>,
        /// Query inputs before per-image normalization.
        raw_query: Vec<Vec<f64>>,
        noise: f64,
    },
}

/// One task with disjoint support (adaptation) and query (evaluation) sets.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEpisode {
    pub support: Batch,
    pub query: Batch,
    pub meta: TaskMeta,
}

fn regression_batch(task: &SinusoidTask, xs: Vec<f64>) -> Batch {
    let ys = xs.iter().map(|&x| task.eval(x)).collect();
    let n = xs.len();
    Batch::Regression {
        x: Tensor::new(vec![n, 1], xs).expect("n x 1"),
        y: Tensor::new(vec![n, 1], ys).expect("n x 1"),
    }
}

/// Draw `n` inputs uniformly from [`INPUT_RANGE`], none equal to any in `avoid`.
fn draw_inputs(rng: &mut Stream, n: usize, avoid: &[f64]) -> Vec<f64> {
    let (lo, hi) = INPUT_RANGE;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x = rng.random_range(lo..hi);
        if !avoid.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// How the query set of an evaluation episode is built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryLayout {
    /// `q` uniform random inputs.
    #[default]
    Random,
    /// [`EVAL_GRID_POINTS`] evenly spaced inputs over [`INPUT_RANGE`].
    Grid,
}

pub fn sample_sinusoid_episode_from(
    dist: &SinusoidDistribution,
    rng: &mut Stream,
    k: usize,
    q: usize,
    layout: QueryLayout,
) -> Result<TaskEpisode> {
    if k == 0 || q == 0 {
        return Err(Error::InvalidConfig(
            "support and query sizes must be positive".into(),
        ));
    }
    let task = dist.sample_task(rng);
    episode_for_task(task, rng, k, q, layout)
}

/// Fresh support and query inputs for a fixed task.
pub fn episode_for_task(
    task: SinusoidTask,
    rng: &mut Stream,
    k: usize,
    q: usize,
    layout: QueryLayout,
) -> Result<TaskEpisode> {
    if k == 0 || q == 0 {
        return Err(Error::InvalidConfig(
            "support and query sizes must be positive".into(),
        ));
    }
    let support_x = draw_inputs(rng, k, &[]);
    let query_x = match layout {
        QueryLayout::Random => draw_inputs(rng, q, &support_x),
        QueryLayout::Grid => {
            let (lo, hi) = INPUT_RANGE;
            let step = (hi - lo) / (EVAL_GRID_POINTS - 1) as f64;
            (0..EVAL_GRID_POINTS)
                .map(|i| lo + step * i as f64)
                .filter(|x| !support_x.contains(x))
                .collect()
        }
    };
    Ok(TaskEpisode {
        support: regression_batch(&task, support_x),
        query: regression_batch(&task, query_x),
        meta: TaskMeta::Sinusoid(task),
    })
}

/// K-shot sinusoid episode from the full task distribution.
pub fn sample_sinusoid_episode(rng: &mut Stream, k: usize, q: usize) -> Result<TaskEpisode> {
    sample_sinusoid_episode_from(
        &SinusoidDistribution::default(),
        rng,
        k,
        q,
        QueryLayout::Random,
    )
}

/// Synthetic N-way classification task family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticClassConfig {
    /// Image side length.
    pub extent: usize,
    /// Side of the random latent grid that is upsampled into a prototype.
    pub latent: usize,
    /// Standard deviation of additive per-pixel noise.
    pub noise: f64,
    /// Examples generated per class; support and query draw from it without replacement.
    pub pool_size: usize,
}

impl Default for SyntheticClassConfig {
    fn default() -> Self {
        SyntheticClassConfig {
            extent: 16,
            latent: 4,
            noise: 0.3,
            pool_size: 20,
        }
    }
}

/// Smooth random pattern: Gaussian latent grid, bilinearly upsampled, standardized.
fn prototype(rng: &mut Stream, cfg: &SyntheticClassConfig) -> Vec<f64> {
    let l = cfg.latent.max(1);
    let grid: Vec<f64> = (0..l * l).map(|_| rng.sample(StandardNormal)).collect();
    let e = cfg.extent;
    let mut img = vec![0.0; e * e];
    let scale = if e > 1 {
        (l - 1) as f64 / (e - 1) as f64
    } else {
        0.0
    };
    for y in 0..e {
        for x in 0..e {
            let (fy, fx) = (y as f64 * scale, x as f64 * scale);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(l - 1), (x0 + 1).min(l - 1));
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let top = grid[y0 * l + x0] * (1.0 - tx) + grid[y0 * l + x1] * tx;
            let bot = grid[y1 * l + x0] * (1.0 - tx) + grid[y1 * l + x1] * tx;
            img[y * e + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    standardize(&mut img);
    img
}

fn standardize(img: &mut [f64]) {
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    let var = img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    img.iter_mut().for_each(|v| *v = (*v - mean) / std);
}

/// N-way K-shot episode over freshly drawn class prototypes. Episode labels
/// are a random permutation of `0..n_way`.
pub fn sample_classification_episode(
    rng: &mut Stream,
    n_way: usize,
    k: usize,
    q: usize,
    cfg: &SyntheticClassConfig,
) -> Result<TaskEpisode> {
    if n_way < 2 {
        return Err(Error::InvalidConfig("n_way must be at least 2".into()));
    }
    if k == 0 || q == 0 {
        return Err(Error::InvalidConfig(
            "support and query sizes must be positive".into(),
        ));
    }
    if k + q > cfg.pool_size {
        return Err(Error::PoolExhausted {
            requested: k + q,
            available: cfg.pool_size,
        });
    }
    let e = cfg.extent;
    let mut protos: Vec<Vec<f64>> = (0..n_way).map(|_| prototype(rng, cfg)).collect();
    let mut order: Vec<usize> = (0..n_way).collect();
    order.shuffle(rng);
    protos = order.iter().map(|&c| protos[c].clone()).collect();

    let mut support = (Vec::new(), Vec::new());
    let mut query = (Vec::new(), Vec::new());
    let mut raw_query = Vec::new();
    for (label, proto) in protos.iter().enumerate() {
        let pool: Vec<Vec<f64>> = (0..cfg.pool_size)
            .map(|_| {
                proto
                    .iter()
                    .map(|&p| p + cfg.noise * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let mut idx: Vec<usize> = (0..cfg.pool_size).collect();
        idx.shuffle(rng);
        for (n, &i) in idx[..k + q].iter().enumerate() {
            let mut img = pool[i].clone();
            if n >= k {
                raw_query.push(img.clone());
            }
            standardize(&mut img);
            let dst = if n < k { &mut support } else { &mut query };
            dst.0.extend(img);
            dst.1.push(label);
        }
    }
    let batch = |(x, labels): (Vec<f64>, Vec<usize>)| Batch::Classification {
        x: Tensor::new(vec![labels.len(), 1, e, e], x).expect("pool images"),
        labels,
    };
    Ok(TaskEpisode {
        support: batch(support),
        query: batch(query),
        meta: TaskMeta::Classification {
            n_way,
            prototypes: protos,
            raw_query,
            noise: cfg.noise,
        },
    })
}

/// Query accuracy of the maximum-likelihood classifier that knows the true
/// prototypes and the noise model. With isotropic Gaussian noise of equal
/// scale per class this is the Bayes-optimal rule, so the average over
/// episodes is an accuracy ceiling for any learner.
pub fn bayes_accuracy(episode: &TaskEpisode) -> Option<f64> {
    let TaskMeta::Classification {
        prototypes,
        raw_query,
        ..
    } = &episode.meta
    else {
        return None;
    };
    let Batch::Classification { labels, .. } = &episode.query else {
        return None;
    };
    let correct = raw_query
        .iter()
        .zip(labels)
        .filter(|(x, &label)| {
            let log_lik = |p: &Vec<f64>| {
                -p.iter()
                    .zip(x.iter())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            };
            let best = (0..prototypes.len())
                .max_by(|&a, &b| log_lik(&prototypes[a]).total_cmp(&log_lik(&prototypes[b])))
                .expect("n_way >= 2");
            best == label
        })
        .count();
    Some(correct as f64 / labels.len() as f64)
}

/// Source of meta-training and validation episodes.
pub trait TaskSource: Sync {
    fn train_episode(&self, step: usize, slot: usize) -> Result<TaskEpisode>;
    fn val_episode(&self, index: usize) -> Result<TaskEpisode>;
}

/// Sinusoid episodes keyed by `(seed, step, slot)`.
///
/// With a task pool, meta-training only ever sees the pooled tasks (with
/// fresh inputs each time) while validation draws new tasks.
#[derive(Clone, Debug)]
pub struct SinusoidSource {
    pub seed: u64,
    pub k: usize,
    pub q: usize,
    pub distribution: SinusoidDistribution,
    pool: Option<Vec<SinusoidTask>>,
}

impl SinusoidSource {
    pub fn new(seed: u64, k: usize, q: usize) -> Self {
        SinusoidSource {
            seed,
            k,
            q,
            distribution: SinusoidDistribution::default(),
            pool: None,
        }
    }

    pub fn with_distribution(mut self, distribution: SinusoidDistribution) -> Self {
        self.distribution = distribution;
        self
    }

    /// Restrict meta-training to `n` tasks drawn once up front.
    pub fn with_task_pool(mut self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("task pool must be non-empty".into()));
        }
        let mut rng = stream(self.seed, &[purpose::TASK_POOL]);
        self.pool = Some(
            (0..n)
                .map(|_| self.distribution.sample_task(&mut rng))
                .collect(),
        );
        Ok(self)
    }

    pub fn pool(&self) -> Option<&[SinusoidTask]> {
        self.pool.as_deref()
    }

    /// Held-out evaluation episodes with `k` support points.
    pub fn test_episodes(
        &self,
        n: usize,
        k: usize,
        layout: QueryLayout,
    ) -> Result<Vec<TaskEpisode>> {
        (0..n)
            .map(|i| {
                let mut rng = stream(self.seed, &[purpose::TEST_EPISODES, i as u64]);
                sample_sinusoid_episode_from(&self.distribution, &mut rng, k, self.q, layout)
            })
            .collect()
    }
}

impl TaskSource for SinusoidSource {
    fn train_episode(&self, step: usize, slot: usize) -> Result<TaskEpisode> {
        let mut rng = stream(
            self.seed,
            &[purpose::TRAIN_EPISODES, step as u64, slot as u64],
        );
        match &self.pool {
            Some(pool) => {
                let task = pool[rng.random_range(0..pool.len())];
                episode_for_task(task, &mut rng, self.k, self.q, QueryLayout::Random)
            }
            None => sample_sinusoid_episode_from(
                &self.distribution,
                &mut rng,
                self.k,
                self.q,
                QueryLayout::Random,
            ),
        }
    }

    fn val_episode(&self, index: usize) -> Result<TaskEpisode> {
        let mut rng = stream(self.seed, &[purpose::VAL_EPISODES, index as u64]);
        sample_sinusoid_episode_from(
            &self.distribution,
            &mut rng,
            self.k,
            self.q,
            QueryLayout::Random,
        )
    }
}

/// Synthetic classification episodes keyed by `(seed, step, slot)`.
#[derive(Clone, Debug)]
pub struct ClassificationSource {
    pub seed: u64,
    pub n_way: usize,
    pub k: usize,
    pub q: usize,
    pub config: SyntheticClassConfig,
}

impl ClassificationSource {
    pub fn test_episodes(&self, n: usize, k: usize) -> Result<Vec<TaskEpisode>> {
        (0..n)
            .map(|i| {
                let mut rng = stream(self.seed, &[purpose::TEST_EPISODES, i as u64]);
                sample_classification_episode(&mut rng, self.n_way, k, self.q, &self.config)
            })
            .collect()
    }
}

impl TaskSource for ClassificationSource {
    fn train_episode(&self, step: usize, slot: usize) -> Result<TaskEpisode> {
        let mut rng = stream(
            self.seed,
            &[purpose::TRAIN_EPISODES, step as u64, slot as u64],
        );
        sample_classification_episode(&mut rng, self.n_way, self.k, self.q, &self.config)
    }

    fn val_episode(&self, index: usize) -> Result<TaskEpisode> {
        let mut rng = stream(self.seed, &[purpose::VAL_EPISODES, index as u64]);
        sample_classification_episode(&mut rng, self.n_way, self.k, self.q, &self.config)
    }
}

/// Anything that can adapt to an episode's support set and be scored on its
/// query set.
pub trait FewShotLearner: Sync {
    /// Query metric (MSE or accuracy) after each requested number of
    /// adaptation steps. `index` identifies the episode for noise streams.
    fn adapt_and_score(
        &self,
        episode: &TaskEpisode,
        steps: &[usize],
        index: usize,
    ) -> Result<Vec<f64>>;
}

/// Per-episode scores, `[episode][step]`.
pub fn evaluate_episodes(
    learner: &dyn FewShotLearner,
    episodes: &[TaskEpisode],
    steps: &[usize],
    execution: Execution,
) -> Result<Vec<Vec<f64>>> {
    par::try_map(episodes.len(), execution, |i| {
        learner.adapt_and_score(&episodes[i], steps, i)
    })
}

/// Mean query MSE over regression episodes after each requested step count.
pub fn evaluate_regression(
    learner: &dyn FewShotLearner,
    episodes: &[TaskEpisode],
    steps: &[usize],
    execution: Execution,
) -> Result<Vec<f64>> {
    if episodes
        .iter()
        .any(|e| !matches!(e.query, Batch::Regression { .. }))
    {
        return Err(Error::InvalidConfig(
            "evaluate_regression needs regression episodes".into(),
        ));
    }
    let scores = evaluate_episodes(learner, episodes, steps, execution)?;
    let n = scores.len().max(1) as f64;
    Ok((0..steps.len())
        .map(|j| scores.iter().map(|s| s[j]).sum::<f64>() / n)
        .collect())
}
