//! Declarative experiment configuration (TOML) with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use bsmall::meta::{Algorithm, MetaConfig};
use bsmall::models::{Architecture, ModelConfig};
use bsmall::tasks::{QueryLayout, SyntheticClassConfig};

use crate::UserError;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "BSMALL_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ExperimentKind {
    Sinusoid,
    SynthClass,
    Sensornet,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Sinusoid => "sinusoid",
            ExperimentKind::SynthClass => "synth_class",
            ExperimentKind::Sensornet => "sensornet",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub filters: usize,
    pub n_way: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            filters: 32,
            n_way: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensornetSection {
    pub nodes: usize,
    /// Graph file; a complete graph with banded vertices when absent.
    pub graph: Option<PathBuf>,
    pub rounds: usize,
    pub oracle_check: bool,
    /// `[round, vertex]` uploads to drop.
    pub failures: Vec<(usize, usize)>,
    pub validate_every: usize,
}

impl Default for SensornetSection {
    fn default() -> Self {
        SensornetSection {
            nodes: 4,
            graph: None,
            rounds: 50,
            oracle_check: false,
            failures: Vec::new(),
            validate_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    /// Adaptation step counts reported in the table.
    pub eval_steps: Vec<usize>,
    pub eval_episodes: usize,
    /// Sinusoid evaluation query: a dense grid per episode, or
    /// `eval_query_points` random points per episode.
    pub eval_query: QueryLayout,
    pub eval_query_points: usize,
    /// Restrict sinusoid meta-training to this many tasks (0 = unlimited).
    pub task_pool: usize,
    pub checkpoint_every: usize,
    pub meta: MetaConfig,
    pub model: ModelSection,
    pub classification: SyntheticClassConfig,
    pub sensornet: SensornetSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::Sinusoid,
            algorithm: Algorithm::Maml,
            seeds: vec![0],
            output_dir: None,
            eval_steps: vec![1, 5, 10],
            eval_episodes: 600,
            eval_query: QueryLayout::Grid,
            eval_query_points: 600,
            task_pool: 0,
            checkpoint_every: 0,
            meta: MetaConfig::default(),
            model: ModelSection::default(),
            classification: SyntheticClassConfig::default(),
            sensornet: SensornetSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub experiment: Option<ExperimentKind>,
    pub algorithm: Option<Algorithm>,
    pub k: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub steps: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub nodes: Option<usize>,
    pub rounds: Option<usize>,
    pub oracle_check: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, UserError> {
        toml::from_str(text).map_err(|e| UserError(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, UserError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UserError(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(e) = o.experiment {
            self.experiment = e;
        }
        if let Some(a) = o.algorithm {
            self.algorithm = a;
        }
        if let Some(k) = o.k {
            self.meta.k_shot = k;
        }
        if let Some(s) = &o.seeds {
            self.seeds.clone_from(s);
        }
        if let Some(n) = o.steps {
            self.meta.total_meta_steps = n;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = Some(d.clone());
        }
        if let Some(n) = o.nodes {
            self.sensornet.nodes = n;
        }
        if let Some(r) = o.rounds {
            self.sensornet.rounds = r;
        }
        if o.oracle_check {
            self.sensornet.oracle_check = true;
        }
    }

    /// Field-level checks; messages name the offending key.
    pub fn validate(&self) -> Result<(), UserError> {
        let fail = |m: String| Err(UserError(m));
        if self.seeds.is_empty() {
            return fail("seeds: at least one seed is required".into());
        }
        if self.eval_steps.is_empty() {
            return fail("eval_steps: at least one step count is required".into());
        }
        if self.eval_episodes == 0 {
            return fail("eval_episodes: must be positive".into());
        }
        if self.eval_query == QueryLayout::Random && self.eval_query_points == 0 {
            return fail("eval_query_points: must be positive".into());
        }
        if let Err(e) = self.meta.validate() {
            return fail(format!("meta: {e}"));
        }
        if let Err(e) = self.model_config().validate() {
            return fail(format!("model: {e}"));
        }
        if self.experiment == ExperimentKind::SynthClass {
            let c = &self.classification;
            if self.meta.k_shot + self.meta.query_size > c.pool_size {
                return fail(format!(
                    "classification.pool_size: {} cannot supply k_shot + query_size = {}",
                    c.pool_size,
                    self.meta.k_shot + self.meta.query_size
                ));
            }
            if c.extent < 16 {
                return fail("classification.extent: must be at least 16".into());
            }
        }
        if self.experiment == ExperimentKind::Sensornet {
            if self.sensornet.graph.is_none() && self.sensornet.nodes == 0 {
                return fail("sensornet.nodes: must be positive".into());
            }
            if self.sensornet.rounds == 0 {
                return fail("sensornet.rounds: must be positive".into());
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let architecture = match self.experiment {
            ExperimentKind::SynthClass => Architecture::Conv4,
            _ => Architecture::SinusoidMlp,
        };
        ModelConfig {
            architecture,
            variational: self.algorithm.is_variational(),
            n_way: self.model.n_way,
            filters: self.model.filters,
            channels: 1,
        }
    }

    /// `output_dir`, else `$BSMALL_OUTPUT_ROOT/<kind>_<algorithm>`, else `runs/...`.
    pub fn resolve_output(&self) -> PathBuf {
        if let Some(d) = &self.output_dir {
            return d.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(format!(
            "{}_{}",
            self.experiment.name(),
            self.algorithm.name()
        ))
    }
}
