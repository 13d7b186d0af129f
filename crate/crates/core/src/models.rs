//! The two architectures used in the experiments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{build_model, LayerSpec, Model};
use crate::rng::{purpose, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    SinusoidMlp,
    Conv4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub variational: bool,
    pub n_way: usize,
    pub filters: usize,
    pub channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::SinusoidMlp,
            variational: false,
            n_way: 5,
            filters: 32,
            channels: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.architecture == Architecture::Conv4 && self.n_way < 2 {
            return Err(Error::InvalidConfig("n_way must be at least 2".into()));
        }
        if self.filters == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig(
                "filters and channels must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub const SINUSOID_HIDDEN: usize = 40;

/// 1 → 40 → 40 → 1 with ReLU on the hidden layers and a linear output.
pub fn sinusoid_mlp(variational: bool, seed: u64) -> Model {
    let h = SINUSOID_HIDDEN;
    let specs = [
        LayerSpec::dense(1, h),
        LayerSpec::relu(),
        LayerSpec::dense(h, h),
        LayerSpec::relu(),
        LayerSpec::dense(h, 1),
    ];
    build_model(
        &[1],
        &specs,
        variational,
        &mut stream(seed, &[purpose::INIT]),
    )
    .expect("sinusoid layer chain composes")
}

/// Four blocks of conv3x3 (same padding) → batch-norm → ReLU → 2x2 max-pool,
/// then flatten and a dense head producing `n_way` logits.
pub fn conv4(config: &ModelConfig, input_extent: usize, seed: u64) -> Result<Model> {
    config.validate()?;
    if input_extent < 16 {
        return Err(Error::InvalidSpec(format!(
            "input extent {input_extent} collapses to zero after four 2x2 pools"
        )));
    }
    let f = config.filters;
    let mut specs = Vec::new();
    let mut ch = config.channels;
    for _ in 0..4 {
        specs.push(LayerSpec::conv3x3(ch, f));
        specs.push(LayerSpec::batch_norm(f));
        specs.push(LayerSpec::relu());
        specs.push(LayerSpec::max_pool());
        ch = f;
    }
    let side = input_extent / 16;
    specs.push(LayerSpec::flatten());
    specs.push(LayerSpec::dense(f * side * side, config.n_way));
    build_model(
        &[config.channels, input_extent, input_extent],
        &specs,
        config.variational,
        &mut stream(seed, &[purpose::INIT]),
    )
}

pub fn build(config: &ModelConfig, input_extent: usize, seed: u64) -> Result<Model> {
    match config.architecture {
        Architecture::SinusoidMlp => Ok(sinusoid_mlp(config.variational, seed)),
        Architecture::Conv4 => conv4(config, input_extent, seed),
    }
}
