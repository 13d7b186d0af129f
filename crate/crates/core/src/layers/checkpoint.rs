//! Self-describing JSON checkpoints: layer list, constants version and
//! every named parameter tensor with its shape.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, KlConstants, LayerSpec, Model, KL_CONSTANTS};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::stream;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kl_constants: KlConstants,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            kl_constants: KL_CONSTANTS,
            input_shape: model.input_shape().to_vec(),
            layers: model.specs().to_vec(),
            params: model
                .param_info()
                .iter()
                .zip(model.params())
                .map(|(info, t)| NamedTensor {
                    name: info.name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        if self.kl_constants.version != KL_CONSTANTS.version {
            return Err(Error::Parse(format!(
                "checkpoint uses KL constants version {}, this build has {}",
                self.kl_constants.version, KL_CONSTANTS.version
            )));
        }
        let skeleton = build_model(&self.input_shape, &self.layers, false, &mut stream(0, &[]))?;
        if skeleton.param_info().len() != self.params.len() {
            return Err(Error::Parse("parameter list does not match layers".into()));
        }
        let mut params = Vec::with_capacity(self.params.len());
        for (info, named) in skeleton.param_info().iter().zip(self.params) {
            if info.name != named.name {
                return Err(Error::Parse(format!(
                    "expected parameter {}, found {}",
                    info.name, named.name
                )));
            }
            params.push(Tensor::new(named.shape, named.values)?);
        }
        skeleton.with_params(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}
