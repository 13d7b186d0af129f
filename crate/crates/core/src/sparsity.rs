//! Fraction of variational weights whose `log α` exceeds a threshold, and
//! pruning that materializes the eval-mode mask. Biases are never counted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{log_alpha, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub name: String,
    pub dropped: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub eta: f64,
    pub layers: Vec<LayerSparsity>,
    /// `Σ dropped / Σ total`.
    pub global_ratio: f64,
}

impl SparsityReport {
    pub fn dropped(&self) -> usize {
        self.layers.iter().map(|l| l.dropped).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.total).sum()
    }
}

/// Count weights with `log α > eta` across every variational layer.
pub fn measure_sparsity(model: &Model, eta: f64) -> Result<SparsityReport> {
    let groups = model.variational_groups();
    if groups.is_empty() {
        return Err(Error::NotVariational);
    }
    let params = model.params();
    let layers: Vec<LayerSparsity> = groups
        .iter()
        .map(|&(t, s)| {
            let dropped = params[t]
                .data()
                .iter()
                .zip(params[s].data())
                .filter(|(&th, &ls2)| log_alpha(th, ls2) > eta)
                .count();
            LayerSparsity {
                name: model.param_info()[t].name.clone(),
                dropped,
                total: params[t].numel(),
            }
        })
        .collect();
    let dropped: usize = layers.iter().map(|l| l.dropped).sum();
    let total: usize = layers.iter().map(|l| l.total).sum();
    Ok(SparsityReport {
        eta,
        layers,
        global_ratio: dropped as f64 / total as f64,
    })
}

/// Zero every `θ` whose `log α > eta`; everything else is copied.
pub fn prune(model: &Model, eta: f64) -> Result<Model> {
    let groups = model.variational_groups();
    if groups.is_empty() {
        return Err(Error::NotVariational);
    }
    let mut params = model.params().to_vec();
    for (t, s) in groups {
        let ls2 = params[s].data().to_vec();
        for (th, l) in params[t].data_mut().iter_mut().zip(ls2) {
            if log_alpha(*th, l) > eta {
                *th = 0.0;
            }
        }
    }
    model.with_params(params)
}
