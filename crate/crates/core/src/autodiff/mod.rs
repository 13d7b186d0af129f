//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every forward pass records onto a fresh [`Tape`]. Backward rules are
//! themselves written in terms of recorded primitives, so passing
//! `create_graph = true` to [`Tape::grad`] yields gradients that can be
//! differentiated again. That is what the second-order meta-gradient needs.
//!
//! ```
//! use bsmall::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(&Tensor::scalar(2.0));
//! let y = x.square().mul(x).unwrap(); // x³
//! let dy = tape.grad(y, &[x], true).unwrap()[0];
//! let d2y = tape.grad(dy, &[x], false).unwrap()[0];
//! assert_eq!(dy.item(), 12.0);
//! assert_eq!(d2y.item(), 12.0);
//! ```

pub mod kernels;
mod tape;

pub use tape::{Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Owned dense tensor, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Batch normalization without running statistics: each channel (axis 1)
/// is normalized by the mean and biased variance over all other axes, then
/// scaled by `gamma` and shifted by `beta` (both shaped `[channels]`).
pub fn batch_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() < 2 || gamma.shape() != [shape[1]] || beta.shape() != [shape[1]] {
        return Err(Error::shape("batch_norm", &shape, &gamma.shape()));
    }
    let mut stat_shape = vec![1; shape.len()];
    stat_shape[1] = shape[1];
    let count = (x.numel() / shape[1]) as f64;
    let mean = x.sum_to(&stat_shape)?.scale(1.0 / count);
    let centered = x.sub_bcast(mean)?;
    let var = centered.square().sum_to(&stat_shape)?.scale(1.0 / count);
    let std = var.add_scalar(eps).sqrt();
    let normed = centered.div_bcast(std)?;
    let gamma = gamma.reshape(&stat_shape)?;
    let beta = beta.reshape(&stat_shape)?;
    normed.mul_bcast(gamma)?.add_bcast(beta)
}

/// Mean of squared differences.
pub fn mse<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    Ok(pred.sub(target)?.square().mean())
}
