pub mod autodiff;
pub mod error;
pub mod layers;
pub mod meta;
pub mod models;
pub mod par;
pub mod rng;
pub mod sensornet;
pub mod sparsity;
pub mod tasks;

pub use error::{Error, Result};
