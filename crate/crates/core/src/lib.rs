pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod fusion;
pub mod moe;
pub mod nn;
pub mod recon;
pub mod scalar;
pub mod slot;
pub mod survival;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
