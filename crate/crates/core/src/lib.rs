pub mod constraint;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod integrator;
pub mod net;
pub mod ostx;
pub mod physics;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use grid::{Dims, GridGeometry, NormStats, OceanState};
pub use scalar::Real;
pub use tensor::Tensor;

pub type Denoiser32 = net::Denoiser<f32>;
pub type Denoiser64 = net::Denoiser<f64>;
pub type State32 = grid::OceanState<f32>;
pub type State64 = grid::OceanState<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
