//! Graph-conditioned latent reasoning for sequential recommendation.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod inference;
pub mod pipeline;
pub mod reasoning;
pub mod scalar;
pub mod seed;
pub mod simplex;
pub mod tensor;
pub mod verification;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use graph::{ItemId, UserId};
pub use scalar::Scalar;

pub type Model64 = backbone::Model<f64>;
pub type Model32 = backbone::Model<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Categorical64 = simplex::Categorical<f64>;
pub type Categorical32 = simplex::Categorical<f32>;
