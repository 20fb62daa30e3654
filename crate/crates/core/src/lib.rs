pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod priors;
pub mod scalar;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use params::ParamSet;
pub use scalar::Scalar;
pub use tensor::{Graph, Sgd, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type ParamSet64 = ParamSet<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type MerLearner64 = experiment::MerLearner<f64>;
pub type MerLearner32 = experiment::MerLearner<f32>;
