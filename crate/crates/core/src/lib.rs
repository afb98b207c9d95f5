//! Few-shot classification with ensembles of multi-order statistics pooling
//! branches over a shared convolutional backbone.

pub mod config;
pub mod dataset;
pub mod error;
pub mod fewshot;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod mospool;
pub mod pretrain;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use rng::Rng;
pub use tensor::{DType, Tensor};
