//! Desk-scale vision-language pretraining with a single prefix language
//! modeling objective.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod inference;
pub mod kernels;
pub mod model;
pub mod objectives;
pub mod parallel;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod vision;

pub use error::{Error, Result};
pub use graph::{Graph, Mask, Var};
pub use params::{ParamStore, Parameter};
pub use tensor::{DType, Real, Tensor};
