//! Focus U-Net: an attention-gated encoder–decoder for binary segmentation,
//! built on a small reverse-mode autodiff engine.

pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, ParamStore, Parameter, Var};
pub use tensor::{Real, Tensor};
