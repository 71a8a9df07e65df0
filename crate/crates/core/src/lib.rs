#![allow(clippy::too_many_arguments)]

pub mod ablation;
pub mod assignment;
pub mod boxes;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod routing;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, OpKind, Var};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{Dtype, Scalar, Tensor};
