// NaN-rejecting `!(x > 0.0)` checks and index loops over parallel arrays are deliberate
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ae;
pub mod autodiff;
pub mod energy;
pub mod entropy;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod manifold;
pub mod nn;
pub mod rng;
pub mod samplers;
pub mod targets;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
