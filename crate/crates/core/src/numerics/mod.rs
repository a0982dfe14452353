//! Dense tensors, reverse-mode autodiff, seeded randomness and tensor I/O.

mod graph;
mod params;
mod real;
mod rng;
mod tensor;

pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod optim;

pub use gradcheck::{finite_diff_check, finite_diff_check_params};
pub use graph::{Gradients, Graph, Unary, Var};
pub use kernels::{AttnLayout, RotaryTable};
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
pub use real::Real;
pub use rng::{gaussian, Rng, RngState};
pub use tensor::Tensor;
