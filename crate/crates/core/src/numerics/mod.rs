//! Deterministic numerical substrate: dense tensors and layer primitives, a
//! sparse SPD solver for circuit systems, and keyed random streams.

pub mod ops;
pub mod rng;
pub mod sparse;
mod tensor;

pub use ops::{avgpool2d, conv2d, linear, matmul, matvec};
pub use rng::{bernoulli_sample, gaussian_sample, Purpose, RandomStream};
pub use sparse::{solve_spd, SparseSpdSystem, SpdFactor, DEFAULT_SOLVER_TOL};
pub use tensor::Tensor;
