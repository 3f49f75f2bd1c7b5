//! Desk-scale radar imaging pipeline: synthesizes mmWave FMCW returns from
//! 3D scenes, processes them into intensity volumes, translates those into
//! depth images with a conditional GAN, fuses views into coarse point clouds,
//! and refines them with a second GAN. Every numeric stage is deterministic
//! given a seed and covered by analytic or finite-difference oracles.

pub mod conv;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod radar;
pub mod rng;
pub mod scalar;
pub mod stage1;
pub mod stage2;
pub mod tensor;

pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError, TensorResult};
