//! Block-local training of classifiers by label denoising.
//!
//! Every block of the network learns, on its own, to recover a clean class
//! embedding from a noised one given the input. No gradient ever crosses a
//! block boundary. Three variants are provided: discrete-time diffusion
//! ([`trainer::train_noprop_dt`]), continuous-time diffusion with a learned
//! noise schedule ([`trainer::train_noprop_ct`]) and flow matching
//! ([`trainer::train_noprop_fm`]), plus an end-to-end backprop baseline with
//! the same blocks ([`trainer::train_backprop_baseline`]).
//!
//! The crate carries its own small tensor/autodiff engine
//! ([`autodiff::ComputeGraph`]) so that each graph provably covers a single
//! block, and so that the number of live nodes can be measured directly.

pub mod autodiff;
pub mod blocks;
pub mod check;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod inference;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use autodiff::{ComputeGraph, GradMap, Mode, NodeId, Primitive};
pub use error::{Error, Result};
pub use optim::{OptimizerConfig, OptimizerKind, ParamStore};
pub use rng::RngStream;
pub use tensor::Tensor;
