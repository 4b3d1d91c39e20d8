//! Skeleton action recognition with temporal-channel aggregation graph
//! convolutions, built from scratch: a small dense-tensor autodiff kernel,
//! the spatial/temporal network modules, toy-scale training over the four
//! skeleton streams, and the constrained score-fusion solver.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod layers;
pub mod network;
pub mod synth;
pub mod tca;
pub mod tensor;
pub mod tf;
pub mod train;

pub use error::{Error, Result};
