//! Core library for spatio-temporal graph convolutional networks over
//! skeleton data: dense tensors with reverse-mode autodiff, partitioned
//! graph adjacency, spatial mixing layers (multiplicative, additive,
//! symmetric low-rank, bilinear), the ten-layer network builder, an
//! analytic cost model, and a deterministic SGD training loop.
//!
//! The crate is `no_std` + `alloc`; enable the `std` feature to use the
//! platform math intrinsics instead of `libm`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod fdcheck;
pub mod flops;
pub mod graph;
pub mod layers;
pub mod math;
pub mod network;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Gradients, Mode, Tape, Var};
pub use tensor::Tensor;
