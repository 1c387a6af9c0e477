//! Tensor, reverse-mode autodiff, building blocks, model zoo, losses and
//! metrics for the UltraSeg family of sub-0.3M-parameter segmentation
//! networks.
//!
//! The crate is `no_std` + `alloc`. Enabling the default `std` feature only
//! switches the math backend to the platform libm and turns on runtime CPU
//! feature detection inside the GEMM kernels.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod imgproc;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod real;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use autodiff::{grad_check, Tape, Var};
pub use error::{CheckpointError, Error, Result};
pub use real::Real;
pub use rng::Rng;
pub use tensor::{Shape, Tensor};
