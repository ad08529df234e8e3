//! Core engine for the multi-task part-aware network (MPN) laboratory.
//!
//! Everything in here is pure computation over in-memory buffers: a small
//! dense-tensor type with reverse-mode autodiff, the numeric kernels, the
//! coarse part-prior pipeline, the MPN model itself, its training losses,
//! the SGD optimizer, and the ranking metrics. File formats, corpus
//! generation, and the CLI live in the companion `mpn-lab` crate.
//!
//! The crate is `no_std`-compatible (it only needs `alloc`); the default
//! `std` feature just switches float math to the platform intrinsics.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod augment;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod mpnt;
pub mod ops;
pub mod optim;
pub mod prior;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
