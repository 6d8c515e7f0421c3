//! Prototype-based modality rebalancing for two-branch multimodal classifiers.
//!
//! Everything in this crate is pure computation on owned `f64` buffers: dense
//! tensors, MLP encoders with hand-derived backward passes, fusion heads, the
//! prototype machinery that measures and corrects modality imbalance, seeded
//! dataset generators, the training loop and the analysis instruments. IO,
//! file formats and the command line live in the `pmr-lab` crate.
//!
//! The crate is `no_std` and only needs `alloc`. Transcendental functions go
//! through `libm`, so a fixed seed yields bitwise identical results on every
//! platform.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod pmr;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor2D;
