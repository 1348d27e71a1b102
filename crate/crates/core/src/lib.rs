//! Numerical core for cluster-target masked-prediction distillation of
//! speech encoders.
//!
//! Everything here is `no_std` + `alloc`: tensors and a gradient tape, a
//! synthetic speech corpus, MFCC features, the encoder, k-means targets, the
//! training objectives, Adam, linear probes and the experiment presets. File
//! formats, the training driver and the CLI live in the `dicelab` crate.

#![no_std]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod clustering;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod mfcc;
pub mod model;
pub mod plan;
pub mod probes;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
