//! File formats, training driver, pipeline orchestration and reporting on
//! top of `dicelab-core`.

pub mod cli;
pub mod driver;
pub mod error;
pub mod features;
pub mod formats;
pub mod pipeline;
pub mod probing;
pub mod report;
pub mod store;

pub use dicelab_core as core;
pub use error::{Error, ErrorClass, Result};
