//! File formats, checkpoints, the training loop and the `synlm` command line
//! on top of `synlm-core`.

pub mod checkpoint;
pub mod error;
pub mod cli;
pub mod io;
pub mod selftest;
pub mod train;

pub use error::{Error, Result};
