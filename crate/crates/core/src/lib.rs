//! Synthetic testbed for cloaking backdoor attacks on object detectors.

pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod harness;
pub mod modelcore;
pub mod onestage;
pub mod poison;
pub mod regulate;
pub mod scenegen;
pub mod train;
pub mod twostage;

pub use error::{Error, Result};
