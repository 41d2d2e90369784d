//! Pruning laboratory: compares magnitude and gradient-sensitive pruning,
//! applied either after training (iterative, with rewind to the initial
//! weights) or once at initialization.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod network;
pub mod pruning;
pub mod trainer;

pub use error::{Error, Result};
