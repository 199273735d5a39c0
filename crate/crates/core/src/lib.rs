//! Deep BSDE solvers trained on simulated paths, with and without a
//! Malliavin-derivative loss term.

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod network;
pub mod optim;
pub mod problems;
pub mod schemes;
pub mod sde;

pub use error::{Error, Result};
