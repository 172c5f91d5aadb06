//! Joint multi-modal demand prediction with multi-graph convolutional
//! networks and multi-task knowledge sharing.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graphs;
pub mod io;
pub mod model;
pub mod mtl;
pub mod numcore;
pub mod train;

pub use error::{Error, Result};
pub use numcore::{Matrix, Tensor3};
