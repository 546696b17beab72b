//! Sequential recommendation with dual dynamic user/item representations
//! learned on time-sliced interaction graphs, trained jointly with a
//! temporal point process over consecutive slices.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graphs;
pub mod model;
pub mod rng;
pub mod sparse;
pub mod synthetic;
pub mod tpp;
pub mod training;

pub use error::{Error, Result};
