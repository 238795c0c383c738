#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Feed-forward visual relocalization against a sparse, ray-encoded map.
pub mod checks;
pub mod config;
pub mod container;
pub mod error;
pub mod eval;
pub mod frame;
pub mod geometry;
pub mod model;
pub mod retrieval;
pub mod rng;
pub mod solver;
pub mod synth;
pub mod tensor;
pub mod training;
pub use error::{Error, Result};
