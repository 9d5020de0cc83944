pub mod bench;
pub mod distill;
pub mod error;
pub mod eval;
pub mod instancegen;
pub mod optim;
pub mod policy;
pub mod problems;
pub mod rng;
pub mod solvers;
pub mod training;

pub use error::{Error, Result};
