pub mod adapter;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod integrator;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod run;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
