//! Representation learning and evaluation for transaction sequences.

pub mod context;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod numeric;
pub mod objectives;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
