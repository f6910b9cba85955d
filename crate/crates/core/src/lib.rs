pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod influence;
pub mod numcore;
pub mod parser;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
