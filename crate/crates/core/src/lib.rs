pub mod config;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod nn;
pub mod pgm;
pub mod selfcheck;
pub mod speaker;
pub mod trainer;
pub mod wav;

pub use error::{Error, Result};
