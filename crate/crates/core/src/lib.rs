//! Frame-level crossmodal supervision of a visual speech encoder with
//! quantized audio tokens, on a synthetic homophene-rich corpus.

pub mod analysis;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod losses;
pub mod model;
pub mod params;
pub mod quantizer;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
