pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod label_codec;
pub mod losses;
pub mod network;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
