//! seqmark locates and marks rumor spans in token sequences.

pub mod bimamba2;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod mamba2;
pub mod marking;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
