pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod dsp;
pub mod enhance;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod ssl;
pub mod tensor;
pub mod train;
pub mod vq;

pub use error::{Error, Result};
