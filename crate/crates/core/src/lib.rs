pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradsuite;
pub mod model;
pub mod pretrain;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
