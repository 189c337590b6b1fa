pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod losses;
pub mod masking;
pub mod model;
pub mod matching;
pub mod nn;
pub mod optim;
pub mod params;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
