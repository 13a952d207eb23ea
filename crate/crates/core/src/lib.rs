pub mod bench;
pub mod circulant;
pub mod config;
pub mod data;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod matrix;
pub mod model;
pub mod nn;
pub mod optim;

pub use error::{Error, Result};
pub use matrix::Matrix;
