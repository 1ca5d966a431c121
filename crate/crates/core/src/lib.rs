pub mod adapter;
pub mod cache;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod profile;
pub mod tensor;
pub mod train;
pub mod vit;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::Tensor;
