//! varfit: next-scale autoregressive image modeling at desk scale, with
//! parameter-efficient and differentially private fine-tuning.

pub mod adapters;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod dp;
pub mod error;
pub mod flops;
pub mod metrics;
pub mod model;
pub mod resample;
pub(crate) mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
