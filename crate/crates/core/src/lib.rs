//! Encoder-decoder LSTM with a sequential attention layer that translates a
//! sequence of object feature vectors into a caption.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
