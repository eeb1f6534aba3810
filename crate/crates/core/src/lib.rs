//! EnFormer polyp segmentation: dual-encoder models, training, metrics and
//! interpretability tools on top of candle.

pub mod blocks;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod interpret;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod params;
pub mod training;

pub use error::{Error, Result};
