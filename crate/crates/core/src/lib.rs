//! Mask-conditioned denoising diffusion: a cosine-schedule DDPM whose U-Net
//! sees the segmentation mask as an extra input channel, plus the data
//! pipeline, checkpointing and evaluation metrics around it.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod ops;
pub mod optimizer;
pub mod raster;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
