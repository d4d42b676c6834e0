//! Scene-aware 3D object placement augmentation for monocular detection
//! datasets: learn a BEV placement prior from ground-truth boxes, sample
//! plausible collision-free placements, composite car sprites into scene
//! images, and score placement plausibility.

pub mod boxaug;
pub mod cli;
pub mod compositor;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod fixture;
pub mod geometry;
pub mod metrics;
pub mod placement;

pub use error::{Error, Result};
