//! Continual semantic segmentation across a sequence of adverse-weather
//! domains, with teacher-student self-training, acquisition masks on the
//! pseudo-label loss, blended pseudo-labels and Fourier weather replay.

pub mod blending;
pub mod config;
pub mod container;
pub mod data;
pub mod dataset;
pub mod error;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod replay;
pub mod report;
pub mod seed;
pub mod sequence;
pub mod trainer;

pub use error::{Error, Result};
