//! Prompt-guided RGB-X semantic segmentation.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dsrm;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod labels;
pub mod maclip;
pub mod metrics;
pub mod modality;
pub mod nn;
pub mod ops;
pub mod prompt;
pub mod synth_data;

pub use error::{Error, Result};
