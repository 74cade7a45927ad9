//! Active selection of images to annotate for semi-supervised semantic
//! segmentation, plus the adversarial segmenter trained on the selection.

pub mod active_learner;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod pool;
pub mod s4gan;
pub mod seed;
pub mod strategies;

pub use error::{Error, Result};
