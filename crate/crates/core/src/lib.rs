//! Neuron-level debugging for image classifiers: counterfactual neuron
//! ranking, class-conditional feature visualization, and decision-layer
//! editing, plus the planted-confound scenarios used to exercise them.

pub mod counterfactual;
pub mod editor;
pub mod error;
pub mod evaluation;
pub mod imageio;
pub mod model;
pub mod nn;
pub mod optim;
pub mod planted;
pub mod pretrain;
pub mod scenarios;
pub mod tensor;
pub mod visualizer;
pub mod train;

pub use error::{Error, Result};
