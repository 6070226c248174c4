//! Run store, job queue, HTTP API and CLI plumbing around `neurodebug`.
//!
//! A run is a directory holding `manifest.json` and the artifacts of every
//! stage: base metrics, mistakes, counterfactuals, the neuron ranking, and
//! any galleries and edits requested afterwards.

pub mod api;
pub mod config;
pub mod error;
pub mod jobs;
pub mod manifest;
pub mod pipeline;
pub mod store;

pub use config::WorkbenchConfig;
pub use error::{Result, WorkbenchError};
pub use manifest::{DatasetDescriptor, RunManifest, RunRequest, RunStatus, StageKind};
pub use pipeline::{ClassMode, EditRequest, VisualizationRequest, Workbench};
