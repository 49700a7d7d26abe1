//! Unsupervised field-level stress detection on multi-temporal multispectral scenes.
//!
//! Scenes are loaded ([`scene_io`]), cut into 4x4 sub-patch time series ([`preprocess`]),
//! embedded by an autoencoder ([`models`]) or a baseline ([`baseline_features`]), clustered
//! into two groups and aggregated to field labels ([`cluster_agg`]), then scored
//! ([`evaluation`]). [`synthgen`] produces labelled test data; [`pipeline`] ties the stages
//! to a work directory.

pub mod baseline_features;
pub mod cluster_agg;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod pipeline;
pub mod preprocess;
mod rawio;
pub mod scalar;
pub mod scene_io;
pub mod synthgen;
pub mod temporal_encoding;

pub use error::{Error, Result};
