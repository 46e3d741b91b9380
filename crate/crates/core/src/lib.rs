//! Core of a training-free open-vocabulary segmentation pipeline.
//!
//! The crate holds everything that does not need pretrained weights:
//! attention algebra, early-layer fusion, score maps and labelling,
//! diffusion-attention refinement, dataset loading, metrics, configuration
//! and the evaluation harness. Model backends plug in through the traits in
//! [`backend`].

pub mod attention;
pub mod backend;
pub mod compensation;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod fixture;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod replay;
pub mod report;
pub mod resample;
pub mod segment;
pub mod timing;
pub mod toy;

pub use error::{Error, Result};
