//! Hybrid-Tower text-to-video retrieval with generated pseudo-queries.
//!
//! Videos are encoded into video, frame and patch tokens; the most
//! informative patches are selected, a causal generator turns the visual
//! tokens into a pseudo text query, and a fusioner pools the video tokens
//! against that pseudo-query. The fused vector is stored offline, so serving
//! a text query is a single dot product per video.

pub mod autodiff;
pub mod blob;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusioner;
pub mod generator;
pub mod its;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod serving;
pub mod trainer;

pub use error::{PigError, Result};
