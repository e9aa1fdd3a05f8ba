//! Concept-based explanations for fixed image classifiers.
//!
//! The crate discovers visual concepts from superpixel segments, scores their
//! influence on class predictions with concept activation vectors, clusters
//! them across classes and lays the result out for interactive exploration.
//! A pipeline run produces an immutable, content-addressed snapshot.

pub mod analytics;
pub mod clustering;
pub mod data;
pub mod discovery;
pub mod error;
pub mod fixture;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod segmentation;
pub mod snapshot;
pub mod spatial;
pub mod tcav;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
