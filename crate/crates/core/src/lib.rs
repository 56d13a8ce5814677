//! Submap-based dense RGB-D SLAM backend.

pub mod cloud;
pub mod dataio;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod place;
pub mod pose_graph;
pub mod registration;
pub mod sensor;
pub mod submap;
pub mod tracking;

pub use error::{Result, SlamError};
