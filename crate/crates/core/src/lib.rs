//! Unsupervised graph-level out-of-distribution detection.
//!
//! Two fixed views of each graph (node features and structural encodings) feed
//! two independent GIN encoders. Training contrasts the views at node, graph and
//! group (prototype) level; at inference the per-level contrastive errors of a
//! test graph are aggregated into an OOD score where larger means more likely OOD.

pub mod autodiff;
pub mod contrast;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graphdata;
pub mod matrix;
pub mod rng;
pub mod scoring;
pub mod sparse;
pub mod structenc;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
