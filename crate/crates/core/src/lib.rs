//! Point-cloud normal estimation toolkit.
//!
//! The pipeline extracts a distance-ordered patch around each query point,
//! normalizes it into a canonical PCA frame, encodes hierarchical features
//! with attention-driven fusion, runs a chain of selective state-space
//! blocks over the distance-ordered tokens, and regresses a weighted unit
//! normal that is mapped back to world coordinates. Classical PCA and jet
//! baselines, a training/evaluation harness, and synthetic fixtures are
//! included.

pub mod bench;
pub mod checkpoint;
pub mod classical;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod head;
pub mod model;
pub mod nn;
pub mod patch;
pub mod pssm;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
