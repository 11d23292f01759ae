//! 2D-to-3D human pose lifting with inference-time self-supervised
//! reprojection refinement.
//!
//! The crate lifts monocular 2D keypoint sequences to 3D joint positions
//! with a temporal LSTM model, then refines each frame at inference time by
//! nudging per-frame clones of the 3D-to-2D projector so that the projected
//! pose matches the observed 2D keypoints. Everything runs on a small
//! deterministic f64 tape; see the `poselift` binary for the CLI.

pub mod adam;
pub mod camera;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod lifter;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod pose;
pub mod projector;
pub mod ssc;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use pose::{Pose2D, Pose3D};
pub use tensor::Tensor;
