//! Flat pose vectors: `2K` values for 2D keypoints, `3K` for 3D joints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

macro_rules! pose_type {
    ($name:ident, $dims:expr, $doc:expr) => {
        #[doc = $doc]
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name(Vec<f64>);

        impl $name {
            pub const DIMS: usize = $dims;

            pub fn new(coords: Vec<f64>) -> Result<Self> {
                if coords.is_empty() || coords.len() % $dims != 0 {
                    return Err(Error::InvalidArgument(format!(
                        concat!(stringify!($name), " length {} is not a positive multiple of ", $dims),
                        coords.len()
                    )));
                }
                if coords.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(stringify!($name).to_string()));
                }
                Ok(Self(coords))
            }

            pub fn zeros(joints: usize) -> Self {
                Self(vec![0.0; joints * $dims])
            }

            pub fn joint_count(&self) -> usize {
                self.0.len() / $dims
            }

            pub fn joint(&self, i: usize) -> &[f64] {
                &self.0[i * $dims..(i + 1) * $dims]
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn to_tensor(&self) -> Tensor {
                Tensor::vector(self.0.clone())
            }

            pub fn from_tensor(t: &Tensor) -> Result<Self> {
                Self::new(t.data().to_vec())
            }

            /// Joint-major nested form `[[c0, c1, ...], ...]` for serialization.
            pub fn to_joints(&self) -> Vec<Vec<f64>> {
                self.0.chunks($dims).map(|c| c.to_vec()).collect()
            }

            pub fn from_joints(joints: &[Vec<f64>]) -> Result<Self> {
                let mut flat = Vec::with_capacity(joints.len() * $dims);
                for j in joints {
                    if j.len() != $dims {
                        return Err(Error::InvalidArgument(format!(
                            concat!("joint of ", stringify!($name), " must have ", $dims, " coordinates, got {}"),
                            j.len()
                        )));
                    }
                    flat.extend_from_slice(j);
                }
                Self::new(flat)
            }
        }
    };
}

pose_type!(Pose2D, 2, "A 2D pose: K (x, y) pairs, flattened.");
pose_type!(Pose3D, 3, "A 3D pose: K (x, y, z) triples, flattened.");

impl Pose3D {
    pub fn centroid(&self) -> [f64; 3] {
        let k = self.joint_count() as f64;
        let mut c = [0.0; 3];
        for j in 0..self.joint_count() {
            let joint = self.joint(j);
            c[0] += joint[0];
            c[1] += joint[1];
            c[2] += joint[2];
        }
        [c[0] / k, c[1] / k, c[2] / k]
    }

    pub fn translated(&self, offset: [f64; 3]) -> Pose3D {
        let coords = self
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + offset[i % 3])
            .collect();
        Pose3D(coords)
    }
}
