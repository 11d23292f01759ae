//! Explicit pinhole camera, used only by the synthetic data generator as a
//! ground-truth oracle for the projection the model learns implicitly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{Pose2D, Pose3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    /// Focal lengths in pixels.
    pub fx: f64,
    pub fy: f64,
    /// Principal point in pixels.
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// World-to-camera translation, millimeters.
    pub translation: [f64; 3],
}

impl PinholeCamera {
    /// Identity-pose camera at the world origin.
    pub fn facing_forward(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx = {}, fy = {}",
                self.fx, self.fy
            )));
        }
        let r = &self.rotation;
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "rotation determinant {det} deviates from 1 by more than 1e-9"
            )));
        }
        // orthonormality: R Rᵀ == I
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(
                        "rotation matrix is not orthonormal".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Transform a world-space point into camera space.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    pub fn project_point(&self, p: [f64; 3], joint: usize) -> Result<(f64, f64)> {
        let c = self.to_camera(p);
        if c[2] <= 0.0 {
            return Err(Error::BehindCamera {
                joint,
                depth: c[2],
            });
        }
        Ok((self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy))
    }
}

/// Project every joint of a 3D pose (millimeters, world space) into pixels.
pub fn project_pinhole(p3d: &Pose3D, cam: &PinholeCamera) -> Result<Pose2D> {
    let mut coords = Vec::with_capacity(2 * p3d.joint_count());
    for j in 0..p3d.joint_count() {
        let joint = p3d.joint(j);
        let (u, v) = cam.project_point([joint[0], joint[1], joint[2]], j)?;
        coords.push(u);
        coords.push(v);
    }
    Pose2D::new(coords)
}
